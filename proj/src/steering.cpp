#include "neolab/steering.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "neolab/autograd.hpp"
#include "neolab/checksum.hpp"
#include "neolab/numeric.hpp"
#include "neolab/ops.hpp"

namespace neolab {

using nlohmann::json;

namespace {

double log_sigmoid_value(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

void check_logprob(double v, const char* name) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string("apo_up_loss: ") + name + " is not finite");
  if (v > 0.0) throw std::invalid_argument(std::string("apo_up_loss: ") + name + " is a positive log-probability");
}

void check_beta(double beta) {
  if (!std::isfinite(beta) || beta <= 0.0) throw std::invalid_argument("apo_up_loss: beta must be positive");
}

std::vector<double> tensor_values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

ApoTerms apo_up_loss(double lc, double lr, double lc0, double lr0, double beta) {
  check_logprob(lc, "lc");
  check_logprob(lr, "lr");
  check_logprob(lc0, "lc0");
  check_logprob(lr0, "lr0");
  check_beta(beta);
  ApoTerms out;
  out.t1 = -log_sigmoid_value(beta * ((lc - lr) - (lc0 - lr0)));
  out.t2 = -log_sigmoid_value(beta * (lc - lc0));
  out.loss = out.t1 + out.t2;
  return out;
}

ApoTensorTerms apo_up_loss(const Tensor& lc, const Tensor& lr, double lc0, double lr0, double beta) {
  check_logprob(lc.item(), "lc");
  check_logprob(lr.item(), "lr");
  check_logprob(lc0, "lc0");
  check_logprob(lr0, "lr0");
  check_beta(beta);
  ApoTensorTerms out;
  Tensor margin = ops::add_scalar(ops::sub(lc, lr), -(lc0 - lr0));
  out.t1 = ops::scale(ops::log_sigmoid(ops::scale(margin, beta)), -1.0);
  out.t2 = ops::scale(ops::log_sigmoid(ops::scale(ops::add_scalar(lc, -lc0), beta)), -1.0);
  out.loss = ops::add(out.t1, out.t2);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<EncodedPair> encode_pairs(const Vocabulary& vocab, std::span<const PreferenceExample> data,
                                      PromptField field) {
  std::vector<EncodedPair> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    EncodedPair p;
    p.prompt = tokenize(vocab, field == PromptField::kSuffixed ? ex.prompt : ex.base_prompt);
    p.chosen = tokenize(vocab, ex.chosen);
    p.chosen.push_back(vocab.eos());
    p.rejected = tokenize(vocab, ex.rejected);
    p.rejected.push_back(vocab.eos());
    out.push_back(std::move(p));
  }
  return out;
}

ReferenceCache ReferenceCache::build(const LanguageModel& reference, std::span<const EncodedPair> pairs,
                                     const ProjectionAdapter* adapter) {
  ReferenceCache cache;
  cache.chosen_.reserve(pairs.size());
  cache.rejected_.reserve(pairs.size());
  for (const auto& p : pairs) {
    cache.chosen_.push_back(sequence_logprob_value(reference, p.prompt, p.chosen, adapter));
    cache.rejected_.push_back(sequence_logprob_value(reference, p.prompt, p.rejected, adapter));
  }
  return cache;
}

std::string ReferenceCache::checksum() const {
  std::vector<double> all(chosen_);
  all.insert(all.end(), rejected_.begin(), rejected_.end());
  return sha256_hex(std::span<const double>(all));
}

bool ReferenceCache::verify(const LanguageModel& reference, std::span<const EncodedPair> pairs,
                            std::span<const std::size_t> indices, const ProjectionAdapter* adapter) const {
  for (auto i : indices) {
    const auto& p = pairs[i];
    const double c = sequence_logprob_value(reference, p.prompt, p.chosen, adapter);
    const double r = sequence_logprob_value(reference, p.prompt, p.rejected, adapter);
    if (std::memcmp(&c, &chosen_.at(i), sizeof c) != 0) return false;
    if (std::memcmp(&r, &rejected_.at(i), sizeof r) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

void LoraConfig::validate() const {
  if (rank == 0) throw std::invalid_argument("lora: rank must be positive");
  if (!(alpha > 0.0)) throw std::invalid_argument("lora: alpha must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("lora: dropout must be in [0, 1)");
  if (!(init_std > 0.0)) throw std::invalid_argument("lora: init_std must be positive");
}

LoraAdapterSet::LoraAdapterSet(const ModelDims& dims, LoraConfig cfg)
    : cfg_(cfg), dims_(dims), dropout_rng_(derive_seed(cfg.seed, 0xd20)) {
  cfg_.validate();
  dims_.validate();
  Rng rng(cfg_.seed);
  std::normal_distribution<double> normal(0.0, cfg_.init_std);
  auto gaussian = [&](std::size_t rows, std::size_t cols) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = normal(rng);
    return Tensor::from({rows, cols}, std::move(v));
  };
  for (std::size_t l = 0; l < dims_.n_layers; ++l) {
    query_a_.push_back(gaussian(dims_.d_model, cfg_.rank));
    query_b_.push_back(Tensor::zeros({cfg_.rank, dims_.query_out()}));
    value_a_.push_back(gaussian(dims_.d_model, cfg_.rank));
    value_b_.push_back(Tensor::zeros({cfg_.rank, dims_.value_out()}));
  }
}

Tensor LoraAdapterSet::delta(std::size_t layer, Projection which, const Tensor& x, bool training) const {
  if (layer >= query_a_.size()) throw std::out_of_range("lora: layer index out of range");
  const Tensor& a = which == Projection::kQuery ? query_a_[layer] : value_a_[layer];
  const Tensor& b = which == Projection::kQuery ? query_b_[layer] : value_b_[layer];
  Tensor in = training && cfg_.dropout > 0.0 ? ops::dropout(x, cfg_.dropout, dropout_rng_) : x;
  return ops::scale(ops::matmul(ops::matmul(in, a), b), cfg_.scale());
}

std::vector<NamedTensor> LoraAdapterSet::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < query_a_.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "query.a", query_a_[l]});
    out.push_back({p + "query.b", query_b_[l]});
    out.push_back({p + "value.a", value_a_[l]});
    out.push_back({p + "value.b", value_b_[l]});
  }
  return out;
}

std::size_t LoraAdapterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

LanguageModel LoraAdapterSet::merged_into(const LanguageModel& model) const {
  if (model.dims().n_layers != query_a_.size() || model.dims().d_model != dims_.d_model) {
    throw std::invalid_argument("lora: adapter dims do not match the model");
  }
  LanguageModel out = model.clone();
  NoGradScope no_grad;
  auto fold = [&](Tensor& w, const Tensor& a, const Tensor& b) {
    Tensor d = ops::matmul(a, b);
    auto dst = w.mutable_data();
    auto src = d.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += cfg_.scale() * src[i];
  };
  for (std::size_t l = 0; l < query_a_.size(); ++l) {
    fold(out.block(l).w_query, query_a_[l], query_b_[l]);
    fold(out.block(l).w_value, value_a_[l], value_b_[l]);
  }
  return out;
}

void LoraAdapterSet::save(const std::filesystem::path& path) const {
  json meta;
  meta["format"] = "neolab-lora-v1";
  meta["rank"] = cfg_.rank;
  meta["alpha"] = cfg_.alpha;
  meta["dropout"] = cfg_.dropout;
  meta["init_std"] = cfg_.init_std;
  meta["seed"] = cfg_.seed;
  meta["dims"] = {{"d_model", dims_.d_model},       {"n_layers", dims_.n_layers},
                  {"n_heads", dims_.n_heads},       {"n_kv_heads", dims_.n_kv_heads},
                  {"d_ff", dims_.d_ff},             {"context_length", dims_.context_length},
                  {"embed_scale", dims_.embed_scale}};
  std::filesystem::path blob = path;
  blob += ".bin";
  std::ofstream bin(blob, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("lora: cannot write " + blob.string());
  json factors = json::array();
  for (const auto& p : parameters()) {
    auto d = p.tensor.data();
    bin.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
    factors.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"sha256", sha256_hex(d)}});
  }
  bin.close();
  if (!bin) throw std::runtime_error("lora: write failed for " + blob.string());
  meta["factors"] = factors;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("lora: cannot write " + path.string());
  out << meta.dump(2) << "\n";
}

LoraAdapterSet LoraAdapterSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("lora: cannot read " + path.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("lora: bad metadata in " + path.string() + ": " + e.what());
  }
  if (meta.value("format", "") != "neolab-lora-v1") throw std::runtime_error("lora: unknown format in " + path.string());
  LoraConfig cfg;
  cfg.rank = meta.at("rank").get<std::size_t>();
  cfg.alpha = meta.at("alpha").get<double>();
  cfg.dropout = meta.at("dropout").get<double>();
  cfg.init_std = meta.at("init_std").get<double>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  const auto& d = meta.at("dims");
  ModelDims dims;
  dims.d_model = d.at("d_model");
  dims.n_layers = d.at("n_layers");
  dims.n_heads = d.at("n_heads");
  dims.n_kv_heads = d.at("n_kv_heads");
  dims.d_ff = d.at("d_ff");
  dims.context_length = d.at("context_length");
  dims.embed_scale = d.at("embed_scale");
  LoraAdapterSet set(dims, cfg);

  std::filesystem::path blob = path;
  blob += ".bin";
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw std::runtime_error("lora: cannot read " + blob.string());
  auto params = set.parameters();
  const auto& factors = meta.at("factors");
  if (factors.size() != params.size()) throw std::runtime_error("lora: factor count mismatch in " + path.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (factors[i].at("name").get<std::string>() != params[i].name ||
        factors[i].at("shape").get<Shape>() != params[i].tensor.shape()) {
      throw std::runtime_error("lora: factor layout mismatch at " + params[i].name);
    }
    auto dst = params[i].tensor.mutable_data();
    bin.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("lora: truncated blob " + blob.string());
    if (sha256_hex(std::span<const double>(dst.data(), dst.size())) != factors[i].at("sha256").get<std::string>()) {
      throw std::runtime_error("lora: checksum mismatch for " + params[i].name);
    }
  }
  if (bin.peek() != std::char_traits<char>::eof()) throw std::runtime_error("lora: trailing bytes in " + blob.string());
  return set;
}

// ---------------------------------------------------------------------------

std::size_t neologism_parameter_count(const ModelDims& dims) { return dims.d_model; }

std::size_t lora_parameter_count(const ModelDims& dims, std::size_t rank) {
  return dims.n_layers * rank * ((dims.d_model + dims.query_out()) + (dims.d_model + dims.value_out()));
}

FreezeAudit::FreezeAudit(const LanguageModel& model) {
  for (const auto& p : model.parameters()) snapshot_.push_back({p.name, p.tensor.clone()});
}

std::vector<std::string> FreezeAudit::changed(const LanguageModel& model) const {
  std::vector<std::string> out;
  auto current = model.parameters();
  for (const auto& snap : snapshot_) {
    auto it = std::find_if(current.begin(), current.end(), [&](const NamedTensor& p) { return p.name == snap.name; });
    if (it == current.end() || !bit_equal(it->tensor, snap.tensor)) out.push_back(snap.name);
  }
  return out;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (epochs == 0) throw std::invalid_argument("train: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (accumulation == 0) throw std::invalid_argument("train: accumulation must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("train: clip_norm must be positive");
  if (!(beta > 0.0)) throw std::invalid_argument("train: beta must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be non-negative");
}

double TrainReport::minutes_per_epoch() const {
  if (epoch_seconds.empty()) return 0.0;
  return std::accumulate(epoch_seconds.begin(), epoch_seconds.end(), 0.0) /
         static_cast<double>(epoch_seconds.size()) / 60.0;
}

StepRecord accumulate_and_step(const LanguageModel& model, const TrainTarget& target,
                               std::span<const EncodedPair> pairs, const ReferenceCache& refs,
                               std::span<const std::vector<std::size_t>> micro_batches, std::size_t k,
                               AdamW& opt, const TrainConfig& cfg) {
  if (micro_batches.size() != k) {
    throw std::invalid_argument("accumulate_and_step: expected " + std::to_string(k) + " micro-batches, got " +
                                std::to_string(micro_batches.size()));
  }
  std::size_t total = 0;
  for (const auto& mb : micro_batches) {
    if (mb.empty()) throw std::invalid_argument("accumulate_and_step: empty micro-batch");
    total += mb.size();
  }
  const double w = 1.0 / static_cast<double>(total);

  StepRecord rec;
  try {
    for (const auto& mb : micro_batches) {
      Tape tape;
      TapeScope scope(tape);
      Tensor batch_loss;
      for (auto i : mb) {
        const auto& p = pairs[i];
        const PrefixState* prefix = target.prefixes.empty() ? nullptr : &target.prefixes.at(i);
        Tensor lc = sequence_logprob(model, p.prompt, p.chosen, target.forward, prefix);
        Tensor lr = sequence_logprob(model, p.prompt, p.rejected, target.forward, prefix);
        ApoTensorTerms terms = apo_up_loss(lc, lr, refs.chosen(i), refs.rejected(i), cfg.beta);
        rec.t1 += w * terms.t1.item();
        rec.t2 += w * terms.t2.item();
        Tensor scaled = ops::scale(terms.loss, w);
        batch_loss = batch_loss.defined() ? ops::add(batch_loss, scaled) : scaled;
      }
      tape.backward(batch_loss);
    }
  } catch (const TensorError& e) {
    throw TrainingDiverged(std::string("preference training diverged: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw TrainingDiverged(std::string("preference training diverged: ") + e.what());
  }
  rec.loss = rec.t1 + rec.t2;
  if (!std::isfinite(rec.loss)) throw TrainingDiverged("preference loss is not finite");

  std::vector<Tensor> params = target.params;
  rec.grad_norm = global_norm(params);
  if (!std::isfinite(rec.grad_norm)) throw TrainingDiverged("gradient norm is not finite");
  clip_global_norm(params, cfg.clip_norm);
  opt.step();
  opt.zero_grad();
  for (const auto& p : params) {
    for (double v : p.data()) {
      if (!std::isfinite(v)) throw TrainingDiverged("parameter became non-finite");
    }
  }
  return rec;
}

TrainReport train_preference(const LanguageModel& model, const TrainTarget& target,
                             std::span<const EncodedPair> pairs, const ReferenceCache& refs,
                             const TrainConfig& cfg, const StepCallback& on_step, std::size_t max_steps) {
  cfg.validate();
  if (pairs.empty()) throw DataError("train: no training pairs");
  if (refs.size() != pairs.size()) throw std::invalid_argument("train: reference cache does not match the pairs");
  if (target.params.empty()) throw std::invalid_argument("train: nothing to train");

  for (auto p : target.params) p.set_requires_grad(true);
  AdamW opt(target.params, AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  TrainReport report;
  for (const auto& p : target.params) report.trainable_parameters += p.numel();

  std::vector<std::size_t> order(pairs.size());
  std::size_t step = 0;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t per_step = cfg.effective_batch();
    for (std::size_t begin = 0; begin < order.size(); begin += per_step) {
      const std::size_t end = std::min(order.size(), begin + per_step);
      std::vector<std::vector<std::size_t>> micro;
      for (std::size_t b = begin; b < end; b += cfg.batch_size) {
        micro.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(end, b + cfg.batch_size)));
      }
      // A trailing partial group is averaged over its own size.
      StepRecord rec = accumulate_and_step(model, target, pairs, refs, micro, micro.size(), opt, cfg);
      rec.step = ++step;
      rec.epoch = epoch + 1;
      report.trace.push_back(rec);
      if (on_step) on_step(rec);
      if (max_steps > 0 && step >= max_steps) {
        stop = true;
        break;
      }
    }
    report.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }

  for (auto p : target.params) {
    p.set_requires_grad(false);
    p.clear_grad();
  }
  return report;
}

// ---------------------------------------------------------------------------

void NeologismArtifact::save(const std::filesystem::path& path) const {
  json j;
  j["format"] = "neolab-neologism-v1";
  j["concept"] = concept_name;
  j["surface"] = surface;
  j["init_from"] = init_from;
  j["embedding"] = embedding;
  j["sha256"] = sha256_hex(std::span<const double>(embedding));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("neologism: cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("neologism: write failed for " + path.string());
}

NeologismArtifact NeologismArtifact::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("neologism: cannot read " + path.string());
  NeologismArtifact a;
  try {
    json j = json::parse(in);
    if (j.value("format", "") != "neolab-neologism-v1") {
      throw std::runtime_error("neologism: unknown format in " + path.string());
    }
    a.concept_name = j.at("concept").get<std::string>();
    a.surface = j.at("surface").get<std::string>();
    a.init_from = j.at("init_from").get<std::string>();
    a.embedding = j.at("embedding").get<std::vector<double>>();
    if (sha256_hex(std::span<const double>(a.embedding)) != j.at("sha256").get<std::string>()) {
      throw std::runtime_error("neologism: checksum mismatch in " + path.string());
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("neologism: bad artifact " + path.string() + ": " + e.what());
  }
  return a;
}

NeologismArtifact train_neologism(LanguageModel& model, std::span<const EncodedPair> pairs,
                                  const ReferenceCache& refs, const ConceptSpec& spec, const TrainConfig& cfg,
                                  TrainReport* report, const StepCallback& on_step, std::size_t max_steps) {
  const std::string surface = spec.surface();
  auto id = model.vocab().find(surface);
  if (!id || !model.vocab().is_neologism(*id)) {
    throw std::invalid_argument("train_neologism: " + surface + " is not an extension token of the model");
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (std::find(pairs[i].prompt.begin(), pairs[i].prompt.end(), *id) == pairs[i].prompt.end()) {
      throw DataError("train_neologism: prompt " + std::to_string(i) + " does not contain " + surface);
    }
  }
  for (auto& p : model.parameters()) p.tensor.set_requires_grad(false);

  TrainTarget target;
  target.params.push_back(model.extension_embedding(*id));
  const auto prefix_start = std::chrono::steady_clock::now();
  for (const auto& p : pairs) {
    std::vector<TokenId> head{model.vocab().bos()};
    head.insert(head.end(), p.prompt.begin(), std::find(p.prompt.begin(), p.prompt.end(), *id));
    target.prefixes.push_back(model.prefix_state(head));
  }
  const double prefix_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - prefix_start).count();
  TrainConfig c = cfg;
  c.weight_decay = 0.0;
  TrainReport r = train_preference(model, target, pairs, refs, c, on_step, max_steps);
  if (!r.epoch_seconds.empty()) r.epoch_seconds.front() += prefix_seconds;

  NeologismArtifact art;
  art.concept_name = spec.name;
  art.surface = surface;
  art.init_from = spec.init_from;
  art.embedding = tensor_values(model.extension_embedding(*id));
  if (report) *report = std::move(r);
  return art;
}

LoraAdapterSet train_lora(const LanguageModel& model, std::span<const EncodedPair> pairs,
                          const ReferenceCache& refs, const LoraConfig& lora_cfg, const TrainConfig& cfg,
                          TrainReport* report, const StepCallback& on_step, std::size_t max_steps) {
  for (auto& p : model.parameters()) p.tensor.set_requires_grad(false);
  LoraAdapterSet adapters(model.dims(), lora_cfg);
  TrainTarget target;
  for (auto& p : adapters.parameters()) target.params.push_back(p.tensor);
  target.forward = ForwardOptions{&adapters, true};
  TrainReport r = train_preference(model, target, pairs, refs, cfg, on_step, max_steps);
  if (report) *report = std::move(r);
  return adapters;
}

TokenId install_neologism(LanguageModel& model, const NeologismArtifact& artifact) {
  if (artifact.embedding.size() != model.dims().d_model) {
    throw std::invalid_argument("install_neologism: embedding width " + std::to_string(artifact.embedding.size()) +
                                " does not match d_model " + std::to_string(model.dims().d_model));
  }
  auto found = model.vocab().find(artifact.surface);
  TokenId id = found ? *found : model.extend_vocabulary(artifact.surface, artifact.init_from);
  if (!model.vocab().is_neologism(id)) {
    throw std::invalid_argument("install_neologism: " + artifact.surface + " is a base token");
  }
  auto dst = model.extension_embedding(id).mutable_data();
  std::copy(artifact.embedding.begin(), artifact.embedding.end(), dst.begin());
  return id;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const StepRecord> trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,epoch,t1,t2,loss,grad_norm\n";
  out.precision(10);
  for (const auto& r : trace) {
    out << r.step << ',' << r.epoch << ',' << r.t1 << ',' << r.t2 << ',' << r.loss << ',' << r.grad_norm << '\n';
  }
}

}  // namespace neolab
