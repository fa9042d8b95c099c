// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   neolab_acceptance [--work-dir DIR] [--only N[,N...]]
//
// Criteria 8-10 share one full pipeline run in DIR (default: a temp dir).

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "neolab/checkpoint.hpp"
#include "neolab/checksum.hpp"
#include "neolab/numeric.hpp"
#include "neolab/ops.hpp"
#include "neolab/pipeline.hpp"
#include "neolab/selfverb.hpp"
#include "test_util.hpp"

using namespace neolab;
using namespace neolab::testing;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
           return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
         });
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingArtifact(p.string());
  return json::parse(in);
}

// ---------------------------------------------------------------------------
// 1. Finite differences.

struct GradCase {
  std::string name;
  Shape shape;
  std::function<Tensor(const Tensor&)> f;
  double lo = -1.0, hi = 1.0;
};

std::vector<GradCase> op_cases() {
  Tensor b = random_tensor({4, 3}, 100);
  Tensor bt = random_tensor({5, 4}, 101);
  Tensor same = random_tensor({3, 4}, 102);
  Tensor row = random_tensor({4}, 103);
  Tensor gain = random_tensor({4}, 104, 0.5, 1.5);
  Tensor bias = random_tensor({4}, 105);
  Tensor other_cols = random_tensor({3, 2}, 107);
  auto weighted = [](Tensor y) { return ops::sum(ops::mul(y, random_tensor(y.shape(), 999))); };
  static const std::vector<std::int32_t> ids{2, 0, 2, 1};
  static const std::vector<std::int32_t> picks{3, 0, 1};
  return {
      {"matmul_lhs", {3, 4}, [=](const Tensor& x) { return weighted(ops::matmul(x, b)); }},
      {"matmul_rhs", {4, 3}, [=](const Tensor& x) { return weighted(ops::matmul(same, x)); }},
      {"matmul_nt_lhs", {3, 4}, [=](const Tensor& x) { return weighted(ops::matmul_nt(x, bt)); }},
      {"matmul_nt_rhs", {5, 4}, [=](const Tensor& x) { return weighted(ops::matmul_nt(same, x)); }},
      {"transpose", {3, 4}, [=](const Tensor& x) { return weighted(ops::transpose(x)); }},
      {"add", {3, 4}, [=](const Tensor& x) { return weighted(ops::add(x, ops::mul(x, same))); }},
      {"sub", {3, 4}, [=](const Tensor& x) { return weighted(ops::sub(same, ops::mul(x, x))); }},
      {"mul", {3, 4}, [=](const Tensor& x) { return weighted(ops::mul(x, same)); }},
      {"scale", {3, 4}, [=](const Tensor& x) { return weighted(ops::scale(x, -2.5)); }},
      {"add_scalar", {3, 4}, [=](const Tensor& x) { return weighted(ops::mul(ops::add_scalar(x, 0.3), x)); }},
      {"add_row", {3, 4}, [=](const Tensor& x) { return weighted(ops::mul(ops::add_row(x, row), x)); }},
      {"add_row_bias", {4}, [=](const Tensor& x) { return weighted(ops::mul(ops::add_row(same, x), same)); }},
      {"softmax_rows", {3, 4}, [=](const Tensor& x) { return weighted(ops::softmax_rows(ops::scale(x, 3.0))); }},
      {"log_softmax_rows", {3, 4},
       [=](const Tensor& x) { return weighted(ops::log_softmax_rows(ops::scale(x, 3.0))); }},
      {"log", {3, 4}, [=](const Tensor& x) { return weighted(ops::log(x)); }, 0.5, 2.0},
      {"exp", {3, 4}, [=](const Tensor& x) { return weighted(ops::exp(x)); }},
      {"sigmoid", {3, 4}, [=](const Tensor& x) { return weighted(ops::sigmoid(ops::scale(x, 4.0))); }},
      {"log_sigmoid", {3, 4}, [=](const Tensor& x) { return weighted(ops::log_sigmoid(ops::scale(x, 4.0))); }},
      {"gelu", {3, 4}, [=](const Tensor& x) { return weighted(ops::gelu(ops::scale(x, 3.0))); }},
      {"relu", {3, 4}, [=](const Tensor& x) { return weighted(ops::relu(x)); }, 0.1, 1.0},
      {"layer_norm_x", {3, 4}, [=](const Tensor& x) { return weighted(ops::layer_norm(x, gain, bias)); }},
      {"layer_norm_gain", {4}, [=](const Tensor& x) { return weighted(ops::layer_norm(same, x, bias)); }},
      {"layer_norm_bias", {4}, [=](const Tensor& x) { return weighted(ops::layer_norm(same, gain, x)); }},
      {"gather_rows", {3, 4}, [=](const Tensor& x) { return weighted(ops::gather_rows(x, ids)); }},
      {"pick", {3, 4}, [=](const Tensor& x) { return weighted(ops::pick(ops::mul(x, x), picks)); }},
      {"sum", {3, 4}, [=](const Tensor& x) { return ops::sum(ops::mul(x, x)); }},
      {"mean", {3, 4}, [=](const Tensor& x) { return ops::mean(ops::mul(x, same)); }},
      {"concat_rows", {2, 4}, [=](const Tensor& x) { return weighted(ops::concat_rows({same, ops::mul(x, x), x})); }},
      {"concat_cols", {3, 2},
       [=](const Tensor& x) { return weighted(ops::concat_cols({x, same, ops::mul(x, other_cols)})); }},
      {"slice_rows", {3, 4}, [=](const Tensor& x) { return weighted(ops::slice_rows(ops::mul(x, x), 1, 3)); }},
      {"reshape", {3, 4}, [=](const Tensor& x) { return weighted(ops::reshape(x, {2, 6})); }},
      {"causal_attention_q", {5, 4},
       [=](const Tensor& x) { return weighted(ops::causal_attention(ops::scale(x, 2.0), bt, ops::mul(bt, bt), 2)); }},
      {"causal_attention_k", {5, 4},
       [=](const Tensor& x) { return weighted(ops::causal_attention(bt, ops::scale(x, 2.0), ops::mul(bt, bt), 2)); }},
      {"causal_attention_v", {5, 4},
       [=](const Tensor& x) { return weighted(ops::causal_attention(bt, ops::mul(bt, bt), x, 2)); }},
      {"causal_attention_suffix_q", {2, 4},
       [=](const Tensor& x) { return weighted(ops::causal_attention(ops::scale(x, 2.0), bt, ops::mul(bt, bt), 2)); }},
      {"causal_attention_suffix_kv", {5, 4},
       [=](const Tensor& x) {
         return weighted(ops::causal_attention(ops::slice_rows(bt, 2, 5), ops::scale(x, 2.0), ops::mul(x, x), 2));
       }},
      {"dropout", {3, 4},
       [=](const Tensor& x) {
         std::mt19937_64 rng(17);  // same mask on every evaluation
         return weighted(ops::dropout(ops::mul(x, same), 0.3, rng));
       }},
  };
}

// The APO-up loss of one preference pair, differentiated end to end through
// the transformer with respect to one parameter tensor.
std::vector<GradCase> apo_cases() {
  struct Setup {
    LanguageModel model{small_vocab(), tiny_dims(), 31};
    TokenId neo = 0;
    std::vector<TokenId> prompt, chosen, rejected;
    double lc0 = 0.0, lr0 = 0.0;
  };
  auto s = std::make_shared<Setup>();
  s->neo = s->model.extend_vocabulary("~short", "short");
  const auto& v = s->model.vocab();
  s->prompt = tokenize(v, "what is the sun give me a ~short answer");
  s->chosen = tokenize(v, "hot");
  s->chosen.push_back(v.eos());
  s->rejected = tokenize(v, "the sun is hot and bright");
  s->rejected.push_back(v.eos());
  // Reference taken at a different embedding so t1 and t2 are off their anchor.
  LanguageModel ref = s->model.clone();
  auto e = ref.extension_embedding(s->neo).mutable_data();
  for (std::size_t i = 0; i < e.size(); ++i) e[i] += 0.1 * std::sin(static_cast<double>(i));
  s->lc0 = sequence_logprob_value(ref, s->prompt, s->chosen);
  s->lr0 = sequence_logprob_value(ref, s->prompt, s->rejected);

  auto loss = [s]() {
    Tensor lc = sequence_logprob(s->model, s->prompt, s->chosen);
    Tensor lr = sequence_logprob(s->model, s->prompt, s->rejected);
    return apo_up_loss(lc, lr, s->lc0, s->lr0, 0.2).loss;
  };
  const ModelDims d = s->model.dims();
  const Tensor emb0 = s->model.extension_embedding(s->neo);
  const Tensor wq0 = s->model.block(0).w_query;
  const Tensor wv0 = s->model.block(1).w_value;
  auto restore = [s, emb0, wq0, wv0]() {
    s->model.extension_embedding(s->neo) = emb0;
    s->model.block(0).w_query = wq0;
    s->model.block(1).w_value = wv0;
  };
  return {
      {"apo_up/neologism_embedding", {1, d.d_model},
       [=](const Tensor& x) {
         restore();
         s->model.extension_embedding(s->neo) = x;
         return loss();
       }},
      {"apo_up/layer0_w_query", {d.d_model, d.d_model},
       [=](const Tensor& x) {
         restore();
         s->model.block(0).w_query = x;
         return loss();
       }},
      {"apo_up/layer1_w_value", {d.d_model, d.d_model},
       [=](const Tensor& x) {
         restore();
         s->model.block(1).w_value = x;
         return loss();
       }},
  };
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  std::uint64_t seed = 500;
  auto run = [&](const GradCase& c, const Tensor& x) {
    const double err = finite_difference_check(c.f, x).max_rel_error;
    ++checked;
    if (!(err <= worst)) {
      worst = err;
      worst_name = c.name;
    }
  };
  for (const auto& c : op_cases()) {
    for (int trial = 0; trial < 3; ++trial) run(c, random_tensor(c.shape, seed++, c.lo, c.hi));
  }
  // Scalar APO-up with respect to each log-prob, across the sigmoid range.
  for (double lc : {-3.0, -9.0, -25.0}) {
    run({"apo_up/lc", {1}, [lc](const Tensor& x) { return apo_up_loss(x, Tensor::scalar(lc - 4.0), -7.0, -5.0).loss; }},
        Tensor::from({1}, {lc}));
    run({"apo_up/lr", {1}, [lc](const Tensor& x) { return apo_up_loss(Tensor::scalar(lc), x, -7.0, -5.0).loss; }},
        Tensor::from({1}, {lc - 6.0}));
  }
  LanguageModel probe(small_vocab(), tiny_dims(), 31);
  probe.extend_vocabulary("~short", "short");
  auto cases = apo_cases();
  run(cases[0], probe.extension_embedding(probe.vocab().size() - 1));
  run(cases[1], probe.block(0).w_query);
  run(cases[2], probe.block(1).w_value);
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0,
          std::to_string(checked) + " checks, max rel error " + num(worst, 3) + " (" + worst_name + "), " +
              num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. APO-up anchor and worked example.

double oracle_softplus_neg(double z) { return std::log1p(std::exp(-z)); }

Outcome criterion_apo_anchor() {
  double anchor_err = 0.0;
  for (double lc : {-0.5, -7.25, -42.0, -300.0}) {
    for (double lr : {-1.0, -13.5, -120.0}) {
      ApoTerms t = apo_up_loss(lc, lr, lc, lr, 0.2);
      anchor_err = std::max({anchor_err, std::abs(t.t1 - std::log(2.0)), std::abs(t.t2 - std::log(2.0))});
      ApoTensorTerms tt = apo_up_loss(Tensor::scalar(lc), Tensor::scalar(lr), lc, lr, 0.2);
      anchor_err = std::max({anchor_err, std::abs(tt.t1.item() - std::log(2.0)),
                             std::abs(tt.t2.item() - std::log(2.0))});
    }
  }
  const double beta = 0.2;
  const double oracle =
      oracle_softplus_neg(beta * ((-10.0 - -20.0) - (-12.0 - -18.0))) + oracle_softplus_neg(beta * (-10.0 - -12.0));
  const double got = apo_up_loss(-10.0, -20.0, -12.0, -18.0, beta).loss;
  const double got_t = apo_up_loss(Tensor::scalar(-10.0), Tensor::scalar(-20.0), -12.0, -18.0, beta).loss.item();
  const bool ok = anchor_err <= 1e-12 && std::abs(oracle - 0.8841) < 1e-4 && std::abs(got - oracle) < 1e-4 &&
                  std::abs(got_t - oracle) < 1e-4;
  return {ok, "anchor max |t - ln2| " + num(anchor_err, 3) + ", worked example " + num(got, 8) + " (oracle " +
                  num(oracle, 8) + ")"};
}

// ---------------------------------------------------------------------------
// 3-5. Freeze, extension preservation, accumulation.

struct RealSetup {
  ConceptSpec spec;
  PreferenceDataset data;
};

RealSetup short_setup(std::size_t n_train) {
  RealSetup s;
  s.spec = find_concept(default_concepts(), "short");
  s.data = build_dataset(s.spec, n_train, 10, 11);
  return s;
}

Outcome criterion_freeze() {
  RealSetup s = short_setup(200);
  LanguageModel model(base_vocabulary(), ModelDims{}, 5);
  model.extend_vocabulary(s.spec.surface(), s.spec.init_from);
  TrainConfig cfg;
  cfg.epochs = 100;  // bounded by max_steps
  auto pairs = encode_pairs(model.vocab(), s.data.train, PromptField::kSuffixed);
  ReferenceCache refs = ReferenceCache::build(model, pairs);
  FreezeAudit audit(model);
  TrainReport neo_report;
  train_neologism(model, pairs, refs, s.spec, cfg, &neo_report, {}, 100);
  const auto neo_changed = audit.changed(model);

  LanguageModel base(base_vocabulary(), ModelDims{}, 5);
  auto base_pairs = encode_pairs(base.vocab(), s.data.train, PromptField::kBase);
  ReferenceCache base_refs = ReferenceCache::build(base, base_pairs);
  FreezeAudit base_audit(base);
  TrainReport lora_report;
  LoraConfig lcfg;
  lcfg.seed = 3;
  LoraAdapterSet set = train_lora(base, base_pairs, base_refs, lcfg, cfg, &lora_report, {}, 100);
  const auto lora_changed = base_audit.changed(base);
  // The adapters did move, so the unchanged base is not vacuous.
  double b_norm = 0.0;
  for (const auto& p : set.parameters()) {
    for (double x : p.tensor.data()) b_norm += x * x;
  }

  const bool ok = neo_report.trace.size() == 100 && lora_report.trace.size() == 100 &&
                  neo_changed == std::vector<std::string>{"extension." + s.spec.surface()} && lora_changed.empty();
  std::string changed;
  for (const auto& n : neo_changed) changed += (changed.empty() ? "" : ",") + n;
  return {ok, "neologism steps " + std::to_string(neo_report.trace.size()) + " changed {" + changed +
                  "}; lora steps " + std::to_string(lora_report.trace.size()) + " base changed " +
                  std::to_string(lora_changed.size()) + " tensors, adapter norm " + num(std::sqrt(b_norm), 4)};
}

Outcome criterion_extension() {
  LanguageModel base(base_vocabulary(), ModelDims{}, 8);
  LanguageModel extended = base.clone();
  extended.extend_vocabulary("~short", "short");
  extended.extend_vocabulary("~simple", "simple");
  LoraAdapterSet zero(base.dims(), LoraConfig{});
  const std::size_t v = base.vocab().size();
  std::mt19937_64 rng(99);
  std::size_t ext_bad = 0, lora_bad = 0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const std::size_t len = 1 + rng() % base.dims().context_length;
    auto ids = random_ids(len, v, rng());
    Tensor a = base.forward(ids);
    Tensor b = extended.forward(ids);
    const std::size_t vb = b.shape()[1];
    for (std::size_t t = 0; t < len; ++t) {
      if (!bit_equal(a.data().subspan(t * v, v), b.data().subspan(t * vb, v))) {
        ++ext_bad;
        break;
      }
    }
    Tensor c = base.forward(ids, ForwardOptions{&zero, false});
    if (!bit_equal(a.data(), c.data())) ++lora_bad;
  }
  return {ext_bad == 0 && lora_bad == 0, "100 contexts: extension mismatches " + std::to_string(ext_bad) +
                                             ", zero-init LoRA mismatches " + std::to_string(lora_bad)};
}

Outcome criterion_accumulation() {
  RealSetup s = short_setup(30);
  auto run = [&](std::size_t batch, std::size_t acc) {
    LanguageModel model(base_vocabulary(), ModelDims{}, 12);
    model.extend_vocabulary(s.spec.surface(), s.spec.init_from);
    auto pairs = encode_pairs(model.vocab(), s.data.train, PromptField::kSuffixed);
    ReferenceCache refs = ReferenceCache::build(model, pairs);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = batch;
    cfg.accumulation = acc;
    const std::vector<double> init = [&] {
      const auto d = model.extension_embedding(model.vocab().size() - 1).data();
      return std::vector<double>(d.begin(), d.end());
    }();
    TrainReport report;
    NeologismArtifact art = train_neologism(model, pairs, refs, s.spec, cfg, &report);
    std::vector<double> delta(init.size());
    for (std::size_t i = 0; i < init.size(); ++i) delta[i] = art.embedding[i] - init[i];
    return std::make_pair(delta, report.trace.size());
  };
  auto [acc, acc_steps] = run(1, 10);
  auto [big, big_steps] = run(10, 1);
  double num_sq = 0.0, den_sq = 0.0, elem = 0.0;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    num_sq += (acc[i] - big[i]) * (acc[i] - big[i]);
    den_sq += big[i] * big[i];
    elem = std::max(elem, std::abs(acc[i] - big[i]) / std::max(std::abs(big[i]), 1e-300));
  }
  const double rel = std::sqrt(num_sq / den_sq);
  return {acc_steps == 3 && big_steps == 3 && den_sq > 0.0 && rel < 1e-10 && elem < 1e-10,
          "3 updates of 10 examples: relative update difference " + num(rel, 3) + " (max per element " +
              num(elem, 3) + ")"};
}

// ---------------------------------------------------------------------------
// 6-7. Accounting and gap goldens.

Outcome criterion_accounting(const fs::path& source_dir) {
  RunConfig cfg = load_run_config(source_dir / "configs" / "mistral7b.json");
  const auto neo = neologism_parameter_count(cfg.model);
  const auto per_rank = lora_parameter_count(cfg.model, 1);
  const auto r8 = lora_parameter_count(cfg.model, cfg.lora.rank);
  return {neo == 4096 && per_rank == 425984 && cfg.lora.rank == 8 && r8 == 3407872,
          "neologism " + std::to_string(neo) + ", lora per rank " + std::to_string(per_rank) + ", lora r=" +
              std::to_string(cfg.lora.rank) + " " + std::to_string(r8)};
}

Outcome criterion_gap_goldens() {
  struct Golden {
    double base, train, x, expected;
  };
  const Golden goldens[] = {{303.1, 41.2, 53.0, 95.5}, {303.1, 41.2, 346.3, -16.5}, {3.0, 7.5, 6.1, 69.2}};
  bool ok = true;
  std::string detail;
  for (const auto& g : goldens) {
    const double got = gap_closure(g.x, g.base, g.train);
    ok = ok && std::abs(got - g.expected) <= 1.0;
    detail += num(got, 4) + " vs " + num(g.expected, 4) + "; ";
  }
  const bool ends = gap_closure(303.1, 303.1, 41.2) == 0.0 && gap_closure(41.2, 303.1, 41.2) == 100.0 &&
                    gap_closure(3.0, 3.0, 7.5) == 0.0 && gap_closure(7.5, 3.0, 7.5) == 100.0;
  return {ok && ends, detail + "endpoints " + (ends ? "exact" : "inexact")};
}

// ---------------------------------------------------------------------------
// 8-10. Full pipeline on the default config.

struct PipelineRun {
  RunConfig cfg;
  double seconds = 0.0;
  std::string error;
};

PipelineRun run_default_pipeline(const fs::path& source_dir, const fs::path& work_dir) {
  PipelineRun r;
  r.cfg = load_run_config(source_dir / "configs" / "default.json");
  r.cfg.run_concepts = {"short"};
  r.cfg.work_dir = work_dir;
  fs::remove_all(work_dir);
  StageOptions opts;
  opts.log = &std::cerr;
  const auto t0 = Clock::now();
  try {
    run_pipeline(r.cfg, opts);
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.seconds = seconds_since(t0);
  return r;
}

Outcome criterion_end_to_end(const PipelineRun& run) {
  if (!run.error.empty()) return {false, "pipeline failed: " + run.error};
  json res = read_json(Workspace{run.cfg.work_dir}.eval_dir("short") / "results.json");
  const json* base = nullptr;
  const json* neo = nullptr;
  for (const auto& m : res["modes"]) {
    const std::string name = m["mode"].get<std::string>();
    if (name == "baseline") base = &m;
    if (name == "neologism:short") neo = &m;
  }
  if (!base || !neo || (*neo)["gap_closure_mean"].is_null()) return {false, "results.json lacks baseline/neologism"};
  const double gap = (*neo)["gap_closure_mean"].get<double>();
  const double cap_base = (*base)["capability"]["median"].get<double>();
  const double cap_neo = (*neo)["capability"]["median"].get<double>();
  const bool ok = gap >= 50.0 && cap_neo >= cap_base - 1.0 && run.seconds < 1800.0;
  return {ok, "gap closure " + num(gap, 4) + "% (adherence " + num((*base)["adherence"]["mean"].get<double>(), 4) +
                  " -> " + num((*neo)["adherence"]["mean"].get<double>(), 4) + ", training data " +
                  num(res["training_data"]["mean"].get<double>(), 4) + "), capability median " + num(cap_base, 3) +
                  " -> " + num(cap_neo, 3) + ", wall clock " + num(run.seconds / 60.0, 3) + " min"};
}

Outcome criterion_matched(const PipelineRun& run) {
  if (!run.error.empty()) return {false, "pipeline failed: " + run.error};
  Workspace ws{run.cfg.work_dir};
  json neo = read_json(ws.manifest("train-neologism", "short"));
  json lora = read_json(ws.manifest("train-lora", "short"));
  const std::string data_sha = sha256_file(ws.train_data("short"));
  const bool ok = neo["inputs"]["dataset"]["sha256"] == data_sha && lora["inputs"]["dataset"]["sha256"] == data_sha &&
                  neo["train"] == lora["train"] && neo["train_hash"] == lora["train_hash"] &&
                  neo["config_hash"] == lora["config_hash"];
  return {ok, "dataset " + data_sha.substr(0, 12) + ", train_hash " + neo["train_hash"].get<std::string>().substr(0, 12) +
                  " / " + lora["train_hash"].get<std::string>().substr(0, 12)};
}

Outcome criterion_selfverb(const PipelineRun& run) {
  if (!run.error.empty()) return {false, "pipeline failed: " + run.error};
  Workspace ws{run.cfg.work_dir};
  LanguageModel model = load_checkpoint(ws.base_checkpoint().string());
  NeologismArtifact art = NeologismArtifact::load(ws.neologism("short"));
  install_neologism(model, art);
  GenerationConfig gen = run.cfg.generation;
  gen.seed = 2024;
  auto transcripts = run_questionnaire(model, art.surface, gen);
  std::size_t prefixed = 0;
  for (const auto& t : transcripts) {
    if (t.ok && !t.prefix.empty() && t.response.rfind(t.prefix, 0) == 0) ++prefixed;
  }

  // Plant a coinage next to lexicon words and the neologism itself.
  const std::string coinage = "briefnessly";
  Transcript planted;
  planted.index = transcripts.size();
  planted.response = "It is " + art.surface + " and brief and " + coinage + " short . 7";
  transcripts.push_back(planted);

  const Vocabulary& vocab = model.vocab();
  // Whole alphabetic words of the base vocabulary, lowercased.
  auto lower = [](std::string w) {
    for (char& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return w;
  };
  std::set<std::string> lexicon;
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    const std::string& w = vocab.token(static_cast<TokenId>(id));
    if (!w.empty() && std::all_of(w.begin(), w.end(), [](unsigned char ch) { return std::isalpha(ch); })) {
      lexicon.insert(lower(w));
    }
  }
  std::size_t false_flags = 0;
  bool coinage_ok = false;
  std::size_t coinage_pieces = 0;
  std::size_t lexicon_seen = 0, neologism_seen = 0;
  for (const auto& f : detect_novel_words(transcripts, vocab)) {
    if (lexicon.count(lower(f.surface)) || f.surface == art.surface) ++false_flags;
    if (f.surface == coinage) {
      coinage_pieces = f.subtokens.size();
      std::string joined;
      for (const auto& piece : f.subtokens) joined += piece.rfind("##", 0) == 0 ? piece.substr(2) : piece;
      coinage_ok = coinage_pieces >= 2 && joined == coinage;
    }
  }
  for (const auto& f : classify_words(transcripts, vocab)) {
    if (f.surface == art.surface) {
      ++neologism_seen;
      if (f.classification != WordClass::kNeologism) ++false_flags;
    } else if (lexicon.count(lower(f.surface))) {
      ++lexicon_seen;
      if (f.classification != WordClass::kLexicon) ++false_flags;
    }
  }
  const bool ok = transcripts.size() == 13 && prefixed == 12 && false_flags == 0 && coinage_ok;
  return {ok, std::to_string(prefixed) + "/12 prefix-forced transcripts, " + std::to_string(false_flags) +
                  " false flags over " + std::to_string(lexicon_seen) + " lexicon and " +
                  std::to_string(neologism_seen) + " neologism occurrences, planted \"" + coinage + "\" -> " + std::to_string(coinage_pieces) + " subtokens"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neolab acceptance criteria"};
  std::string work_dir = (fs::temp_directory_path() / "neolab_acceptance_run").string();
  std::vector<int> only;
  bool keep = false;
  app.add_option("--work-dir", work_dir, "Work directory for the full pipeline run");
  app.add_option("--only", only, "Run just these criteria")->delimiter(',');
  app.add_flag("--keep", keep, "Keep the pipeline work directory");
  CLI11_PARSE(app, argc, argv);
  const fs::path source_dir = NEOLAB_SOURCE_DIR;

  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  std::optional<PipelineRun> pipeline;
  auto pipeline_run = [&]() -> const PipelineRun& {
    if (!pipeline) pipeline = run_default_pipeline(source_dir, work_dir);
    return *pipeline;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", criterion_gradients},
      {"APO-up anchor and worked example", criterion_apo_anchor},
      {"freeze contracts", criterion_freeze},
      {"vocabulary extension and zero LoRA preserve outputs", criterion_extension},
      {"accumulation equivalence", criterion_accumulation},
      {"parameter accounting at 7B dims", [&] { return criterion_accounting(source_dir); }},
      {"gap-closure goldens", criterion_gap_goldens},
      {"toy end-to-end steering", [&] { return criterion_end_to_end(pipeline_run()); }},
      {"matched neologism/LoRA setup", [&] { return criterion_matched(pipeline_run()); }},
      {"self-verbalization mechanics", [&] { return criterion_selfverb(pipeline_run()); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!wanted(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << criteria[i].first << " -- " << o.detail
              << std::endl;
  }
  if (pipeline && !keep) fs::remove_all(work_dir);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
