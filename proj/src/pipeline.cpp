#include "neolab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "neolab/checkpoint.hpp"
#include "neolab/checksum.hpp"
#include "neolab/judge.hpp"
#include "neolab/selfverb.hpp"

namespace neolab {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// Seed streams under the run seed.
enum Stream : std::uint64_t {
  kStreamData = 1,
  kStreamCorpus,
  kStreamInit,
  kStreamPretrain,
  kStreamTrain,
  kStreamLora,
  kStreamGeneration,
  kStreamSelfverb,
};

std::uint64_t name_stream(const std::string& name) {
  const std::string h = sha256_hex(name);
  return std::stoull(h.substr(0, 15), nullptr, 16);
}

std::uint64_t stream_seed(const RunConfig& cfg, Stream s, const std::string& concept_name = {}) {
  std::uint64_t seed = derive_seed(cfg.seed, s);
  return concept_name.empty() ? seed : derive_seed(seed, name_stream(concept_name));
}

// ---------------------------------------------------------------------------
// Config parsing.

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    for (const auto& [k, v] : j_.items()) {
      if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
        throw ConfigError(join_path(path_, k) + ": unknown key");
      }
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  Section child(const char* key) const { return Section(j_.at(key), join_path(path_, key)); }

  void read(const char* key, std::size_t& out, std::size_t min = 0) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(join_path(path_, key) + ": expected a non-negative integer");
    }
    out = v.get<std::size_t>();
    if (out < min) throw ConfigError(join_path(path_, key) + ": must be at least " + std::to_string(min));
  }
  void read(const char* key, double& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number() || !std::isfinite(v.get<double>())) {
      throw ConfigError(join_path(path_, key) + ": expected a finite number");
    }
    out = v.get<double>();
  }
  void read(const char* key, std::string& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(join_path(path_, key) + ": expected a string");
    out = v.get<std::string>();
  }
  void read(const char* key, std::vector<std::string>& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_string(); })) {
      throw ConfigError(join_path(path_, key) + ": expected an array of strings");
    }
    out = v.get<std::vector<std::string>>();
  }

  std::string where() const { return path_.empty() ? "<root>" : path_; }

 private:
  const json& j_;
  std::string path_;
};

template <class F>
void checked(const std::string& path, F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    std::string what = e.what();
    if (what.rfind(path + ": ", 0) == 0) what = what.substr(path.size() + 2);
    throw ConfigError(path + ": " + what);
  }
}

void positive(double v, const char* key) {
  if (!(v > 0.0)) throw ConfigError(std::string(key) + ": must be positive");
}

const char* score_kind_name(ScoreKind k) { return k == ScoreKind::kShortTokens ? "short_tokens" : "simple_jargon"; }

std::string adherence_unit(const ConceptSpec& spec) {
  return spec.score == ScoreKind::kShortTokens ? "tokens" : "simplicity (1-10)";
}

ordered_json concept_json(const ConceptSpec& c) {
  std::string jargon;
  for (const auto& w : c.jargon) jargon += w + "\n";
  return {{"name", c.name},
          {"suffix", c.suffix},
          {"chosen_style", style_name(c.chosen_style)},
          {"rejected_style", style_name(c.rejected_style)},
          {"score", score_kind_name(c.score)},
          {"max_chosen_tokens", c.max_chosen_tokens},
          {"min_rejected_tokens", c.min_rejected_tokens},
          {"min_rejected_jargon", c.min_rejected_jargon},
          {"init_from", c.init_from},
          {"neologism_epochs", c.neologism_epochs},
          {"datagen_sha256", sha256_hex(c.datagen_chosen + "\n" + c.datagen_rejected)},
          {"jargon_sha256", sha256_hex(jargon)}};
}

ordered_json train_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"accumulation", t.accumulation},
          {"clip_norm", t.clip_norm},
          {"beta", t.beta},
          {"weight_decay", t.weight_decay},
          {"seed", t.seed}};
}

ordered_json generation_json(const GenerationConfig& g) {
  return {{"temperature", g.temperature}, {"max_new_tokens", g.max_new_tokens}, {"seed", g.seed}};
}

// ---------------------------------------------------------------------------
// Files and manifests.

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifact("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

void require(const fs::path& p, const std::string& what, const std::string& stage) {
  if (!fs::exists(p)) {
    throw MissingArtifact(what + " not found at " + p.string() + " (run `" + stage + "` first)");
  }
}

void guard_outputs(std::initializer_list<fs::path> outputs, const StageOptions& opts) {
  if (opts.force) return;
  for (const auto& p : outputs) {
    if (fs::exists(p)) throw ArtifactExists(p.string() + " already exists (pass --force to overwrite)");
  }
}

void say(const StageOptions& opts, const std::string& line) {
  if (opts.log) *opts.log << line << std::endl;
}

class ManifestWriter {
 public:
  ManifestWriter(const RunConfig& cfg, std::string stage, std::string concept_name)
      : root_(cfg.work_dir), stage_(std::move(stage)), concept_(std::move(concept_name)) {
    doc_["stage"] = stage_;
    if (!concept_.empty()) doc_["concept"] = concept_;
    doc_["config_hash"] = config_hash(cfg);
    doc_["seed"] = cfg.seed;
  }

  void set(const std::string& key, ordered_json value) { doc_[key] = std::move(value); }
  void input(const std::string& name, const fs::path& p) { files(inputs_, name, p); }
  void output(const std::string& name, const fs::path& p) { files(outputs_, name, p); }

  std::string write() {
    doc_["inputs"] = inputs_;
    doc_["outputs"] = outputs_;
    const std::string id = sha256_hex(doc_.dump());
    doc_["id"] = id;
    write_text(Workspace{root_}.manifest(stage_, concept_), doc_.dump(2) + "\n");
    return id;
  }

 private:
  void files(ordered_json& block, const std::string& name, const fs::path& p) {
    block[name] = {{"path", p.lexically_relative(root_).generic_string()}, {"sha256", sha256_file(p)}};
  }

  fs::path root_;
  std::string stage_, concept_;
  ordered_json doc_ = ordered_json::object();
  ordered_json inputs_ = ordered_json::object();
  ordered_json outputs_ = ordered_json::object();
};

void write_timing(const fs::path& p, const TrainReport& rep) {
  ordered_json j{{"minutes_per_epoch", rep.minutes_per_epoch()},
                 {"epoch_seconds", rep.epoch_seconds},
                 {"trainable_parameters", rep.trainable_parameters},
                 {"epochs", rep.epoch_seconds.size()}};
  write_text(p, j.dump(2) + "\n");
}

std::optional<EfficiencyEntry> read_timing(const fs::path& p, const std::string& run) {
  if (!fs::exists(p)) return std::nullopt;
  json j = json::parse(read_text(p));
  return EfficiencyEntry{run, j.at("minutes_per_epoch").get<double>(), j.at("trainable_parameters").get<std::size_t>(),
                         j.at("epochs").get<std::size_t>()};
}

fs::path timing_path(const fs::path& artifact) {
  return artifact.parent_path() / (artifact.stem().string() + "_timing.json");
}
fs::path trace_path(const fs::path& artifact) {
  return artifact.parent_path() / (artifact.stem().string() + "_trace.csv");
}

StepCallback step_logger(const StageOptions& opts, const std::string& tag) {
  if (!opts.log) return {};
  return [&opts, tag](const StepRecord& r) {
    if (r.step % 10 == 0) {
      say(opts, tag + " step " + std::to_string(r.step) + " epoch " + std::to_string(r.epoch) +
                    " loss " + std::to_string(r.loss) + " t1 " + std::to_string(r.t1) + " t2 " +
                    std::to_string(r.t2));
    }
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig.

std::vector<ConceptSpec> RunConfig::selected() const {
  if (run_concepts.empty()) return concepts;
  std::vector<ConceptSpec> out;
  for (const auto& c : concepts) {
    if (std::find(run_concepts.begin(), run_concepts.end(), c.name) != run_concepts.end()) out.push_back(c);
  }
  return out;
}

const ConceptSpec& RunConfig::concept_spec(const std::string& name) const {
  for (const auto& c : concepts) {
    if (c.name == name) return c;
  }
  throw ConfigError("concepts: unknown concept '" + name + "'");
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.train.epochs = 0;  // per-concept
  cfg.concepts = default_concepts();
  cfg.judge_rubric =
      "Rate how accurate and relevant the following answer is on a scale of 1-10. Reply with the number only.";
  return cfg;
}

RunConfig parse_run_config(const std::string& json_text, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("<root>: malformed JSON: ") + e.what());
  }
  RunConfig cfg = default_run_config();
  Section root(doc, "");
  root.allow({"seed", "work_dir", "model", "pretrain", "data", "train", "lora", "generation", "selfverb", "concepts",
              "judge"});
  root.read("seed", cfg.seed);
  std::string work_dir;
  root.read("work_dir", work_dir);
  if (!work_dir.empty()) cfg.work_dir = work_dir;

  if (root.has("model")) {
    Section s = root.child("model");
    s.allow({"d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "context_length", "embed_scale"});
    s.read("d_model", cfg.model.d_model, 1);
    s.read("n_layers", cfg.model.n_layers, 1);
    s.read("n_heads", cfg.model.n_heads, 1);
    s.read("n_kv_heads", cfg.model.n_kv_heads, 1);
    s.read("d_ff", cfg.model.d_ff, 1);
    s.read("context_length", cfg.model.context_length, 2);
    s.read("embed_scale", cfg.model.embed_scale);
  }
  positive(cfg.model.embed_scale, "model.embed_scale");
  if (cfg.model.d_model % cfg.model.n_heads != 0) throw ConfigError("model.n_heads: must divide model.d_model");
  if (cfg.model.n_heads % cfg.model.n_kv_heads != 0) {
    throw ConfigError("model.n_kv_heads: must divide model.n_heads");
  }
  checked("model", [&] { cfg.model.validate(); });

  if (root.has("pretrain")) {
    Section s = root.child("pretrain");
    s.allow({"examples", "steps", "batch_size", "lr", "min_lr_ratio", "warmup_steps", "weight_decay", "clip_norm",
             "log_every"});
    s.read("examples", cfg.pretrain_examples, 1);
    s.read("steps", cfg.pretrain.steps, 1);
    s.read("batch_size", cfg.pretrain.batch_size, 1);
    s.read("lr", cfg.pretrain.lr);
    s.read("min_lr_ratio", cfg.pretrain.min_lr_ratio);
    s.read("warmup_steps", cfg.pretrain.warmup_steps);
    s.read("weight_decay", cfg.pretrain.weight_decay);
    s.read("clip_norm", cfg.pretrain.clip_norm);
    s.read("log_every", cfg.pretrain.log_every, 1);
  }
  if (!(cfg.pretrain.lr > 0.0)) throw ConfigError("pretrain.lr: must be positive");
  if (cfg.pretrain.min_lr_ratio < 0.0 || cfg.pretrain.min_lr_ratio > 1.0) {
    throw ConfigError("pretrain.min_lr_ratio: must be in [0, 1]");
  }
  if (cfg.pretrain.weight_decay < 0.0) throw ConfigError("pretrain.weight_decay: must be non-negative");
  if (!(cfg.pretrain.clip_norm > 0.0)) throw ConfigError("pretrain.clip_norm: must be positive");

  if (root.has("data")) {
    Section s = root.child("data");
    s.allow({"n_train", "n_test"});
    s.read("n_train", cfg.n_train, 10);
    s.read("n_test", cfg.n_test, 10);
  }

  std::size_t epochs_override = 0;
  if (root.has("train")) {
    Section s = root.child("train");
    s.allow({"lr", "epochs", "batch_size", "accumulation", "clip_norm", "beta", "weight_decay"});
    s.read("lr", cfg.train.lr);
    s.read("epochs", epochs_override, 1);
    s.read("batch_size", cfg.train.batch_size, 1);
    s.read("accumulation", cfg.train.accumulation, 1);
    s.read("clip_norm", cfg.train.clip_norm);
    s.read("beta", cfg.train.beta);
    s.read("weight_decay", cfg.train.weight_decay);
  }
  cfg.train.epochs = epochs_override;  // 0: per-concept epochs
  positive(cfg.train.lr, "train.lr");
  positive(cfg.train.clip_norm, "train.clip_norm");
  positive(cfg.train.beta, "train.beta");
  if (cfg.train.weight_decay < 0.0) throw ConfigError("train.weight_decay: must be non-negative");
  checked("train", [&] {
    TrainConfig probe = cfg.train;
    probe.epochs = 1;
    probe.validate();
  });

  if (root.has("lora")) {
    Section s = root.child("lora");
    s.allow({"rank", "alpha", "dropout", "init_std"});
    s.read("rank", cfg.lora.rank, 1);
    s.read("alpha", cfg.lora.alpha);
    s.read("dropout", cfg.lora.dropout);
    s.read("init_std", cfg.lora.init_std);
  }
  positive(cfg.lora.alpha, "lora.alpha");
  if (cfg.lora.dropout < 0.0 || cfg.lora.dropout >= 1.0) throw ConfigError("lora.dropout: must be in [0, 1)");
  if (cfg.lora.init_std < 0.0) throw ConfigError("lora.init_std: must be non-negative");
  checked("lora", [&] { cfg.lora.validate(); });

  if (root.has("generation")) {
    Section s = root.child("generation");
    s.allow({"temperature", "max_new_tokens"});
    s.read("temperature", cfg.generation.temperature);
    s.read("max_new_tokens", cfg.generation.max_new_tokens, 1);
  }
  if (cfg.generation.temperature < 0.0) throw ConfigError("generation.temperature: must be non-negative");
  checked("generation", [&] { cfg.generation.validate(); });

  if (root.has("selfverb")) {
    Section s = root.child("selfverb");
    s.allow({"probe_prompts"});
    s.read("probe_prompts", cfg.probe_prompts);
  }

  if (root.has("concepts")) {
    Section s = root.child("concepts");
    s.allow({"file", "run"});
    s.read("file", cfg.concepts_file);
    s.read("run", cfg.run_concepts);
  }
  if (!cfg.concepts_file.empty()) {
    fs::path p = cfg.concepts_file;
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    if (!fs::exists(p)) throw ConfigError("concepts.file: " + p.string() + " does not exist");
    try {
      cfg.concepts = load_concepts(p);
    } catch (const DataError& e) {
      throw ConfigError(std::string("concepts.file: ") + e.what());
    }
  }
  for (const auto& name : cfg.run_concepts) {
    if (std::none_of(cfg.concepts.begin(), cfg.concepts.end(), [&](const ConceptSpec& c) { return c.name == name; })) {
      throw ConfigError("concepts.run: unknown concept '" + name + "'");
    }
  }
  if (cfg.selected().empty()) throw ConfigError("concepts.run: no concepts selected");

  if (root.has("judge")) {
    Section s = root.child("judge");
    s.allow({"rubric"});
    s.read("rubric", cfg.judge_rubric);
  }
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& assignments) {
  json doc;
  try {
    doc = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("<root>: malformed JSON: ") + e.what());
  }
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(a + ": override must look like key.path=value");
    const std::string key = a.substr(0, eq);
    const std::string raw = a.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;  // bare strings need no quotes
    }
    json* node = &doc;
    std::stringstream parts(key);
    std::string part, next;
    std::getline(parts, part, '.');
    while (std::getline(parts, next, '.')) {
      json& child = (*node)[part];
      if (!child.is_object()) {
        if (!child.is_null()) throw ConfigError(key + ": '" + part + "' is not a section");
        child = json::object();
      }
      node = &child;
      part = next;
    }
    (*node)[part] = value;
  }
  return doc.dump();
}

std::string run_config_json(const RunConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["model"] = {{"d_model", cfg.model.d_model},       {"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},       {"n_kv_heads", cfg.model.n_kv_heads},
                {"d_ff", cfg.model.d_ff},             {"context_length", cfg.model.context_length},
                {"embed_scale", cfg.model.embed_scale}};
  j["pretrain"] = {{"examples", cfg.pretrain_examples},     {"steps", cfg.pretrain.steps},
                   {"batch_size", cfg.pretrain.batch_size}, {"lr", cfg.pretrain.lr},
                   {"min_lr_ratio", cfg.pretrain.min_lr_ratio}, {"warmup_steps", cfg.pretrain.warmup_steps},
                   {"weight_decay", cfg.pretrain.weight_decay}, {"clip_norm", cfg.pretrain.clip_norm}};
  j["data"] = {{"n_train", cfg.n_train}, {"n_test", cfg.n_test}};
  ordered_json train = train_json(cfg.train);
  train.erase("seed");
  j["train"] = train;
  j["lora"] = {{"rank", cfg.lora.rank},
               {"alpha", cfg.lora.alpha},
               {"dropout", cfg.lora.dropout},
               {"init_std", cfg.lora.init_std}};
  j["generation"] = {{"temperature", cfg.generation.temperature}, {"max_new_tokens", cfg.generation.max_new_tokens}};
  j["selfverb"] = {{"probe_prompts", cfg.probe_prompts}};
  ordered_json concepts = ordered_json::array();
  for (const auto& c : cfg.concepts) concepts.push_back(concept_json(c));
  j["concepts"] = {{"specs", concepts}, {"run", cfg.run_concepts}};
  j["judge"] = {{"rubric", cfg.judge_rubric}};
  return j.dump(2);
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(run_config_json(cfg)); }

TrainConfig concept_train_config(const RunConfig& cfg, const ConceptSpec& spec) {
  TrainConfig t = cfg.train;
  t.epochs = cfg.train.epochs ? cfg.train.epochs : spec.neologism_epochs;
  t.seed = stream_seed(cfg, kStreamTrain, spec.name);
  return t;
}

// ---------------------------------------------------------------------------
// Stages.

void stage_gen_data(const RunConfig& cfg, const StageOptions& opts) {
  Workspace ws{cfg.work_dir};
  const Vocabulary vocab = base_vocabulary();
  for (const auto& spec : cfg.selected()) {
    guard_outputs({ws.train_data(spec.name), ws.test_data(spec.name)}, opts);
    const std::uint64_t seed = stream_seed(cfg, kStreamData, spec.name);
    PreferenceDataset ds = build_dataset(spec, cfg.n_train, cfg.n_test, seed);
    for (const auto* split : {&ds.train, &ds.test}) {
      for (const auto& ex : *split) {
        if (auto why = validate_example(ex, spec, vocab); !why.empty()) {
          throw DataError("gen-data " + spec.name + ": generated example violates the concept rules: " + why);
        }
      }
    }
    fs::create_directories(ws.train_data(spec.name).parent_path());
    save_jsonl(ws.train_data(spec.name), ds.train);
    save_jsonl(ws.test_data(spec.name), ds.test);
    say(opts, "gen-data " + spec.name + ": " + std::to_string(ds.train.size()) + " train, " +
                  std::to_string(ds.test.size()) + " test");

    ManifestWriter m(cfg, "gen-data", spec.name);
    m.set("method", {{"generator", "rule-based"},
                     {"n_train", cfg.n_train},
                     {"n_test", cfg.n_test},
                     {"seed", seed},
                     {"concept", concept_json(spec)}});
    m.output("train", ws.train_data(spec.name));
    m.output("test", ws.test_data(spec.name));
    m.write();
  }
}

void stage_pretrain(const RunConfig& cfg, const StageOptions& opts) {
  Workspace ws{cfg.work_dir};
  const fs::path ckpt = ws.base_checkpoint();
  const fs::path quality = ckpt.parent_path() / "quality.json";
  const fs::path losses = ckpt.parent_path() / "loss.csv";
  guard_outputs({ckpt, quality, losses}, opts);

  if (cfg.model.n_kv_heads != cfg.model.n_heads) {
    throw ConfigError("model.n_kv_heads: the toy model needs n_kv_heads == n_heads (grouped-query dims are for accounting)");
  }
  const Vocabulary vocab = base_vocabulary();
  const std::uint64_t corpus_seed = stream_seed(cfg, kStreamCorpus);
  const std::uint64_t init_seed = stream_seed(cfg, kStreamInit);
  auto pairs = build_pretraining_corpus(cfg.pretrain_examples, corpus_seed);
  std::vector<LmExample> corpus;
  corpus.reserve(pairs.size());
  for (const auto& p : pairs) {
    LmExample e{tokenize(vocab, p.prompt), tokenize(vocab, p.response)};
    e.response.push_back(vocab.eos());
    if (e.prompt.size() + e.response.size() + 1 > cfg.model.context_length) {
      throw ConfigError("model.context_length: pretraining sequence of " +
                        std::to_string(e.prompt.size() + e.response.size() + 1) + " tokens does not fit");
    }
    corpus.push_back(std::move(e));
  }

  LanguageModel model(vocab, cfg.model, init_seed);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = stream_seed(cfg, kStreamPretrain);
  say(opts, "pretrain: " + std::to_string(corpus.size()) + " sequences, " + std::to_string(pc.steps) + " steps");
  PretrainReport rep = pretrain_base(model, corpus, pc, [&](std::size_t step, double loss) {
    say(opts, "pretrain step " + std::to_string(step) + " loss " + std::to_string(loss));
  });

  fs::create_directories(ckpt.parent_path());
  save_checkpoint(model, ckpt);
  {
    std::ostringstream csv;
    csv << "step,loss\n";
    csv.precision(17);
    for (std::size_t i = 0; i < rep.loss_trace.size(); ++i) csv << i + 1 << ',' << rep.loss_trace[i] << '\n';
    write_text(losses, csv.str());
  }

  // Greedy held-out QA accuracy: the facts the steering runs must not lose.
  GenerationConfig greedy;
  greedy.temperature = 0.0;
  greedy.max_new_tokens = cfg.model.context_length;
  std::size_t hits = 0, total = 0;
  for (const auto& q : qa_items()) {
    if (!q.held_out) continue;
    auto r = generate(model, tokenize(vocab, q.question), greedy);
    hits += capability_score(detokenize(vocab, r.tokens), q.gold_key) == 10.0;
    ++total;
  }
  const double acc = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  ordered_json q{{"heldout_questions", total},
                 {"heldout_accuracy", acc},
                 {"final_loss", rep.loss_trace.empty() ? 0.0 : rep.loss_trace.back()}};
  write_text(quality, q.dump(2) + "\n");
  write_text(ckpt.parent_path() / "timing.json", ordered_json{{"seconds", rep.seconds}}.dump(2) + "\n");
  say(opts, "pretrain: held-out accuracy " + std::to_string(acc));

  ManifestWriter m(cfg, "pretrain", "");
  ordered_json method{{"examples", cfg.pretrain_examples},
                      {"corpus_seed", corpus_seed},
                      {"init_seed", init_seed},
                      {"seed", pc.seed},
                      {"steps", pc.steps},
                      {"batch_size", pc.batch_size},
                      {"lr", pc.lr},
                      {"min_lr_ratio", pc.min_lr_ratio},
                      {"warmup_steps", pc.warmup_steps},
                      {"weight_decay", pc.weight_decay},
                      {"clip_norm", pc.clip_norm},
                      {"vocab_size", vocab.size()},
                      {"parameters", model.parameter_count()}};
  m.set("method", method);
  m.output("checkpoint", ckpt);
  m.output("checkpoint_sidecar", sidecar_path(ckpt));
  m.output("loss", losses);
  m.output("quality", quality);
  m.write();
}

namespace {

struct TrainingInputs {
  LanguageModel model;
  std::vector<PreferenceExample> data;
};

TrainingInputs load_training_inputs(const Workspace& ws, const std::string& c) {
  require(ws.base_checkpoint(), "base checkpoint", "neolab pretrain");
  require(ws.train_data(c), "training data for '" + c + "'", "neolab gen-data");
  return {load_checkpoint(ws.base_checkpoint().string()), load_jsonl(ws.train_data(c))};
}

}  // namespace

void stage_train_neologism(const RunConfig& cfg, const std::string& concept_name, const StageOptions& opts,
                           std::size_t max_steps) {
  Workspace ws{cfg.work_dir};
  const ConceptSpec& spec = cfg.concept_spec(concept_name);
  const fs::path out = ws.neologism(concept_name);
  guard_outputs({out, trace_path(out)}, opts);
  auto [model, data] = load_training_inputs(ws, concept_name);

  model.extend_vocabulary(spec.surface(), spec.init_from);
  auto pairs = encode_pairs(model.vocab(), data, PromptField::kSuffixed);
  ReferenceCache refs = ReferenceCache::build(model, pairs);
  const TrainConfig tc = concept_train_config(cfg, spec);
  TrainReport rep;
  say(opts, "train-neologism " + concept_name + ": " + std::to_string(pairs.size()) + " pairs, " +
                std::to_string(tc.epochs) + " epochs");
  NeologismArtifact art =
      train_neologism(model, pairs, refs, spec, tc, &rep, step_logger(opts, "neologism " + concept_name), max_steps);

  fs::create_directories(out.parent_path());
  art.save(out);
  write_trace_csv(trace_path(out), rep.trace);
  write_timing(timing_path(out), rep);

  ManifestWriter m(cfg, "train-neologism", concept_name);
  ordered_json train = train_json(tc);
  m.set("train", train);
  m.set("train_hash", sha256_hex(train.dump()));
  m.set("method", {{"kind", "neologism"},
                   {"surface", spec.surface()},
                   {"init_from", spec.init_from},
                   {"prompt", "suffixed"},
                   {"weight_decay", 0.0},
                   {"trainable_parameters", rep.trainable_parameters},
                   {"max_steps", max_steps},
                   {"reference_sha256", refs.checksum()}});
  m.input("base", ws.base_checkpoint());
  m.input("dataset", ws.train_data(concept_name));
  m.output("artifact", out);
  m.output("trace", trace_path(out));
  m.write();
}

void stage_train_lora(const RunConfig& cfg, const std::string& concept_name, const StageOptions& opts,
                      std::size_t max_steps) {
  Workspace ws{cfg.work_dir};
  const ConceptSpec& spec = cfg.concept_spec(concept_name);
  const fs::path out = ws.lora(concept_name);
  guard_outputs({out, trace_path(out)}, opts);
  auto [model, data] = load_training_inputs(ws, concept_name);

  auto pairs = encode_pairs(model.vocab(), data, PromptField::kBase);
  ReferenceCache refs = ReferenceCache::build(model, pairs);
  const TrainConfig tc = concept_train_config(cfg, spec);
  LoraConfig lc = cfg.lora;
  lc.seed = stream_seed(cfg, kStreamLora, concept_name);
  TrainReport rep;
  say(opts, "train-lora " + concept_name + ": " + std::to_string(pairs.size()) + " pairs, " +
                std::to_string(tc.epochs) + " epochs");
  LoraAdapterSet adapters =
      train_lora(model, pairs, refs, lc, tc, &rep, step_logger(opts, "lora " + concept_name), max_steps);

  fs::create_directories(out.parent_path());
  adapters.save(out);
  write_trace_csv(trace_path(out), rep.trace);
  write_timing(timing_path(out), rep);

  ManifestWriter m(cfg, "train-lora", concept_name);
  ordered_json train = train_json(tc);
  m.set("train", train);
  m.set("train_hash", sha256_hex(train.dump()));
  m.set("method", {{"kind", "lora"},
                   {"targets", {"query", "value"}},
                   {"rank", lc.rank},
                   {"alpha", lc.alpha},
                   {"dropout", lc.dropout},
                   {"init_std", lc.init_std},
                   {"seed", lc.seed},
                   {"prompt", "base"},
                   {"trainable_parameters", rep.trainable_parameters},
                   {"max_steps", max_steps},
                   {"reference_sha256", refs.checksum()}});
  m.input("base", ws.base_checkpoint());
  m.input("dataset", ws.train_data(concept_name));
  m.output("artifact", out);
  m.output("artifact_blob", fs::path(out.string() + ".bin"));
  m.output("trace", trace_path(out));
  m.write();
}

void stage_selfverb(const RunConfig& cfg, const std::string& concept_name, const StageOptions& opts) {
  Workspace ws{cfg.work_dir};
  const ConceptSpec& spec = cfg.concept_spec(concept_name);
  const fs::path dir = ws.selfverb_dir(concept_name);
  const fs::path transcripts_p = dir / "transcripts.json", summary_p = dir / "summary.json",
                 novel_p = dir / "novel_words.csv", probes_p = dir / "probes.csv";
  guard_outputs({transcripts_p, summary_p, novel_p, probes_p, ws.verbalization(concept_name)}, opts);
  require(ws.base_checkpoint(), "base checkpoint", "neolab pretrain");
  require(ws.neologism(concept_name), "neologism artifact for '" + concept_name + "'", "neolab train-neologism");
  require(ws.test_data(concept_name), "test data for '" + concept_name + "'", "neolab gen-data");

  LanguageModel model = load_checkpoint(ws.base_checkpoint().string());
  install_neologism(model, NeologismArtifact::load(ws.neologism(concept_name)));
  const auto test = load_jsonl(ws.test_data(concept_name));

  GenerationConfig qgen = cfg.generation;
  qgen.seed = stream_seed(cfg, kStreamSelfverb, concept_name);
  auto transcripts = run_questionnaire(model, spec.surface(), qgen);
  fs::create_directories(dir);
  save_transcripts(transcripts_p, spec.surface(), transcripts);
  auto novel = detect_novel_words(transcripts, model.vocab());
  save_findings_csv(novel_p, novel);
  auto synonyms = extract_synonyms(transcripts);

  // Same sampling stream as eval's neologism mode, so the plain form
  // reproduces the eval response for each prompt.
  GenerationConfig pgen = cfg.generation;
  pgen.seed = stream_seed(cfg, kStreamGeneration, concept_name);
  auto scorer = [&](const std::string& text) { return adherence(spec, model.vocab(), text); };
  std::ostringstream probes;
  probes.precision(17);
  probes << "index,form,score,response\n";
  std::size_t monotone = 0;
  const std::size_t n_probe = std::min(cfg.probe_prompts, test.size());
  const char* forms[] = {"plain", "not", "anti"};
  for (std::size_t i = 0; i < n_probe; ++i) {
    ModifierProbe p = modifier_probe(model, spec.surface(), test[i].base_prompt, scorer, pgen, i);
    monotone += p.monotone;
    for (std::size_t k = 0; k < 3; ++k) {
      std::string text = p.responses[k];
      std::replace(text.begin(), text.end(), '"', '\'');
      probes << i << ',' << forms[k] << ',' << p.scores[k] << ",\"" << text << "\"\n";
    }
  }
  write_text(probes_p, probes.str());

  ordered_json summary;
  summary["neologism"] = spec.surface();
  ordered_json lists = ordered_json::array();
  for (const auto& s : synonyms) lists.push_back({{"items", s.items}, {"warning", s.warning}});
  summary["synonyms"] = lists;
  ordered_json words = ordered_json::array();
  for (const auto& f : novel) words.push_back({{"surface", f.surface}, {"subtokens", f.subtokens}});
  summary["novel_words"] = words;
  summary["probes"] = n_probe;
  summary["probes_monotone"] = monotone;
  std::string verbalization;
  try {
    verbalization = build_verbalization(transcripts, model.vocab());
    write_text(ws.verbalization(concept_name), verbalization + "\n");
    summary["verbalization"] = verbalization;
  } catch (const std::runtime_error& e) {
    summary["verbalization"] = nullptr;
    summary["warning"] = e.what();
    fs::remove(ws.verbalization(concept_name));
  }
  write_text(summary_p, summary.dump(2) + "\n");
  say(opts, "selfverb " + concept_name + ": " + std::to_string(novel.size()) + " novel words, " +
                std::to_string(monotone) + "/" + std::to_string(n_probe) + " monotone probes");

  ManifestWriter m(cfg, "selfverb", concept_name);
  m.set("method", {{"questionnaire", generation_json(qgen)}, {"probes", generation_json(pgen)}});
  m.input("base", ws.base_checkpoint());
  m.input("neologism", ws.neologism(concept_name));
  m.input("test", ws.test_data(concept_name));
  m.output("transcripts", transcripts_p);
  m.output("novel_words", novel_p);
  m.output("probes", probes_p);
  m.output("summary", summary_p);
  if (fs::exists(ws.verbalization(concept_name))) m.output("verbalization", ws.verbalization(concept_name));
  m.write();
}

std::vector<std::string> default_eval_modes(const RunConfig& cfg) {
  std::vector<std::string> modes{"baseline", "neologism", "lora", "datagen_prompting", "selfverb_prompting"};
  if (cfg.selected().size() > 1) modes.push_back("combined");
  return modes;
}

EvalReport stage_eval(const RunConfig& cfg, const std::string& concept_name, const std::vector<std::string>& modes,
                      const StageOptions& opts) {
  Workspace ws{cfg.work_dir};
  const ConceptSpec& spec = cfg.concept_spec(concept_name);
  const fs::path dir = ws.eval_dir(concept_name);
  guard_outputs({dir / "results.json", dir / "results.csv", dir / "samples.csv"}, opts);
  if (modes.empty()) throw ConfigError("eval.modes: no modes requested");
  require(ws.base_checkpoint(), "base checkpoint", "neolab pretrain");
  require(ws.test_data(concept_name), "test data for '" + concept_name + "'", "neolab gen-data");
  require(ws.train_data(concept_name), "training data for '" + concept_name + "'", "neolab gen-data");

  ManifestWriter m(cfg, "eval", concept_name);
  m.input("base", ws.base_checkpoint());
  m.input("test", ws.test_data(concept_name));
  m.input("train", ws.train_data(concept_name));

  // Check every prerequisite before spending time on generation.
  auto neologism_needed = [&](const std::string& c) {
    require(ws.neologism(c), "neologism artifact for '" + c + "'", "neolab train-neologism --concept " + c);
  };
  for (const auto& mode : modes) {
    if (mode == "neologism") {
      neologism_needed(concept_name);
    } else if (mode == "combined") {
      if (cfg.selected().size() < 2) throw ConfigError("eval.modes: combined needs at least two concepts");
      for (const auto& c : cfg.selected()) neologism_needed(c.name);
    } else if (mode == "lora") {
      require(ws.lora(concept_name), "LoRA adapters for '" + concept_name + "'", "neolab train-lora");
    } else if (mode == "selfverb_prompting") {
      require(ws.verbalization(concept_name), "self-verbalization for '" + concept_name + "'", "neolab selfverb");
    } else if (mode != "baseline" && mode != "datagen_prompting") {
      throw ConfigError("eval.modes: unknown mode '" + mode + "'");
    }
  }

  const LanguageModel base = load_checkpoint(ws.base_checkpoint().string());
  const auto test = load_jsonl(ws.test_data(concept_name));
  const auto train = load_jsonl(ws.train_data(concept_name));
  GenerationConfig gen = cfg.generation;
  gen.seed = stream_seed(cfg, kStreamGeneration, concept_name);

  std::optional<JudgeClient> judge;
  if (opts.use_judge) {
    JudgeConfig jc = JudgeConfig::from_env();
    jc.audit_log = dir / "judge_audit.jsonl";
    fs::create_directories(dir);
    judge.emplace(jc);
  }

  std::vector<ScoreSample> all;
  for (const auto& name : modes) {
    InferenceMode mode;
    mode.generation = gen;
    std::optional<LanguageModel> owned;
    std::optional<LoraAdapterSet> adapters;
    const LanguageModel* model = &base;
    if (name == "neologism" || name == "combined") {
      owned.emplace(base.clone());
      mode.kind = ModeKind::kNeologism;
      std::vector<std::string> names;
      if (name == "neologism") {
        names.push_back(concept_name);
      } else {
        for (const auto& c : cfg.selected()) names.push_back(c.name);
      }
      for (const auto& c : names) {
        install_neologism(*owned, NeologismArtifact::load(ws.neologism(c)));
        m.input("neologism_" + c, ws.neologism(c));
      }
      mode.concepts = names;
      model = &*owned;
    } else if (name == "lora") {
      adapters.emplace(LoraAdapterSet::load(ws.lora(concept_name)));
      m.input("lora", ws.lora(concept_name));
      m.input("lora_blob", fs::path(ws.lora(concept_name).string() + ".bin"));
      mode.kind = ModeKind::kLora;
      mode.adapter = &*adapters;
    } else if (name == "datagen_prompting") {
      mode.kind = ModeKind::kDatagenPrompting;
      mode.concept_name = concept_name;
    } else if (name == "selfverb_prompting") {
      mode.kind = ModeKind::kSelfverbPrompting;
      mode.concept_name = concept_name;
      std::string text = read_text(ws.verbalization(concept_name));
      while (!text.empty() && (text.back() == '\n' || text.back() == ' ')) text.pop_back();
      mode.verbalization = text;
      m.input("verbalization", ws.verbalization(concept_name));
    }
    say(opts, "eval " + concept_name + ": " + mode.label());
    auto samples = run_inference(*model, mode, test, cfg.concepts);
    score_samples(samples, spec, model->vocab());
    if (judge) {
      std::vector<std::string> texts;
      std::vector<std::size_t> where;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].ok) continue;
        texts.push_back(samples[i].prompt + "\n\n" + samples[i].response);
        where.push_back(i);
      }
      auto outcomes = judge->score_many(cfg.judge_rubric, texts);
      for (std::size_t k = 0; k < outcomes.size(); ++k) {
        ScoreSample& s = samples[where[k]];
        if (outcomes[k].score) {
          s.capability = *outcomes[k].score;
        } else {
          s.ok = false;
          s.error = "judge: " + outcomes[k].error;
        }
      }
    }
    all.insert(all.end(), samples.begin(), samples.end());
  }

  std::vector<double> chosen_scores;
  for (const auto& ex : train) chosen_scores.push_back(adherence(spec, base.vocab(), ex.chosen));
  std::vector<EfficiencyEntry> efficiency;
  if (auto e = read_timing(timing_path(ws.neologism(concept_name)), "neologism:" + concept_name)) {
    efficiency.push_back(*e);
  }
  if (auto e = read_timing(timing_path(ws.lora(concept_name)), "lora:" + concept_name)) efficiency.push_back(*e);

  EvalReport report =
      build_report(concept_name, adherence_unit(spec), all, summarize(chosen_scores), std::move(efficiency));
  emit_report(report, all, dir,
              {{"concept", concept_name}, {"config_hash", config_hash(cfg)}, {"seed", std::to_string(cfg.seed)}});

  m.set("method", {{"modes", modes}, {"generation", generation_json(gen)}, {"judge", opts.use_judge}});
  m.output("results_json", dir / "results.json");
  m.output("results_csv", dir / "results.csv");
  m.output("samples", dir / "samples.csv");
  m.output("plot_adherence", dir / "plots" / (concept_name + "_adherence.svg"));
  m.output("plot_capability", dir / "plots" / (concept_name + "_capability.svg"));
  m.write();
  return report;
}

std::string stage_report(const RunConfig& cfg, const StageOptions& opts) {
  Workspace ws{cfg.work_dir};
  const fs::path out = ws.root / "report.csv";
  guard_outputs({out}, opts);
  ManifestWriter m(cfg, "report", "");
  std::ostringstream csv;
  csv.precision(6);
  csv << std::fixed;
  csv << "concept,mode,n,missing,adherence_mean,adherence_median,gap_closure_mean,gap_closure_median,"
         "capability_median\n";
  std::size_t found = 0;
  for (const auto& spec : cfg.selected()) {
    const fs::path results = ws.eval_dir(spec.name) / "results.json";
    if (!fs::exists(results)) continue;
    ++found;
    m.input("results_" + spec.name, results);
    json j = json::parse(read_text(results));
    auto gap = [](const json& v) { return v.is_number() ? std::to_string(v.get<double>()) : std::string(); };
    for (const auto& mode : j.at("modes")) {
      csv << spec.name << ',' << mode.at("mode").get<std::string>() << ',' << mode.at("adherence").at("n") << ','
          << mode.at("missing") << ',' << mode.at("adherence").at("mean").get<double>() << ','
          << mode.at("adherence").at("median").get<double>() << ',' << gap(mode.value("gap_closure_mean", json()))
          << ',' << gap(mode.value("gap_closure_median", json())) << ','
          << mode.at("capability").at("median").get<double>() << '\n';
    }
  }
  if (found == 0) throw MissingArtifact("no eval results under " + (ws.root / "eval").string() + " (run `neolab eval` first)");
  write_text(out, csv.str());
  m.output("report", out);
  m.write();
  say(opts, "report: " + out.string());
  return csv.str();
}

std::string raw_report(const std::vector<fs::path>& tables) {
  std::ostringstream out;
  out.precision(1);
  out << std::fixed;
  out << "concept,method,score,base,training_data,gap_closure\n";
  for (const auto& p : tables) {
    require(p, "raw score table", "a stored table");
    RawScoreTable t;
    try {
      t = load_raw_scores(p);
    } catch (const EvalError& e) {
      throw DataError(e.what());
    }
    auto gaps = gap_closures(t);
    for (std::size_t i = 0; i < gaps.size(); ++i) {
      out << t.concept_name << ',' << gaps[i].first << ',' << t.methods[i].second << ',' << t.base << ','
          << t.training_data << ',' << gaps[i].second << '\n';
    }
  }
  return out.str();
}

void run_pipeline(const RunConfig& cfg, const StageOptions& opts) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  ordered_json timing = ordered_json::object();
  auto timed = [&](const std::string& name, const auto& fn) {
    const auto t0 = clock::now();
    fn();
    timing[name] = std::chrono::duration<double>(clock::now() - t0).count();
  };
  timed("gen-data", [&] { stage_gen_data(cfg, opts); });
  timed("pretrain", [&] { stage_pretrain(cfg, opts); });
  for (const auto& c : cfg.selected()) {
    timed("train-neologism_" + c.name, [&] { stage_train_neologism(cfg, c.name, opts); });
    timed("train-lora_" + c.name, [&] { stage_train_lora(cfg, c.name, opts); });
  }
  for (const auto& c : cfg.selected()) timed("selfverb_" + c.name, [&] { stage_selfverb(cfg, c.name, opts); });
  const auto modes = default_eval_modes(cfg);
  for (const auto& c : cfg.selected()) timed("eval_" + c.name, [&] { stage_eval(cfg, c.name, modes, opts); });
  timed("report", [&] { stage_report(cfg, opts); });
  timing["total"] = std::chrono::duration<double>(clock::now() - start).count();

  Workspace ws{cfg.work_dir};
  write_text(ws.root / "timing.json", timing.dump(2) + "\n");
  ManifestWriter m(cfg, "pipeline", "");
  m.set("config", ordered_json::parse(run_config_json(cfg)));
  ordered_json stages = ordered_json::array();
  for (const auto& entry : fs::directory_iterator(ws.root / "manifests")) {
    if (entry.path().filename() != "pipeline.json") stages.push_back(entry.path().filename().string());
  }
  std::sort(stages.begin(), stages.end());
  for (const auto& s : stages) m.input(s.get<std::string>(), ws.root / "manifests" / s.get<std::string>());
  m.write();
}

}  // namespace neolab
