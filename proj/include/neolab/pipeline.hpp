#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "neolab/corpus.hpp"
#include "neolab/eval.hpp"
#include "neolab/generation.hpp"
#include "neolab/model.hpp"
#include "neolab/pretrain.hpp"
#include "neolab/steering.hpp"

namespace neolab {

/// Bad or inconsistent configuration. The message starts with the key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage input from an earlier stage is not on disk.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage output already exists and overwriting was not requested.
class ArtifactExists : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 7;  // every stage seed is derived from this
  ModelDims model;
  PretrainConfig pretrain;  // pretrain.seed is ignored
  std::size_t pretrain_examples = 30000;
  std::size_t n_train = 1030;
  std::size_t n_test = 100;
  TrainConfig train;  // train.seed is ignored; epochs come from each concept
  LoraConfig lora;    // lora.seed is ignored
  GenerationConfig generation;
  std::size_t probe_prompts = 10;  // modifier probes per concept
  std::string concepts_file;       // empty: built-in concepts
  std::vector<std::string> run_concepts;  // subset to run; empty: all
  std::vector<ConceptSpec> concepts;
  std::string judge_rubric;  // capability rubric for the external judge
  std::filesystem::path work_dir = "run";

  /// Concepts selected by run_concepts, in config order.
  std::vector<ConceptSpec> selected() const;
  const ConceptSpec& concept_spec(const std::string& name) const;
};

RunConfig default_run_config();
/// Parses config JSON text. Unknown keys, wrong types and out-of-range values
/// raise ConfigError naming the key path. Relative concepts_file paths are
/// resolved against `base_dir`.
RunConfig parse_run_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
/// Applies "key.path=value" overrides to config JSON text before parsing.
std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& assignments);
/// Canonical JSON of everything that affects outputs (work_dir excluded).
std::string run_config_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

/// Hyperparameters shared by the neologism and LoRA runs for `spec`.
TrainConfig concept_train_config(const RunConfig& cfg, const ConceptSpec& spec);

/// Fixed layout under the work directory.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path train_data(const std::string& c) const { return root / "data" / (c + "_train.jsonl"); }
  std::filesystem::path test_data(const std::string& c) const { return root / "data" / (c + "_test.jsonl"); }
  std::filesystem::path base_checkpoint() const { return root / "base" / "model.ckpt"; }
  std::filesystem::path neologism(const std::string& c) const { return root / "neologism" / (c + ".json"); }
  std::filesystem::path lora(const std::string& c) const { return root / "lora" / (c + ".json"); }
  std::filesystem::path eval_dir(const std::string& c) const { return root / "eval" / c; }
  std::filesystem::path selfverb_dir(const std::string& c) const { return root / "selfverb" / c; }
  std::filesystem::path verbalization(const std::string& c) const { return selfverb_dir(c) / "verbalization.txt"; }
  std::filesystem::path manifest(const std::string& stage, const std::string& c = {}) const {
    return root / "manifests" / ((c.empty() ? stage : stage + "_" + c) + ".json");
  }
};

struct StageOptions {
  bool force = false;           // overwrite existing outputs
  std::ostream* log = nullptr;  // progress lines; null is silent
  bool use_judge = false;       // eval: capability from the external judge
};

void stage_gen_data(const RunConfig& cfg, const StageOptions& opts);
void stage_pretrain(const RunConfig& cfg, const StageOptions& opts);
void stage_train_neologism(const RunConfig& cfg, const std::string& concept_name, const StageOptions& opts,
                           std::size_t max_steps = 0);
void stage_train_lora(const RunConfig& cfg, const std::string& concept_name, const StageOptions& opts,
                      std::size_t max_steps = 0);
void stage_selfverb(const RunConfig& cfg, const std::string& concept_name, const StageOptions& opts);

/// Mode names: baseline, neologism, lora, datagen_prompting,
/// selfverb_prompting, combined (every selected concept's neologism at once).
std::vector<std::string> default_eval_modes(const RunConfig& cfg);
EvalReport stage_eval(const RunConfig& cfg, const std::string& concept_name, const std::vector<std::string>& modes,
                      const StageOptions& opts);

/// Summarizes every eval/<concept>/results.json into report.csv and returns
/// it as text.
std::string stage_report(const RunConfig& cfg, const StageOptions& opts);
/// Gap-closure table for stored raw means (one JSON table per file).
std::string raw_report(const std::vector<std::filesystem::path>& tables);

/// Every stage in order for the selected concepts.
void run_pipeline(const RunConfig& cfg, const StageOptions& opts);

}  // namespace neolab
