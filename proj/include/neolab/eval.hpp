#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "neolab/corpus.hpp"
#include "neolab/generation.hpp"
#include "neolab/model.hpp"

namespace neolab {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModeKind { kBaseline, kNeologism, kLora, kDatagenPrompting, kSelfverbPrompting };

std::string mode_kind_name(ModeKind kind);
ModeKind parse_mode_kind(std::string_view name);

struct InferenceMode {
  ModeKind kind = ModeKind::kBaseline;
  std::vector<std::string> concepts;                // neologism mode; two or more = combined
  const ProjectionAdapter* adapter = nullptr;       // lora mode
  std::string concept_name;                         // datagen / selfverb modes
  std::string verbalization;                        // selfverb mode prefix
  GenerationConfig generation;

  /// "baseline", "neologism:short", "neologism:short+simple", "lora", ...
  std::string label() const;
};

/// Prompt text the mode feeds the model for `base_prompt`.
std::string mode_prompt(const InferenceMode& mode, std::string_view base_prompt,
                        std::span<const ConceptSpec> concepts);

struct ScoreSample {
  std::size_t id = 0;
  std::string mode;
  std::string prompt;
  std::string response;
  std::string gold_key;
  double adherence = 0.0;
  double capability = 0.0;
  std::size_t tokens = 0;
  bool ok = true;       // false when the example could not be run
  std::string error;    // reason when !ok
  bool truncated = false;
};

/// One sampled response. `index` selects the per-example sampling stream, so
/// any caller passing the same (model, prompt, config, index) gets the same text.
GenerationResult respond(const LanguageModel& model, std::string_view prompt_text,
                         const GenerationConfig& gen, std::size_t index,
                         const ProjectionAdapter* adapter = nullptr);

/// Generates one response per example. Per-example failures (context
/// overflow, untokenizable prompt) are recorded in the sample, not thrown.
std::vector<ScoreSample> run_inference(const LanguageModel& model, const InferenceMode& mode,
                                       std::span<const PreferenceExample> examples,
                                       std::span<const ConceptSpec> concepts);

/// Whitespace-delimited word count.
std::size_t adherence_short(std::string_view response);
/// Non-special token count under `vocab` (the unit used for the toy model).
std::size_t adherence_short(const Vocabulary& vocab, std::string_view response);

/// 1 + 9 * (1 - jargon words / words). Throws EvalError when there are no words.
double adherence_simple(std::string_view response, std::span<const std::string> jargon);

/// 100 * (x - base) / (train - base). Throws EvalError when train == base.
double gap_closure(double x, double base, double train);

/// 10 when the gold key appears and the response is not degenerate, 5 when it
/// appears but one token fills more than 25% of a response of 20+ tokens,
/// 1 when the key is absent.
double capability_score(std::string_view response, std::string_view gold_key);

/// Adherence under the concept's scorer.
double adherence(const ConceptSpec& spec, const Vocabulary& vocab, std::string_view response);

/// Fills adherence, capability and token counts for the ok samples.
void score_samples(std::vector<ScoreSample>& samples, const ConceptSpec& spec, const Vocabulary& vocab);

struct Stats {
  std::size_t n = 0;
  double mean = 0.0;
  double median = 0.0;
  double min = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

/// Throws EvalError on an empty input.
Stats summarize(std::span<const double> values);

struct ModeSummary {
  std::string mode;
  std::size_t missing = 0;
  Stats adherence;
  Stats capability;
  Stats tokens;
  std::optional<double> gap_mean;
  std::optional<double> gap_median;
  std::vector<double> adherence_values;  // for plots
};

struct EfficiencyEntry {
  std::string run;
  double minutes_per_epoch = 0.0;
  std::size_t trainable_parameters = 0;
  std::size_t epochs = 0;
};

struct EvalReport {
  std::string concept_name;
  std::string adherence_unit;
  std::optional<Stats> training_data;  // scores of the train chosen responses
  std::string base_mode = "baseline";
  std::vector<ModeSummary> modes;
  std::vector<EfficiencyEntry> efficiency;
};

/// Summaries per mode (in first-seen order). Gap closure is filled when a
/// base mode and training-data stats exist and their scores differ.
EvalReport build_report(std::string concept_name, std::string adherence_unit,
                        std::span<const ScoreSample> samples, std::optional<Stats> training_data,
                        std::vector<EfficiencyEntry> efficiency = {});

/// Stored raw means, e.g. a published table. `methods` maps label to score.
struct RawScoreTable {
  std::string concept_name;
  double base = 0.0;
  double training_data = 0.0;
  std::vector<std::pair<std::string, double>> methods;
};

RawScoreTable load_raw_scores(const std::filesystem::path& path);
/// Gap closure per method label.
std::vector<std::pair<std::string, double>> gap_closures(const RawScoreTable& table);

/// Writes results.json, results.csv, samples.csv and plots/*.svg into `dir`,
/// plus efficiency.json when timings are present. Timings vary run to run,
/// so they stay out of results.json.
void emit_report(const EvalReport& report, std::span<const ScoreSample> samples,
                 const std::filesystem::path& dir, const std::map<std::string, std::string>& metadata = {});

std::string report_json(const EvalReport& report, const std::map<std::string, std::string>& metadata = {});
std::string report_csv(const EvalReport& report);
std::string efficiency_json(std::span<const EfficiencyEntry> entries);
/// Box plot of per-mode distributions with mean markers.
std::string box_plot_svg(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& series);

}  // namespace neolab
