// neolab: command-line driver for the steering pipeline.
//
// Exit codes: 0 ok, 1 other failure, 2 bad usage or config, 3 missing or
// unreadable artifact, 4 bad data, 5 training diverged, 6 judge failure,
// 7 output exists and --force was not given.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "neolab/checkpoint.hpp"
#include "neolab/judge.hpp"
#include "neolab/pipeline.hpp"

using namespace neolab;

namespace {

struct CommonArgs {
  std::string config;
  std::string work_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool force = false;
  bool quiet = false;
};

RunConfig resolve_config(const CommonArgs& a) {
  std::string text = "{}";
  std::filesystem::path base;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw ConfigError("--config: cannot read " + a.config);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
    base = std::filesystem::path(a.config).parent_path();
  }
  std::vector<std::string> sets = a.overrides;
  if (a.seed) sets.push_back("seed=" + std::to_string(*a.seed));
  if (!a.work_dir.empty()) sets.push_back("work_dir=" + nlohmann::json(a.work_dir).dump());
  return parse_run_config(apply_overrides(text, sets), base);
}

StageOptions stage_options(const CommonArgs& a) {
  StageOptions o;
  o.force = a.force;
  o.log = a.quiet ? nullptr : &std::cerr;
  return o;
}

std::vector<std::string> concepts_or_all(const RunConfig& cfg, const std::vector<std::string>& requested) {
  if (!requested.empty()) {
    for (const auto& c : requested) cfg.concept_spec(c);
    return requested;
  }
  std::vector<std::string> out;
  for (const auto& c : cfg.selected()) out.push_back(c.name);
  return out;
}

int fail(int code, const std::string& category, const std::string& what) {
  std::cerr << "neolab: " << category << ": " << what << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neologism and LoRA steering of a toy language model"};
  app.require_subcommand(1);
  CommonArgs common;
  app.add_option("-c,--config", common.config, "Run config JSON");
  app.add_option("-w,--work-dir", common.work_dir, "Work directory (overrides work_dir)");
  app.add_option("--seed", common.seed, "Run seed (overrides seed)");
  app.add_option("--set", common.overrides, "Config override, key.path=value (repeatable)");
  app.add_flag("-f,--force", common.force, "Overwrite existing outputs");
  app.add_flag("-q,--quiet", common.quiet, "No progress output");

  std::vector<std::string> concepts;
  std::vector<std::string> modes;
  std::vector<std::string> raw_tables;
  std::string raw_out;
  bool use_judge = false;
  std::size_t max_steps = 0;

  auto* gen = app.add_subcommand("gen-data", "Build the preference datasets");
  auto* pre = app.add_subcommand("pretrain", "Pretrain the base model");
  auto* neo = app.add_subcommand("train-neologism", "Learn a neologism embedding");
  auto* lora = app.add_subcommand("train-lora", "Train LoRA adapters on the same data");
  auto* sv = app.add_subcommand("selfverb", "Questionnaire, synonyms, novel words and modifier probes");
  auto* ev = app.add_subcommand("eval", "Generate and score held-out responses");
  auto* rep = app.add_subcommand("report", "Summarize eval results or stored raw scores");
  auto* pipe = app.add_subcommand("pipeline", "Run every stage in order");
  auto* show = app.add_subcommand("show-config", "Print the resolved config and its hash");
  auto* count = app.add_subcommand("count-params", "Trainable parameter counts for the configured dims");

  for (auto* sub : {neo, lora, sv, ev}) {
    sub->add_option("--concept", concepts, "Concept name (repeatable; default: all selected)")->delimiter(',');
  }
  for (auto* sub : {neo, lora}) sub->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
  ev->add_option("--mode", modes, "baseline, neologism, lora, datagen_prompting, selfverb_prompting, combined")
      ->delimiter(',');
  ev->add_flag("--judge", use_judge, "Capability scores from the external judge (JUDGE_* env vars)");
  rep->add_option("--raw", raw_tables, "Raw score table JSON (repeatable)")->check(CLI::ExistingFile);
  rep->add_option("--out", raw_out, "Write the raw-table report here as well");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (rep->parsed() && !raw_tables.empty()) {
      std::vector<std::filesystem::path> paths(raw_tables.begin(), raw_tables.end());
      const std::string text = raw_report(paths);
      std::cout << text;
      if (!raw_out.empty()) {
        if (std::filesystem::exists(raw_out) && !common.force) {
          throw ArtifactExists(raw_out + " already exists (pass --force to overwrite)");
        }
        std::ofstream(raw_out) << text;
      }
      return 0;
    }

    const RunConfig cfg = resolve_config(common);
    StageOptions opts = stage_options(common);
    if (count->parsed()) {
      std::cout << "neologism " << neologism_parameter_count(cfg.model) << "\n"
                << "lora_per_rank " << lora_parameter_count(cfg.model, 1) << "\n"
                << "lora_rank_" << cfg.lora.rank << " " << lora_parameter_count(cfg.model, cfg.lora.rank) << "\n";
    } else if (show->parsed()) {
      std::cout << run_config_json(cfg) << "\nconfig_hash " << config_hash(cfg) << "\n";
    } else if (gen->parsed()) {
      stage_gen_data(cfg, opts);
    } else if (pre->parsed()) {
      stage_pretrain(cfg, opts);
    } else if (neo->parsed()) {
      for (const auto& c : concepts_or_all(cfg, concepts)) stage_train_neologism(cfg, c, opts, max_steps);
    } else if (lora->parsed()) {
      for (const auto& c : concepts_or_all(cfg, concepts)) stage_train_lora(cfg, c, opts, max_steps);
    } else if (sv->parsed()) {
      for (const auto& c : concepts_or_all(cfg, concepts)) stage_selfverb(cfg, c, opts);
    } else if (ev->parsed()) {
      opts.use_judge = use_judge;
      const auto m = modes.empty() ? default_eval_modes(cfg) : modes;
      for (const auto& c : concepts_or_all(cfg, concepts)) {
        EvalReport r = stage_eval(cfg, c, m, opts);
        std::cout << report_csv(r);
      }
    } else if (rep->parsed()) {
      std::cout << stage_report(cfg, opts);
    } else if (pipe->parsed()) {
      run_pipeline(cfg, opts);
      std::ifstream in(Workspace{cfg.work_dir}.root / "report.csv");
      std::cout << in.rdbuf();
    }
    return 0;
  } catch (const ConfigError& e) {
    return fail(2, "config error", e.what());
  } catch (const MissingArtifact& e) {
    return fail(3, "missing artifact", e.what());
  } catch (const CheckpointError& e) {
    return fail(3, "bad artifact", e.what());
  } catch (const DataError& e) {
    return fail(4, "data error", e.what());
  } catch (const TrainingDiverged& e) {
    return fail(5, "training diverged", e.what());
  } catch (const JudgeError& e) {
    return fail(6, "judge error", e.what());
  } catch (const ArtifactExists& e) {
    return fail(7, "refusing to overwrite", e.what());
  } catch (const std::exception& e) {
    return fail(1, "error", e.what());
  }
}
