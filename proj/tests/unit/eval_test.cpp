#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "neolab/eval.hpp"
#include "neolab/steering.hpp"
#include "test_util.hpp"

using namespace neolab;
using namespace neolab::testing;

namespace {

double oracle_gap(double x, double base, double train) { return (x - base) / (train - base) * 100.0; }

std::vector<PreferenceExample> tiny_examples() {
  std::vector<PreferenceExample> out;
  for (const char* q : {"what is the sun", "what is rain", "what is the cat"}) {
    PreferenceExample ex;
    ex.base_prompt = q;
    ex.prompt = std::string(q) + " Give me a ~short answer.";
    ex.chosen = "hot";
    ex.rejected = "the sun is hot";
    ex.gold_key = "hot";
    out.push_back(ex);
  }
  return out;
}

}  // namespace

TEST(GapClosure, PublishedShortAndSimpleRows) {
  EXPECT_NEAR(gap_closure(53.0, 303.1, 41.2), oracle_gap(53.0, 303.1, 41.2), 1e-12);
  EXPECT_NEAR(gap_closure(53.0, 303.1, 41.2), 95.5, 1.0);
  EXPECT_NEAR(gap_closure(346.3, 303.1, 41.2), -16.5, 1.0);
  EXPECT_NEAR(gap_closure(6.1, 3.0, 7.5), 69.2, 1.0);
}

TEST(GapClosure, EndpointsAndErrors) {
  EXPECT_EQ(gap_closure(303.1, 303.1, 41.2), 0.0);
  EXPECT_EQ(gap_closure(41.2, 303.1, 41.2), 100.0);
  EXPECT_THROW(gap_closure(1.0, 2.0, 2.0), EvalError);
  EXPECT_THROW(gap_closure(NAN, 2.0, 3.0), EvalError);
}

TEST(GapClosure, AffineInvariance) {
  Rng rng(17);
  std::uniform_real_distribution<double> d(-100.0, 100.0);
  for (int i = 0; i < 500; ++i) {
    double x = d(rng), b = d(rng), t = d(rng), a = d(rng), c = d(rng);
    if (std::abs(t - b) < 1e-3 || std::abs(a) < 1e-3) continue;
    EXPECT_NEAR(gap_closure(a * x + c, a * b + c, a * t + c), gap_closure(x, b, t),
                1e-9 * std::max(1.0, std::abs(gap_closure(x, b, t))));
  }
}

TEST(Adherence, ShortCounts) {
  EXPECT_EQ(adherence_short(""), 0u);
  EXPECT_EQ(adherence_short("a b c"), 3u);
  EXPECT_EQ(adherence_short("  a\tb \n c "), 3u);
  Vocabulary v = small_vocab();
  EXPECT_EQ(adherence_short(v, "the sun is hot."), 5u);
}

TEST(Adherence, SimpleLinearMap) {
  std::vector<std::string> jargon{"sun", "rain"};
  EXPECT_DOUBLE_EQ(adherence_simple("the cat is red", jargon), 10.0);
  EXPECT_DOUBLE_EQ(adherence_simple("sun rain", jargon), 1.0);
  EXPECT_DOUBLE_EQ(adherence_simple("sun is", jargon), 5.5);
  EXPECT_THROW(adherence_simple("", jargon), EvalError);
  EXPECT_THROW(adherence_simple(". , !", jargon), EvalError);
}

TEST(Adherence, SimpleDecreasesWithJargon) {
  std::vector<std::string> jargon{"sun"};
  double prev = 11.0;
  for (int k = 0; k <= 10; ++k) {
    std::string text;
    for (int i = 0; i < 10; ++i) text += i < k ? "sun " : "cat ";
    double s = adherence_simple(text, jargon);
    EXPECT_LT(s, prev);
    prev = s;
  }
}

TEST(Capability, Rules) {
  EXPECT_EQ(capability_score("The owl lives in the tree.", "tree"), 10.0);
  EXPECT_EQ(capability_score("The owl lives in the barn.", "tree"), 1.0);
  std::string degenerate = "tree";
  for (int i = 0; i < 29; ++i) degenerate += " the";
  for (int i = 0; i < 10; ++i) degenerate += " w" + std::to_string(i);
  ASSERT_EQ(split_pieces(degenerate).size(), 40u);
  EXPECT_EQ(capability_score(degenerate, "tree"), 5.0);
  EXPECT_EQ(capability_score("treetop house", "tree"), 1.0);
}

TEST(Modes, PromptConstruction) {
  auto concepts = default_concepts();
  InferenceMode base;
  EXPECT_EQ(mode_prompt(base, "What is rain?", concepts), "What is rain?");
  InferenceMode lora{ModeKind::kLora};
  EXPECT_EQ(mode_prompt(lora, "What is rain?", concepts), "What is rain?");
  InferenceMode neo{ModeKind::kNeologism, {"short"}};
  EXPECT_EQ(mode_prompt(neo, "What is rain?", concepts), "What is rain? Give me a ~short answer.");
  InferenceMode both{ModeKind::kNeologism, {"short", "simple"}};
  EXPECT_EQ(mode_prompt(both, "Q", concepts), "Q Give me a ~short ~simple answer.");
  EXPECT_EQ(both.label(), "neologism:short+simple");
  InferenceMode dg{ModeKind::kDatagenPrompting};
  dg.concept_name = "short";
  EXPECT_EQ(mode_prompt(dg, "What is rain?", concepts).rfind("Answer the question concisely in under 50 words", 0), 0u);
  InferenceMode sv{ModeKind::kSelfverbPrompting};
  sv.concept_name = "short";
  EXPECT_THROW(mode_prompt(sv, "Q", concepts), EvalError);
  sv.verbalization = "Answer briefly.";
  EXPECT_EQ(mode_prompt(sv, "Q", concepts), "Answer briefly. Q");
  EXPECT_EQ(parse_mode_kind("datagen_prompting"), ModeKind::kDatagenPrompting);
  EXPECT_THROW(parse_mode_kind("nope"), EvalError);
}

TEST(Inference, DeterministicAndPrerequisites) {
  LanguageModel model(small_vocab(), tiny_dims(), 3);
  auto examples = tiny_examples();
  auto concepts = default_concepts();
  InferenceMode mode;
  mode.generation.max_new_tokens = 6;
  mode.generation.seed = 11;
  auto a = run_inference(model, mode, examples, concepts);
  auto b = run_inference(model, mode, examples, concepts);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].response, b[i].response);
    EXPECT_EQ(a[i].prompt, examples[i].base_prompt);
  }
  InferenceMode neo{ModeKind::kNeologism, {"short"}};
  EXPECT_THROW(run_inference(model, neo, examples, concepts), EvalError);
  InferenceMode lora{ModeKind::kLora};
  EXPECT_THROW(run_inference(model, lora, examples, concepts), EvalError);
}

TEST(Inference, ContextOverflowIsRecorded) {
  LanguageModel model(small_vocab(), tiny_dims(), 3);
  auto examples = tiny_examples();
  examples[1].base_prompt.clear();
  for (int i = 0; i < 40; ++i) examples[1].base_prompt += "the sun ";
  InferenceMode mode;
  mode.generation.max_new_tokens = 4;
  auto out = run_inference(model, mode, examples, default_concepts());
  EXPECT_TRUE(out[0].ok);
  EXPECT_FALSE(out[1].ok);
  EXPECT_NE(out[1].error.find("context"), std::string::npos);
}

TEST(Stats, MeanMedianQuartiles) {
  std::vector<double> v{4, 1, 3, 2};
  Stats s = summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.min, 1);
  EXPECT_DOUBLE_EQ(s.max, 4);
  std::vector<double> odd{5, 1, 9};
  EXPECT_DOUBLE_EQ(summarize(odd).median, 5);
  EXPECT_THROW(summarize(std::vector<double>{}), EvalError);
}

namespace {

std::vector<ScoreSample> synthetic_samples() {
  std::vector<ScoreSample> s;
  auto add = [&](const std::string& mode, std::vector<double> values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      ScoreSample x;
      x.id = i;
      x.mode = mode;
      x.adherence = values[i];
      x.capability = 10;
      x.tokens = static_cast<std::size_t>(values[i]);
      x.response = "r";
      s.push_back(x);
    }
  };
  add("baseline", {50, 52, 54, 60});
  add("neologism:short", {8, 9, 10, 30});
  return s;
}

}  // namespace

TEST(Report, GapClosureOnlyWithBaseAndTraining) {
  auto samples = synthetic_samples();
  std::vector<ScoreSample> only_neo(samples.begin() + 4, samples.end());
  EvalReport single = build_report("short", "tokens", only_neo, Stats{4, 7, 7, 6, 6.5, 7.5, 8});
  EXPECT_FALSE(single.modes[0].gap_mean.has_value());
  EvalReport no_train = build_report("short", "tokens", samples, std::nullopt);
  EXPECT_FALSE(no_train.modes[1].gap_mean.has_value());

  EvalReport r = build_report("short", "tokens", samples, Stats{4, 7, 7, 6, 6.5, 7.5, 8});
  ASSERT_EQ(r.modes.size(), 2u);
  EXPECT_DOUBLE_EQ(*r.modes[0].gap_mean, 0.0);
  EXPECT_NEAR(*r.modes[1].gap_mean, oracle_gap(14.25, 54.0, 7.0), 1e-12);
  EXPECT_NEAR(*r.modes[1].gap_median, oracle_gap(9.5, 53.0, 7.0), 1e-12);
}

TEST(Report, JsonAndCsvCarryTheSameNumbers) {
  auto samples = synthetic_samples();
  samples[2].ok = false;
  EvalReport r = build_report("short", "tokens", samples, Stats{4, 7, 7, 6, 6.5, 7.5, 8});
  auto j = nlohmann::json::parse(report_json(r));
  std::istringstream csv(report_csv(r));
  std::string line;
  std::getline(csv, line);
  for (const auto& m : j["modes"]) {
    std::getline(csv, line);
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    ASSERT_GE(f.size(), 8u);
    EXPECT_EQ(f[1], m["mode"].get<std::string>());
    EXPECT_NEAR(std::stod(f[4]), m["adherence"]["mean"].get<double>(), 1e-8);
    EXPECT_NEAR(std::stod(f[5]), m["adherence"]["median"].get<double>(), 1e-8);
    EXPECT_NEAR(std::stod(f[6]), m["gap_closure_mean"].get<double>(), 1e-6);
    EXPECT_EQ(std::stoul(f[3]), m["missing"].get<std::size_t>());
  }
  EXPECT_EQ(j["modes"][0]["missing"], 1);
}

TEST(Report, TableRowsFromStoredMeans) {
  auto dir = std::filesystem::temp_directory_path() / "neolab_table_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "short.json")
      << R"({"concept":"short","base":303.1,"training_data":41.2,)"
      << R"("methods":{"neologism":53.0,"lora":346.3,"datagen_prompting":54.7}})";
  auto rows = gap_closures(load_raw_scores(dir / "short.json"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].first, "neologism");
  EXPECT_NEAR(rows[0].second, 95.5, 1.0);
  EXPECT_NEAR(rows[1].second, -16.5, 1.0);
  EXPECT_NEAR(rows[2].second, 94.8, 1.0);
  std::filesystem::remove_all(dir);
}

TEST(Report, EmitWritesEveryArtifact) {
  auto samples = synthetic_samples();
  EvalReport r = build_report("short", "tokens", samples, Stats{4, 7, 7, 6, 6.5, 7.5, 8},
                              {{"neologism:short", 0.2, 64, 5}});
  auto dir = std::filesystem::temp_directory_path() / "neolab_emit_test";
  std::filesystem::remove_all(dir);
  emit_report(r, samples, dir, {{"seed", "7"}});
  for (auto f : {"results.json", "results.csv", "samples.csv", "efficiency.json", "plots/short_adherence.svg",
                 "plots/short_capability.svg"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  std::ifstream svg(dir / "plots/short_adherence.svg");
  std::string text((std::istreambuf_iterator<char>(svg)), {});
  EXPECT_NE(text.find("<svg"), std::string::npos);
  EXPECT_NE(text.find("neologism:short"), std::string::npos);
  EXPECT_THROW(emit_report(EvalReport{}, samples, dir), EvalError);
  EXPECT_THROW(build_report("short", "tokens", {}, std::nullopt), EvalError);
  std::filesystem::remove_all(dir);
}

TEST(Efficiency, NeologismEpochIsFasterThanLora) {
  Vocabulary v = small_vocab();
  ModelDims dims;  // full toy dims
  LanguageModel model(v, dims, 5);
  TokenId neo = model.extend_vocabulary("~short", "short");
  std::vector<EncodedPair> pairs;
  for (int i = 0; i < 20; ++i) {
    EncodedPair p;
    p.prompt = random_ids(12, v.size(), 100 + i);
    p.prompt.push_back(neo);
    p.chosen = random_ids(6, v.size(), 200 + i);
    p.rejected = random_ids(40, v.size(), 300 + i);
    pairs.push_back(p);
  }
  ReferenceCache refs = ReferenceCache::build(model, pairs);
  TrainConfig cfg;
  cfg.epochs = 2;
  ConceptSpec spec;
  spec.name = "short";
  // Both runs see the same token sequences, so this compares cost per token.
  TrainReport neo_report, lora_report;
  LanguageModel m1 = model.clone();
  train_neologism(m1, pairs, refs, spec, cfg, &neo_report);
  train_lora(model, pairs, refs, LoraConfig{}, cfg, &lora_report);
  EXPECT_LT(neo_report.minutes_per_epoch(), lora_report.minutes_per_epoch());
}
