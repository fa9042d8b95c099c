#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "neolab/autograd.hpp"
#include "neolab/numeric.hpp"
#include "neolab/ops.hpp"
#include "neolab/steering.hpp"
#include "test_util.hpp"

using namespace neolab;
using namespace neolab::testing;

namespace {

// -log sigma(x), written out directly.
double neg_log_sigmoid(double x) { return std::log(1.0 + std::exp(-x)); }

struct Fixture {
  LanguageModel model;
  TokenId neo;
  std::vector<EncodedPair> pairs;
};

Fixture make_fixture(std::size_t n_pairs) {
  Fixture f{LanguageModel(small_vocab(), tiny_dims(), 21), 0, {}};
  f.neo = f.model.extend_vocabulary("~short", "short");
  const auto& v = f.model.vocab();
  const char* subjects[] = {"the sun", "the cat", "the dog", "rain", "the clouds"};
  const char* short_answers[] = {"hot", "red", "blue", "green", "bright"};
  for (std::size_t i = 0; i < n_pairs; ++i) {
    EncodedPair p;
    p.prompt = tokenize(v, std::string("what is ") + subjects[i % 5] + " give me a ~short answer");
    p.chosen = tokenize(v, short_answers[i % 5]);
    p.chosen.push_back(v.eos());
    p.rejected = tokenize(v, std::string(subjects[i % 5]) + " is hot and bright and the sun falls from clouds");
    p.rejected.push_back(v.eos());
    f.pairs.push_back(std::move(p));
  }
  return f;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(ApoUp, AtReferenceBothTermsAreLn2) {
  ApoTerms t = apo_up_loss(-7.5, -3.25, -7.5, -3.25, 0.2);
  EXPECT_NEAR(t.t1, std::log(2.0), 1e-12);
  EXPECT_NEAR(t.t2, std::log(2.0), 1e-12);
  EXPECT_NEAR(t.loss, 2.0 * std::log(2.0), 1e-12);
}

TEST(ApoUp, WorkedValues) {
  const double lc = -10, lr = -20, lc0 = -12, lr0 = -18, beta = 0.2;
  const double t1 = neg_log_sigmoid(beta * ((lc - lr) - (lc0 - lr0)));
  const double t2 = neg_log_sigmoid(beta * (lc - lc0));
  ApoTerms t = apo_up_loss(lc, lr, lc0, lr0, beta);
  EXPECT_NEAR(t.t1, t1, 1e-12);
  EXPECT_NEAR(t.t2, t2, 1e-12);
  EXPECT_NEAR(t.loss, t1 + t2, 1e-12);
  EXPECT_NEAR(t.t1, 0.3711, 1e-4);
  EXPECT_NEAR(t.t2, 0.5130, 1e-4);
  EXPECT_NEAR(t.loss, 0.8841, 1e-4);
}

TEST(ApoUp, RejectsBadInputs) {
  EXPECT_THROW(apo_up_loss(NAN, -1, -1, -1), std::invalid_argument);
  EXPECT_THROW(apo_up_loss(-1, -INFINITY, -1, -1), std::invalid_argument);
  EXPECT_THROW(apo_up_loss(0.5, -1, -1, -1), std::invalid_argument);
  EXPECT_THROW(apo_up_loss(-1, -1, -1, -1, 0.0), std::invalid_argument);
}

TEST(ApoUp, MonotoneInChosenAndRejected) {
  Rng rng(5);
  std::uniform_real_distribution<double> d(-60.0, -0.1);
  for (int trial = 0; trial < 200; ++trial) {
    double lc = d(rng), lr = d(rng), lc0 = d(rng), lr0 = d(rng);
    double up = std::min(-1e-3, lc + 0.5);
    if (up <= lc) continue;
    EXPECT_LT(apo_up_loss(up, lr, lc0, lr0).loss, apo_up_loss(lc, lr, lc0, lr0).loss);
    EXPECT_LT(apo_up_loss(lc, lr - 0.5, lc0, lr0).loss, apo_up_loss(lc, lr, lc0, lr0).loss);
    EXPECT_GT(apo_up_loss(lc, lr, lc0, lr0).loss, 0.0);
  }
}

TEST(ApoUp, TensorFormMatchesScalarAndGradient) {
  const double lc0 = -12, lr0 = -18, beta = 0.2;
  Tape tape;
  TapeScope scope(tape);
  Tensor lc = Tensor::scalar(-10, true);
  Tensor lr = Tensor::scalar(-20, true);
  ApoTensorTerms t = apo_up_loss(lc, lr, lc0, lr0, beta);
  ApoTerms s = apo_up_loss(-10, -20, lc0, lr0, beta);
  EXPECT_NEAR(t.loss.item(), s.loss, 1e-14);
  tape.backward(t.loss);
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const double m1 = beta * ((-10 + 20) - (lc0 - lr0));
  const double m2 = beta * (-10 - lc0);
  EXPECT_NEAR(lc.grad()[0], -beta * (1 - sig(m1)) - beta * (1 - sig(m2)), 1e-12);
  EXPECT_NEAR(lr.grad()[0], beta * (1 - sig(m1)), 1e-12);
}

TEST(ApoUp, FiniteDifferenceOnChosen) {
  auto f = [](const Tensor& x) {
    return apo_up_loss(ops::scale(x, 1.0), Tensor::scalar(-20.0), -12.0, -18.0, 0.2).loss;
  };
  GradCheckResult r = finite_difference_check(f, Tensor::scalar(-9.0));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Accounting, MistralSizedDims) {
  ModelDims big;
  big.d_model = 4096;
  big.n_layers = 32;
  big.n_heads = 32;
  big.n_kv_heads = 8;
  EXPECT_EQ(neologism_parameter_count(big), 4096u);
  EXPECT_EQ(lora_parameter_count(big, 8), 3407872u);
}

TEST(Accounting, ToyCountsMatchAdapters) {
  LoraConfig cfg;
  LoraAdapterSet set(tiny_dims(), cfg);
  EXPECT_EQ(set.parameter_count(), lora_parameter_count(tiny_dims(), 8));
  EXPECT_EQ(set.parameter_count(), 2u * 8u * (32u + 32u));
}

TEST(Lora, FreshAdaptersLeaveLogitsUnchanged) {
  Fixture f = make_fixture(1);
  LoraAdapterSet set(f.model.dims(), LoraConfig{});
  auto ids = random_ids(20, f.model.vocab().size(), 3);
  Tensor base = f.model.forward(ids);
  Tensor adapted = f.model.forward(ids, ForwardOptions{&set, false});
  EXPECT_TRUE(bit_equal(base, adapted));
}

TEST(Lora, MergedWeightsMatchFactoredPath) {
  Fixture f = make_fixture(1);
  LoraConfig cfg;
  cfg.seed = 4;
  LoraAdapterSet set(f.model.dims(), cfg);
  std::uint64_t seed = 100;
  for (auto& p : set.parameters()) {
    Tensor r = random_tensor(p.tensor.shape(), seed++, -0.2, 0.2);
    std::copy(r.data().begin(), r.data().end(), p.tensor.mutable_data().begin());
  }
  LanguageModel merged = set.merged_into(f.model);
  auto ids = random_ids(24, f.model.vocab().size(), 8);
  Tensor a = f.model.forward(ids, ForwardOptions{&set, false});
  Tensor b = merged.forward(ids);
  EXPECT_LT(max_abs_diff(a.data(), b.data()), 1e-10);
  EXPECT_GT(max_abs_diff(a.data(), f.model.forward(ids).data()), 1e-6);
}

TEST(Lora, SaveLoadIsBitExact) {
  Fixture f = make_fixture(1);
  LoraConfig cfg;
  cfg.seed = 9;
  LoraAdapterSet set(f.model.dims(), cfg);
  auto dir = std::filesystem::temp_directory_path() / "neolab_lora_test";
  std::filesystem::create_directories(dir);
  set.save(dir / "lora.json");
  LoraAdapterSet back = LoraAdapterSet::load(dir / "lora.json");
  auto pa = set.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(pa[i].tensor, pb[i].tensor));
  {
    std::fstream blob(dir / "lora.json.bin", std::ios::in | std::ios::out | std::ios::binary);
    blob.seekp(3);
    blob.put('\x7f');
  }
  EXPECT_THROW(LoraAdapterSet::load(dir / "lora.json"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Lora, RejectsBadConfig) {
  LoraConfig cfg;
  cfg.rank = 0;
  EXPECT_THROW(LoraAdapterSet(tiny_dims(), cfg), std::invalid_argument);
  cfg = LoraConfig{};
  cfg.dropout = 1.0;
  EXPECT_THROW(LoraAdapterSet(tiny_dims(), cfg), std::invalid_argument);
}

TEST(Reference, CacheIsStableAndDetectsDrift) {
  Fixture f = make_fixture(6);
  LanguageModel theta0 = f.model.clone();
  ReferenceCache refs = ReferenceCache::build(theta0, f.pairs);
  const std::string sum = refs.checksum();
  std::vector<std::size_t> idx{0, 3, 5};
  EXPECT_TRUE(refs.verify(theta0, f.pairs, idx));

  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.accumulation = 2;
  cfg.epochs = 2;
  ConceptSpec spec;
  spec.name = "short";
  train_neologism(f.model, f.pairs, refs, spec, cfg);
  EXPECT_EQ(refs.checksum(), sum);
  EXPECT_TRUE(refs.verify(theta0, f.pairs, idx));
  EXPECT_FALSE(refs.verify(f.model, f.pairs, idx));
}

TEST(Trainer, NeologismTouchesOnlyItsEmbedding) {
  Fixture f = make_fixture(10);
  ReferenceCache refs = ReferenceCache::build(f.model, f.pairs);
  FreezeAudit audit(f.model);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.accumulation = 5;
  cfg.epochs = 3;
  ConceptSpec spec;
  spec.name = "short";
  TrainReport report;
  NeologismArtifact art = train_neologism(f.model, f.pairs, refs, spec, cfg, &report);
  EXPECT_EQ(audit.changed(f.model), std::vector<std::string>{"extension.~short"});
  EXPECT_EQ(report.trainable_parameters, tiny_dims().d_model);
  EXPECT_EQ(report.trace.size(), 6u);
  EXPECT_EQ(report.epoch_seconds.size(), 3u);
  EXPECT_NEAR(report.trace.front().loss, 2.0 * std::log(2.0), 1e-12);
  EXPECT_LT(report.trace.back().loss, report.trace.front().loss);
  EXPECT_EQ(art.embedding, values(f.model.extension_embedding(f.neo)));
}

TEST(Trainer, LoraLeavesModelUntouched) {
  Fixture f = make_fixture(10);
  for (auto& p : f.pairs) p.prompt.pop_back();  // LoRA prompts need no neologism
  ReferenceCache refs = ReferenceCache::build(f.model, f.pairs);
  FreezeAudit audit(f.model);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.accumulation = 5;
  cfg.epochs = 2;
  cfg.weight_decay = 0.01;
  TrainReport report;
  LoraAdapterSet set = train_lora(f.model, f.pairs, refs, LoraConfig{}, cfg, &report);
  EXPECT_TRUE(audit.changed(f.model).empty());
  EXPECT_EQ(report.trainable_parameters, set.parameter_count());
  EXPECT_NEAR(report.trace.front().loss, 2.0 * std::log(2.0), 1e-12);
  EXPECT_LT(report.trace.back().loss, report.trace.front().loss);
}

TEST(Trainer, AccumulationMatchesOneLargeBatch) {
  auto run = [](std::size_t batch, std::size_t acc) {
    Fixture f = make_fixture(10);
    ReferenceCache refs = ReferenceCache::build(f.model, f.pairs);
    TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.batch_size = batch;
    cfg.accumulation = acc;
    cfg.epochs = 3;
    ConceptSpec spec;
    spec.name = "short";
    TrainReport report;
    auto art = train_neologism(f.model, f.pairs, refs, spec, cfg, &report);
    return std::make_pair(art.embedding, report.trace);
  };
  auto [acc_emb, acc_trace] = run(1, 10);
  auto [big_emb, big_trace] = run(10, 1);
  Fixture f0 = make_fixture(1);
  auto init = values(f0.model.extension_embedding(f0.neo));
  double max_rel = 0.0;
  for (std::size_t i = 0; i < init.size(); ++i) {
    const double da = acc_emb[i] - init[i], db = big_emb[i] - init[i];
    max_rel = std::max(max_rel, std::abs(da - db) / std::max(std::abs(db), 1e-12));
  }
  EXPECT_LT(max_rel, 1e-10);
  ASSERT_EQ(acc_trace.size(), big_trace.size());
  for (std::size_t i = 0; i < acc_trace.size(); ++i) {
    EXPECT_NEAR(acc_trace[i].grad_norm, big_trace[i].grad_norm, 1e-12);
  }
}

TEST(Trainer, CachedPrefixesDoNotChangeTheRun) {
  Fixture a = make_fixture(10);
  Fixture b = make_fixture(10);
  ReferenceCache refs = ReferenceCache::build(a.model, a.pairs);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 2;
  ConceptSpec spec;
  spec.name = "short";
  TrainReport cached;
  NeologismArtifact art = train_neologism(a.model, a.pairs, refs, spec, cfg, &cached);

  for (auto& p : b.model.parameters()) p.tensor.set_requires_grad(false);
  TrainTarget plain;
  plain.params.push_back(b.model.extension_embedding(b.neo));
  TrainReport full = train_preference(b.model, plain, b.pairs, refs, cfg);
  EXPECT_EQ(art.embedding, values(b.model.extension_embedding(b.neo)));
  ASSERT_EQ(cached.trace.size(), full.trace.size());
  for (std::size_t i = 0; i < full.trace.size(); ++i) EXPECT_EQ(cached.trace[i].loss, full.trace[i].loss);
}

TEST(Trainer, PartialFinalStepAndMismatchedK) {
  Fixture f = make_fixture(25);
  ReferenceCache refs = ReferenceCache::build(f.model, f.pairs);
  TrainConfig cfg;
  cfg.epochs = 1;
  ConceptSpec spec;
  spec.name = "short";
  TrainReport report;
  train_neologism(f.model, f.pairs, refs, spec, cfg, &report);
  EXPECT_EQ(report.trace.size(), 3u);

  TrainTarget target;
  target.params.push_back(f.model.extension_embedding(f.neo));
  AdamW opt(target.params, AdamWConfig{});
  std::vector<std::vector<std::size_t>> micro{{0}, {1}};
  EXPECT_THROW(accumulate_and_step(f.model, target, f.pairs, refs, micro, 3, opt, cfg), std::invalid_argument);
}

TEST(Trainer, ClipBoundsTheUpdateInput) {
  Fixture f = make_fixture(10);
  ReferenceCache refs = ReferenceCache::build(f.model, f.pairs);
  LanguageModel shifted = f.model.clone();
  auto e = shifted.extension_embedding(f.neo).mutable_data();
  for (double& x : e) x += 3.0;  // large gradients away from theta0
  Tensor p = shifted.extension_embedding(f.neo);
  p.set_requires_grad(true);
  TrainTarget target{{p}, {}};
  TrainConfig cfg;
  cfg.clip_norm = 1e-3;
  AdamW opt(target.params, AdamWConfig{1e-4, 0.9, 0.999, 1e-8, 0.0});
  std::vector<std::vector<std::size_t>> micro;
  for (std::size_t i = 0; i < 10; ++i) micro.push_back({i});
  StepRecord rec = accumulate_and_step(shifted, target, f.pairs, refs, micro, 10, opt, cfg);
  EXPECT_GT(rec.grad_norm, cfg.clip_norm);
  EXPECT_FALSE(p.has_grad() && global_norm(std::vector<Tensor>{p}) > 0.0);
}

TEST(Trainer, NeologismPromptMustContainToken) {
  Fixture f = make_fixture(10);
  auto& pr = f.pairs[4].prompt;
  pr.erase(std::find(pr.begin(), pr.end(), f.neo));
  ReferenceCache refs = ReferenceCache::build(f.model, f.pairs);
  ConceptSpec spec;
  spec.name = "short";
  EXPECT_THROW(train_neologism(f.model, f.pairs, refs, spec, TrainConfig{}), DataError);
  ConceptSpec missing;
  missing.name = "loud";
  EXPECT_THROW(train_neologism(f.model, f.pairs, refs, missing, TrainConfig{}), std::invalid_argument);
}

TEST(Trainer, ConfigValidation) {
  TrainConfig cfg;
  cfg.accumulation = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Artifacts, NeologismRoundTripAndInstall) {
  Fixture f = make_fixture(10);
  ReferenceCache refs = ReferenceCache::build(f.model, f.pairs);
  LanguageModel base(small_vocab(), tiny_dims(), 21);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 1;
  ConceptSpec spec;
  spec.name = "short";
  spec.init_from = "short";
  NeologismArtifact art = train_neologism(f.model, f.pairs, refs, spec, cfg);

  auto dir = std::filesystem::temp_directory_path() / "neolab_neo_test";
  std::filesystem::create_directories(dir);
  art.save(dir / "short.json");
  NeologismArtifact back = NeologismArtifact::load(dir / "short.json");
  EXPECT_EQ(back.embedding, art.embedding);
  EXPECT_EQ(back.surface, "~short");

  TokenId id = install_neologism(base, back);
  EXPECT_EQ(id, f.neo);
  Tensor a = base.forward(f.pairs[0].prompt);
  Tensor b = f.model.forward(f.pairs[0].prompt);
  EXPECT_TRUE(bit_equal(a, b));

  std::string text;
  {
    std::ifstream in(dir / "short.json");
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto pos = text.find("\"embedding\": [") + 20;
  text[pos] = text[pos] == '1' ? '2' : '1';
  std::ofstream(dir / "short.json") << text;
  EXPECT_THROW(NeologismArtifact::load(dir / "short.json"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Artifacts, TraceCsvHasHeaderAndRows) {
  std::vector<StepRecord> trace{{1, 1, 0.5, 0.6, 1.1, 2.0}, {2, 1, 0.4, 0.5, 0.9, 1.5}};
  auto path = std::filesystem::temp_directory_path() / "neolab_trace.csv";
  write_trace_csv(path, trace);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,epoch,t1,t2,loss,grad_norm");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2u);
  std::filesystem::remove(path);
}
