#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "neolab/autograd.hpp"
#include "neolab/checkpoint.hpp"
#include "neolab/generation.hpp"
#include "neolab/ops.hpp"
#include "neolab/pretrain.hpp"
#include "test_util.hpp"

namespace neolab {
namespace {

using testing::random_ids;
using testing::small_vocab;
using testing::tiny_dims;

LanguageModel tiny_model(std::uint64_t seed = 1) { return LanguageModel(small_vocab(), tiny_dims(), seed); }

TEST(SequenceLogprob, UniformFourWayDistribution) {
  Tensor logp = ops::log_softmax_rows(Tensor::zeros({3, 4}));
  std::vector<std::int32_t> y{0, 3, 2};
  EXPECT_NEAR(ops::sum(ops::pick(logp, y)).item(), -4.1588830833596715, 1e-12);
}

TEST(SequenceLogprob, ZeroEmbeddingsGiveUniformModel) {
  auto m = tiny_model();
  for (double& e : m.token_embeddings().mutable_data()) e = 0.0;
  std::vector<TokenId> x{10, 11}, y{12, 13, 14};
  const double v = static_cast<double>(m.vocab().size());
  EXPECT_NEAR(sequence_logprob_value(m, x, y), 3.0 * std::log(1.0 / v), 1e-12);
}

TEST(SequenceLogprob, EmptyResponseIsZero) {
  auto m = tiny_model();
  std::vector<TokenId> x{10, 11};
  EXPECT_EQ(sequence_logprob_value(m, x, {}), 0.0);
}

// Independent oracle: one full forward pass per prefix, softmax by hand.
double per_step_oracle(const LanguageModel& m, const std::vector<TokenId>& x,
                       const std::vector<TokenId>& y) {
  std::vector<TokenId> seq{m.vocab().bos()};
  seq.insert(seq.end(), x.begin(), x.end());
  double total = 0.0;
  for (TokenId next : y) {
    auto logits = m.next_token_logits(seq);
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total += std::log(std::exp(logits[static_cast<std::size_t>(next)] - mx) / z);
    seq.push_back(next);
  }
  return total;
}

TEST(SequenceLogprob, MatchesPerStepOracle) {
  auto m = tiny_model(3);
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto x = random_ids(1 + s % 5, m.vocab().size(), s);
    auto y = random_ids(1 + (s * 3) % 9, m.vocab().size(), s + 100);
    const double batched = sequence_logprob_value(m, x, y);
    EXPECT_LE(batched, 0.0);
    EXPECT_NEAR(batched, per_step_oracle(m, x, y), 1e-10);
  }
}

TEST(SequenceLogprob, AdditiveOverConcatenation) {
  auto m = tiny_model(4);
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto x = random_ids(3, m.vocab().size(), s);
    auto y1 = random_ids(4, m.vocab().size(), s + 50);
    auto y2 = random_ids(5, m.vocab().size(), s + 90);
    std::vector<TokenId> y12 = y1, xy1 = x;
    y12.insert(y12.end(), y2.begin(), y2.end());
    xy1.insert(xy1.end(), y1.begin(), y1.end());
    EXPECT_NEAR(sequence_logprob_value(m, x, y12),
                sequence_logprob_value(m, x, y1) + sequence_logprob_value(m, xy1, y2), 1e-10);
  }
}

TEST(SequenceLogprob, ContextOverflowThrows) {
  auto m = tiny_model();
  auto x = random_ids(20, m.vocab().size(), 1);
  auto y = random_ids(13, m.vocab().size(), 2);
  EXPECT_THROW(sequence_logprob_value(m, x, y), ContextOverflow);
  y.pop_back();
  EXPECT_NO_THROW(sequence_logprob_value(m, x, y));
}

TEST(PrefixState, SuffixForwardMatchesFullForwardBitForBit) {
  auto m = tiny_model(4);
  TokenId neo = m.extend_vocabulary("~short", "short");
  auto ids = random_ids(20, m.vocab().size() - 1, 6);
  ids[9] = neo;
  PrefixState prefix = m.prefix_state(std::span<const TokenId>(ids).first(9));
  Tensor full = m.hidden(ids);
  Tensor tail = m.hidden(ids, {}, &prefix);
  ASSERT_EQ(tail.rows(), 11u);
  auto want = full.data().subspan(9 * full.cols());
  EXPECT_TRUE(std::equal(want.begin(), want.end(), tail.data().begin()));

  std::vector<TokenId> x(ids.begin() + 1, ids.begin() + 12), y(ids.begin() + 12, ids.end());
  std::vector<TokenId> head{m.vocab().bos()};
  head.insert(head.end(), x.begin(), x.begin() + 8);
  PrefixState p2 = m.prefix_state(head);
  EXPECT_EQ(sequence_logprob(m, x, y, {}, &p2).item(), sequence_logprob_value(m, x, y));
}

TEST(PrefixState, MismatchAndAdapterAreRejected) {
  auto m = tiny_model(4);
  auto ids = random_ids(10, m.vocab().size(), 7);
  PrefixState prefix = m.prefix_state(std::span<const TokenId>(ids).first(4));
  auto other = ids;
  other[2] = other[2] == 5 ? 6 : 5;
  EXPECT_THROW(m.hidden(other, {}, &prefix), std::invalid_argument);
  EXPECT_THROW(m.hidden(std::span<const TokenId>(ids).first(4), {}, &prefix), std::invalid_argument);
  struct NoAdapter : ProjectionAdapter {
    Tensor delta(std::size_t, Projection, const Tensor&, bool) const override { return {}; }
  } adapter;
  EXPECT_THROW(m.hidden(ids, ForwardOptions{&adapter, false}, &prefix), std::invalid_argument);
  std::vector<TokenId> x(ids.begin(), ids.begin() + 2), y(ids.begin() + 2, ids.end());
  EXPECT_THROW(sequence_logprob(m, x, y, {}, &prefix), std::invalid_argument);
}

TEST(ExtendVocabulary, ShapesAndInitCopy) {
  auto m = tiny_model();
  const std::size_t v0 = m.vocab().size();
  TokenId c = m.extend_vocabulary("~short", "general");
  EXPECT_EQ(m.vocab().size(), v0 + 1);
  Tensor e = m.embedding_matrix();
  EXPECT_EQ(e.shape(), (Shape{v0 + 1, m.dims().d_model}));
  auto logits = m.forward(std::vector<TokenId>{1, 10});
  EXPECT_EQ(logits.cols(), v0 + 1);
  const std::size_t d = m.dims().d_model;
  const auto g = static_cast<std::size_t>(m.vocab().id("general"));
  for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(e.at(static_cast<std::size_t>(c), k), e.at(g, k));
}

TEST(ExtendVocabulary, Errors) {
  auto m = tiny_model();
  EXPECT_THROW(m.extend_vocabulary("~x", "nonexistentword"), std::invalid_argument);
  EXPECT_THROW(m.extend_vocabulary("~x", "<eos>"), std::invalid_argument);
  m.extend_vocabulary("~x", "general");
  EXPECT_THROW(m.extend_vocabulary("~x", "general"), TokenizerError);
}

TEST(ExtendVocabulary, PreExistingLogitsBitIdentical) {
  auto m = tiny_model(9);
  const std::size_t v0 = m.vocab().size();
  std::vector<std::vector<TokenId>> contexts;
  std::vector<Tensor> before;
  for (std::uint64_t s = 0; s < 100; ++s) {
    contexts.push_back(random_ids(1 + s % 20, v0, s));
    NoGradScope ng;
    before.push_back(m.forward(contexts.back()));
  }
  m.extend_vocabulary("~short", "general");
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    NoGradScope ng;
    Tensor after = m.forward(contexts[i]);
    const std::size_t rows = after.rows();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < v0; ++c) ASSERT_EQ(after.at(r, c), before[i].at(r, c));
    }
    // Probabilities of old tokens rescale by one common factor per row.
    Tensor p0 = ops::softmax_rows(before[i]);
    Tensor p1 = ops::softmax_rows(after);
    for (std::size_t r = 0; r < rows; ++r) {
      const double ratio = p1.at(r, 0) / p0.at(r, 0);
      EXPECT_LT(ratio, 1.0);
      for (std::size_t c = 1; c < v0; ++c) EXPECT_NEAR(p1.at(r, c) / p0.at(r, c), ratio, 1e-12);
    }
  }
}

TEST(Generate, GreedyIsDeterministic) {
  auto m = tiny_model(5);
  std::vector<TokenId> prompt{10, 11, 12};
  GenerationConfig cfg{0.0, 10, 1};
  auto a = generate(m, prompt, cfg);
  cfg.seed = 99;
  auto b = generate(m, prompt, cfg);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST(Generate, SeededSamplingReproduces) {
  auto m = tiny_model(5);
  std::vector<TokenId> prompt{10, 11, 12};
  GenerationConfig cfg{0.3, 10, 42};
  EXPECT_EQ(generate(m, prompt, cfg).tokens, generate(m, prompt, cfg).tokens);
}

TEST(Generate, TokenCapOfOne) {
  auto m = tiny_model(5);
  std::vector<TokenId> prompt{10, 11, 12};
  auto r = generate(m, prompt, GenerationConfig{0.0, 1, 0});
  EXPECT_EQ(r.tokens.size() + (r.hit_eos ? 1 : 0), 1u);
  EXPECT_EQ(r.tokens.size(), 1u);
}

TEST(Generate, ContextHandling) {
  auto m = tiny_model(5);
  auto prompt = random_ids(40, m.vocab().size(), 3);
  EXPECT_THROW(generate(m, prompt, GenerationConfig{}), ContextOverflow);
  prompt.resize(30);
  // Greedy on an untrained model rarely emits EOS; the context fills first.
  auto r = generate(m, prompt, GenerationConfig{0.0, 100, 0});
  if (!r.hit_eos) {
    EXPECT_TRUE(r.truncated);
    EXPECT_EQ(r.tokens.size(), m.dims().context_length - 31);
  }
  EXPECT_THROW(GenerationConfig({-1.0, 1, 0}).validate(), std::invalid_argument);
}

TEST(Generate, ForcedPrefixIsConditioned) {
  auto m = tiny_model(5);
  std::vector<TokenId> prompt{10, 11}, prefix{12, 13};
  std::vector<TokenId> joined{10, 11, 12, 13};
  GenerationConfig cfg{0.0, 5, 0};
  EXPECT_EQ(generate(m, prompt, cfg, nullptr, prefix).tokens, generate(m, joined, cfg).tokens);
}

TEST(Pretrain, UntrainedLossIsNearLogVocab) {
  auto m = tiny_model(2);
  std::vector<LmExample> data;
  for (std::uint64_t s = 0; s < 20; ++s) {
    data.push_back({random_ids(4, m.vocab().size(), s), random_ids(6, m.vocab().size(), s + 7)});
  }
  EXPECT_NEAR(mean_token_loss(m, data), std::log(static_cast<double>(m.vocab().size())), 0.05);
}

TEST(Pretrain, OverfitsTenExamples) {
  auto m = tiny_model(2);
  auto v = m.vocab();
  std::vector<LmExample> data;
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto y = random_ids(5, v.size(), s + 40);
    y.push_back(v.eos());
    data.push_back({random_ids(3, v.size(), s), y});
  }
  PretrainConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 10;
  cfg.lr = 1e-2;
  cfg.warmup_steps = 10;
  auto report = pretrain_base(m, data, cfg);
  EXPECT_EQ(report.loss_trace.size(), 300u);
  EXPECT_LT(mean_token_loss(m, data), 0.1);
  for (const auto& p : m.parameters()) {
    EXPECT_FALSE(p.tensor.requires_grad());
    EXPECT_FALSE(p.tensor.has_grad());
  }
}

TEST(Pretrain, RejectsEmptyCorpus) {
  auto m = tiny_model();
  EXPECT_THROW(pretrain_base(m, {}, PretrainConfig{}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = tiny_model(6);
  m.extend_vocabulary("~short", "general");
  auto dir = std::filesystem::temp_directory_path() / "neolab_ckpt_test";
  std::filesystem::create_directories(dir);
  auto path = dir / "model.bin";
  save_checkpoint(m, path);
  auto r = load_checkpoint(path.string());
  EXPECT_EQ(r.vocab().tokens(), m.vocab().tokens());
  EXPECT_EQ(r.vocab().base_size(), m.vocab().base_size());
  auto a = m.parameters();
  auto b = r.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(bit_equal(a[i].tensor, b[i].tensor)) << a[i].name;
  }
  EXPECT_EQ(r.dims().embed_scale, m.dims().embed_scale);

  // Corruption is detected by the sidecar checksum.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    f.put('\x7f');
  }
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace neolab
