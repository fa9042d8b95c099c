#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "neolab/model.hpp"
#include "neolab/rng.hpp"

namespace neolab {

struct GenerationConfig {
  double temperature = 0.3;  // 0 selects greedy argmax
  std::size_t max_new_tokens = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GenerationResult {
  std::vector<TokenId> tokens;  // generated ids, EOS excluded
  bool hit_eos = false;
  bool truncated = false;  // context filled before EOS or the token cap
};

/// Samples a continuation of <bos> prompt forced_prefix. Stops at EOS, at
/// max_new_tokens, or when the context is full (truncated = true).
GenerationResult generate(const LanguageModel& model, std::span<const TokenId> prompt,
                          const GenerationConfig& cfg, const ProjectionAdapter* adapter = nullptr,
                          std::span<const TokenId> forced_prefix = {});

/// Index drawn from softmax(logits / temperature), or argmax when temperature is 0.
TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng);

}  // namespace neolab
