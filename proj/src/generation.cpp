#include "neolab/generation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "neolab/rng.hpp"

namespace neolab {

void GenerationConfig::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("generation temperature must be >= 0");
  }
  if (max_new_tokens == 0) throw std::invalid_argument("max_new_tokens must be positive");
}

TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw std::invalid_argument("sample_token: empty logits");
  auto best = std::max_element(logits.begin(), logits.end());
  if (temperature == 0.0) return static_cast<TokenId>(best - logits.begin());
  const double mx = *best;
  std::vector<double> w(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp((logits[i] - mx) / temperature);
    z += w[i];
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double r = unit(rng) * z;
  for (std::size_t i = 0; i < w.size(); ++i) {
    r -= w[i];
    if (r < 0.0) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(best - logits.begin());
}

GenerationResult generate(const LanguageModel& model, std::span<const TokenId> prompt,
                          const GenerationConfig& cfg, const ProjectionAdapter* adapter,
                          std::span<const TokenId> forced_prefix) {
  cfg.validate();
  const std::size_t ctx = model.dims().context_length;
  std::vector<TokenId> seq;
  seq.reserve(ctx);
  seq.push_back(model.vocab().bos());
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.insert(seq.end(), forced_prefix.begin(), forced_prefix.end());
  if (seq.size() > ctx) {
    throw ContextOverflow("generate: prompt of " + std::to_string(seq.size()) +
                          " tokens exceeds context length " + std::to_string(ctx));
  }

  Rng rng(cfg.seed);
  GenerationResult out;
  while (out.tokens.size() < cfg.max_new_tokens) {
    if (seq.size() >= ctx) {
      out.truncated = true;
      break;
    }
    auto logits = model.next_token_logits(seq, adapter);
    TokenId next = sample_token(logits, cfg.temperature, rng);
    if (next == model.vocab().eos()) {
      out.hit_eos = true;
      break;
    }
    out.tokens.push_back(next);
    seq.push_back(next);
  }
  return out;
}

}  // namespace neolab
