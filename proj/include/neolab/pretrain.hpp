#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "neolab/model.hpp"

namespace neolab {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One supervised sequence. `response` ends with <eos>; only response
/// tokens contribute to the loss.
struct LmExample {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;
};

struct PretrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of lr
  std::size_t warmup_steps = 100;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  std::uint64_t seed = 7;
  std::size_t log_every = 100;
};

struct PretrainReport {
  std::vector<double> loss_trace;  // token-mean loss per optimizer step
  double seconds = 0.0;
};

/// Next-token cross-entropy training of every model parameter.
PretrainReport pretrain_base(LanguageModel& model, std::span<const LmExample> corpus,
                             const PretrainConfig& cfg,
                             const std::function<void(std::size_t, double)>& on_log = {});

/// Mean per-token cross-entropy of the responses (nats).
double mean_token_loss(const LanguageModel& model, std::span<const LmExample> examples);

}  // namespace neolab
