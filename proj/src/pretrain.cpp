#include "neolab/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "neolab/autograd.hpp"
#include "neolab/numeric.hpp"
#include "neolab/ops.hpp"
#include "neolab/optim.hpp"
#include "neolab/rng.hpp"

namespace neolab {

namespace {

double scheduled_lr(const PretrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg.steps - cfg.warmup_steps));
  const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
  return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

}  // namespace

PretrainReport pretrain_base(LanguageModel& model, std::span<const LmExample> corpus,
                             const PretrainConfig& cfg,
                             const std::function<void(std::size_t, double)>& on_log) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_base: empty corpus");
  if (cfg.batch_size == 0) throw std::invalid_argument("pretrain_base: batch_size must be positive");

  const auto start = std::chrono::steady_clock::now();
  // Embeddings are stored divided by embed_scale, so their step is divided
  // too; the effective (scaled) embedding then trains at the shared lr.
  std::vector<Tensor> params, embed_params, other_params;
  for (auto& p : model.parameters()) {
    p.tensor.set_requires_grad(true);
    params.push_back(p.tensor);
    const bool is_embed = p.name == "token_embed" || p.name.rfind("extension.", 0) == 0;
    (is_embed ? embed_params : other_params).push_back(p.tensor);
  }
  const double embed_lr_factor = 1.0 / model.dims().embed_scale;
  AdamW opt(other_params, AdamWConfig{cfg.lr, 0.9, 0.95, 1e-8, cfg.weight_decay});
  AdamW embed_opt(embed_params, AdamWConfig{cfg.lr * embed_lr_factor, 0.9, 0.95, 1e-8, cfg.weight_decay});

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  PretrainReport report;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    std::size_t tokens = 0;
    for (auto i : batch) tokens += corpus[i].response.size();

    double step_loss = 0.0;
    try {
      for (auto i : batch) {
        Tape tape;
        TapeScope scope(tape);
        Tensor lp = sequence_logprob(model, corpus[i].prompt, corpus[i].response);
        Tensor loss = ops::scale(lp, -1.0 / static_cast<double>(tokens));
        step_loss += loss.item();
        tape.backward(loss);
      }
    } catch (const TensorError& e) {
      throw TrainingDiverged(std::string("pretraining diverged at step ") + std::to_string(step) +
                             ": " + e.what());
    }
    if (!std::isfinite(step_loss)) {
      throw TrainingDiverged("pretraining loss is not finite at step " + std::to_string(step));
    }
    clip_global_norm(params, cfg.clip_norm);
    const double lr = scheduled_lr(cfg, step);
    opt.set_lr(lr);
    embed_opt.set_lr(lr * embed_lr_factor);
    opt.step();
    embed_opt.step();
    opt.zero_grad();
    embed_opt.zero_grad();
    report.loss_trace.push_back(step_loss);
    if (on_log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) on_log(step + 1, step_loss);
  }

  for (auto& p : params) {
    p.set_requires_grad(false);
    p.clear_grad();
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

double mean_token_loss(const LanguageModel& model, std::span<const LmExample> examples) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    total -= sequence_logprob_value(model, ex.prompt, ex.response);
    tokens += ex.response.size();
  }
  if (tokens == 0) throw std::invalid_argument("mean_token_loss: no response tokens");
  return total / static_cast<double>(tokens);
}

}  // namespace neolab
