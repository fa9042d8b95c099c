#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "neolab/corpus.hpp"
#include "neolab/model.hpp"
#include "neolab/optim.hpp"
#include "neolab/pretrain.hpp"
#include "neolab/rng.hpp"

namespace neolab {

// ---------------------------------------------------------------------------
// APO-up loss.

struct ApoTerms {
  double loss = 0.0;
  double t1 = 0.0;
  double t2 = 0.0;
};

/// t1 = -log sigma(beta * ((lc - lr) - (lc0 - lr0)))
/// t2 = -log sigma(beta * (lc - lc0))
/// Inputs are sequence log-probabilities and must be finite and <= 0.
ApoTerms apo_up_loss(double lc, double lr, double lc0, double lr0, double beta = 0.2);

struct ApoTensorTerms {
  Tensor loss, t1, t2;
};

/// Differentiable in the policy log-probs; the reference values are constants.
ApoTensorTerms apo_up_loss(const Tensor& lc, const Tensor& lr, double lc0, double lr0,
                           double beta = 0.2);

// ---------------------------------------------------------------------------
// Encoded preference pairs and the frozen reference.

struct EncodedPair {
  std::vector<TokenId> prompt;
  std::vector<TokenId> chosen;    // ends with <eos>
  std::vector<TokenId> rejected;  // ends with <eos>
};

enum class PromptField { kSuffixed, kBase };

std::vector<EncodedPair> encode_pairs(const Vocabulary& vocab,
                                      std::span<const PreferenceExample> data, PromptField field);

/// log p_theta0 of chosen and rejected per example, computed once.
class ReferenceCache {
 public:
  static ReferenceCache build(const LanguageModel& reference, std::span<const EncodedPair> pairs,
                              const ProjectionAdapter* adapter = nullptr);

  std::size_t size() const { return chosen_.size(); }
  double chosen(std::size_t i) const { return chosen_.at(i); }
  double rejected(std::size_t i) const { return rejected_.at(i); }
  /// sha256 over the cached values, for manifests and immutability checks.
  std::string checksum() const;

  /// Recomputes `indices` under `reference` and reports whether every value
  /// matches the cache bit for bit.
  bool verify(const LanguageModel& reference, std::span<const EncodedPair> pairs,
              std::span<const std::size_t> indices, const ProjectionAdapter* adapter = nullptr) const;

 private:
  std::vector<double> chosen_, rejected_;
};

// ---------------------------------------------------------------------------
// LoRA.

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  double dropout = 0.05;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
  double scale() const { return alpha / static_cast<double>(rank); }
};

/// Rank-r adapters on the query and value projections of every layer.
/// Row convention: delta(x) = (alpha/r) * dropout(x) A B with A [in, r]
/// Gaussian and B [r, out] zero, so a fresh set leaves the model unchanged.
class LoraAdapterSet : public ProjectionAdapter {
 public:
  LoraAdapterSet(const ModelDims& dims, LoraConfig cfg);

  Tensor delta(std::size_t layer, Projection which, const Tensor& x, bool training) const override;

  const LoraConfig& config() const { return cfg_; }
  std::size_t n_layers() const { return query_a_.size(); }
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;

  /// Copy of `model` with W + (alpha/r) A B folded into every adapted matrix.
  LanguageModel merged_into(const LanguageModel& model) const;

  void save(const std::filesystem::path& path) const;  // writes path and path.bin
  static LoraAdapterSet load(const std::filesystem::path& path);

 private:
  LoraConfig cfg_;
  ModelDims dims_;
  std::vector<Tensor> query_a_, query_b_, value_a_, value_b_;
  mutable Rng dropout_rng_;
};

// ---------------------------------------------------------------------------
// Parameter accounting and the freeze contract.

std::size_t neologism_parameter_count(const ModelDims& dims);
std::size_t lora_parameter_count(const ModelDims& dims, std::size_t rank);

/// Snapshot of every model parameter taken before training.
class FreezeAudit {
 public:
  explicit FreezeAudit(const LanguageModel& model);
  /// Names of parameters whose bits differ from the snapshot.
  std::vector<std::string> changed(const LanguageModel& model) const;

 private:
  std::vector<NamedTensor> snapshot_;
};

// ---------------------------------------------------------------------------
// Trainer.

struct TrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 5;
  std::size_t batch_size = 1;
  std::size_t accumulation = 10;
  double clip_norm = 1.0;
  double beta = 0.2;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t effective_batch() const { return batch_size * accumulation; }
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double t1 = 0.0;
  double t2 = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
};

struct TrainReport {
  std::vector<StepRecord> trace;
  std::vector<double> epoch_seconds;
  std::size_t trainable_parameters = 0;
  double minutes_per_epoch() const;
};

/// What the trainer optimises: the tensors handed to the optimizer and the
/// forward options used for policy log-probs.
struct TrainTarget {
  std::vector<Tensor> params;
  ForwardOptions forward;
  /// Optional, one per pair: frozen positions shared by chosen and rejected
  /// that no trained tensor can reach.
  std::vector<PrefixState> prefixes;
};

/// One optimizer update from `micro_batches` (k of them). Each example's
/// loss is divided by the total example count before backward, gradients
/// accumulate, the global norm is clipped once, then AdamW steps.
StepRecord accumulate_and_step(const LanguageModel& model, const TrainTarget& target,
                               std::span<const EncodedPair> pairs, const ReferenceCache& refs,
                               std::span<const std::vector<std::size_t>> micro_batches,
                               std::size_t k, AdamW& opt, const TrainConfig& cfg);

using StepCallback = std::function<void(const StepRecord&)>;

/// Runs cfg.epochs passes over `pairs` in seeded shuffled order.
TrainReport train_preference(const LanguageModel& model, const TrainTarget& target,
                             std::span<const EncodedPair> pairs, const ReferenceCache& refs,
                             const TrainConfig& cfg, const StepCallback& on_step = {},
                             std::size_t max_steps = 0);

struct NeologismArtifact {
  std::string concept_name;
  std::string surface;
  std::string init_from;
  std::vector<double> embedding;

  void save(const std::filesystem::path& path) const;
  static NeologismArtifact load(const std::filesystem::path& path);
};

/// Trains only the embedding of `spec.surface()`, which must already be in
/// the vocabulary. Every other parameter keeps its bits. Positions before the
/// first neologism in each prompt are computed once and reused; the time for
/// that is charged to the first epoch.
NeologismArtifact train_neologism(LanguageModel& model, std::span<const EncodedPair> pairs,
                                  const ReferenceCache& refs, const ConceptSpec& spec,
                                  const TrainConfig& cfg, TrainReport* report = nullptr,
                                  const StepCallback& on_step = {}, std::size_t max_steps = 0);

/// Trains fresh adapters against a frozen model.
LoraAdapterSet train_lora(const LanguageModel& model, std::span<const EncodedPair> pairs,
                          const ReferenceCache& refs, const LoraConfig& lora_cfg,
                          const TrainConfig& cfg, TrainReport* report = nullptr,
                          const StepCallback& on_step = {}, std::size_t max_steps = 0);

/// Adds (if needed) and sets the neologism embedding on `model`.
TokenId install_neologism(LanguageModel& model, const NeologismArtifact& artifact);

void write_trace_csv(const std::filesystem::path& path, std::span<const StepRecord> trace);

}  // namespace neolab
