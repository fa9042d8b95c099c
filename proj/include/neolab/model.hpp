#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "neolab/tensor.hpp"
#include "neolab/tokenizer.hpp"

namespace neolab {

class ContextOverflow : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelDims {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 4;  // grouped-query width; the toy model requires n_kv_heads == n_heads
  std::size_t d_ff = 256;
  std::size_t context_length = 128;
  double embed_scale = 32.0;  // stored embeddings are multiplied by this on both the input and head side

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t query_out() const { return n_heads * head_dim(); }
  std::size_t value_out() const { return n_kv_heads * head_dim(); }

  void validate() const;
};

enum class Projection { kQuery, kValue };

/// Additive contribution to an attention projection (LoRA plugs in here).
class ProjectionAdapter {
 public:
  virtual ~ProjectionAdapter() = default;
  /// Returns the delta added to x·W for `which` in `layer`, or an undefined
  /// tensor when that projection is not adapted.
  virtual Tensor delta(std::size_t layer, Projection which, const Tensor& x, bool training) const = 0;
};

struct ForwardOptions {
  const ProjectionAdapter* adapter = nullptr;
  bool training = false;
};

/// Per-layer keys and values of a token prefix under the model without an
/// adapter. A later forward can start after the prefix as long as nothing the
/// prefix depends on has changed.
struct PrefixState {
  std::vector<TokenId> ids;
  std::vector<Tensor> keys, values;  // one untaped [|ids|, d] pair per layer
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct TransformerBlock {
  Tensor ln1_gain, ln1_bias;
  Tensor w_query, w_key, w_value, w_out;  // [d, d] each, applied as x·W
  Tensor ln2_gain, ln2_bias;
  Tensor w_up, b_up, w_down, b_down;
};

/// Pre-norm decoder-only transformer with an output head tied to the token
/// embeddings. Embeddings are stored one token per row ([|V|, d]); extension
/// tokens live in their own [1, d] tensors so they can be trained alone.
class LanguageModel {
 public:
  LanguageModel(Vocabulary vocab, ModelDims dims, std::uint64_t seed);

  const Vocabulary& vocab() const { return vocab_; }
  const ModelDims& dims() const { return dims_; }

  /// Logits [T, |V'|] for every position of `ids`.
  Tensor forward(std::span<const TokenId> ids, const ForwardOptions& opts = {}) const;
  /// Final-norm hidden states [T, d].
  Tensor hidden(std::span<const TokenId> ids, const ForwardOptions& opts = {}) const;
  /// Hidden states of the positions after `prefix` only ([T - |prefix|, d]),
  /// equal to the trailing rows of hidden(ids). `prefix` must start `ids`.
  Tensor hidden(std::span<const TokenId> ids, const ForwardOptions& opts, const PrefixState* prefix) const;
  PrefixState prefix_state(std::span<const TokenId> ids) const;
  /// Tied output head applied to hidden rows.
  Tensor head(const Tensor& hidden_rows) const;
  /// Untaped logits of the last position.
  std::vector<double> next_token_logits(std::span<const TokenId> ids,
                                        const ProjectionAdapter* adapter = nullptr) const;

  /// Adds `surface` as a new token whose embedding copies `init_from`.
  TokenId extend_vocabulary(const std::string& surface, std::string_view init_from);

  Tensor& token_embeddings() { return token_embed_; }
  const Tensor& token_embeddings() const { return token_embed_; }
  Tensor& extension_embedding(TokenId id);
  const Tensor& extension_embedding(TokenId id) const;
  /// Logical embedding matrix including extension rows (values only).
  Tensor embedding_matrix() const;

  TransformerBlock& block(std::size_t i) { return blocks_.at(i); }
  const TransformerBlock& block(std::size_t i) const { return blocks_.at(i); }

  /// All parameters in declared (serialization) order.
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;

  /// Independent copy with identical values.
  LanguageModel clone() const;

 private:
  LanguageModel() = default;
  Tensor run(std::span<const TokenId> ids, const ForwardOptions& opts, const PrefixState* prefix,
             PrefixState* record) const;

  Vocabulary vocab_;
  ModelDims dims_;
  Tensor token_embed_;
  std::vector<Tensor> ext_embed_;
  Tensor pos_embed_;
  std::vector<TransformerBlock> blocks_;
  Tensor lnf_gain_, lnf_bias_;

  friend LanguageModel load_checkpoint(const std::string& path);
};

/// log p(y | x) = sum_t log p(y_t | <bos> x y_<t). Differentiable; empty y
/// yields a constant 0. Throws ContextOverflow when |x| + |y| exceeds the
/// context length.
/// With `prefix` (at most <bos> plus the prompt), only the later positions
/// are recomputed.
Tensor sequence_logprob(const LanguageModel& model, std::span<const TokenId> prompt,
                        std::span<const TokenId> response, const ForwardOptions& opts = {},
                        const PrefixState* prefix = nullptr);
double sequence_logprob_value(const LanguageModel& model, std::span<const TokenId> prompt,
                              std::span<const TokenId> response,
                              const ProjectionAdapter* adapter = nullptr);

}  // namespace neolab
