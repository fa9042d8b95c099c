#include "neolab/model.hpp"

#include <cmath>
#include <numeric>

#include "neolab/autograd.hpp"
#include "neolab/ops.hpp"
#include "neolab/rng.hpp"

namespace neolab {

namespace {

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

void ModelDims::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || context_length < 2) {
    throw std::invalid_argument("model dims must be positive");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
    throw std::invalid_argument("n_heads must be a multiple of n_kv_heads");
  }
  if (!(embed_scale > 0.0)) throw std::invalid_argument("embed_scale must be positive");
}

LanguageModel::LanguageModel(Vocabulary vocab, ModelDims dims, std::uint64_t seed)
    : vocab_(std::move(vocab)), dims_(dims) {
  dims_.validate();
  if (dims_.n_kv_heads != dims_.n_heads) {
    throw std::invalid_argument("toy model runs full multi-head attention (n_kv_heads == n_heads)");
  }
  Rng rng(seed);
  const std::size_t d = dims_.d_model;
  const double std_w = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(dims_.n_layers));

  token_embed_ = gaussian({vocab_.base_size(), d}, std_w / dims_.embed_scale, rng);
  pos_embed_ = gaussian({dims_.context_length, d}, std_w, rng);
  for (std::size_t l = 0; l < dims_.n_layers; ++l) {
    TransformerBlock b;
    b.ln1_gain = Tensor::full({d}, 1.0);
    b.ln1_bias = Tensor::zeros({d});
    b.w_query = gaussian({d, dims_.query_out()}, std_w, rng);
    b.w_key = gaussian({d, dims_.query_out()}, std_w, rng);
    b.w_value = gaussian({d, dims_.value_out()}, std_w, rng);
    b.w_out = gaussian({d, d}, std_resid, rng);
    b.ln2_gain = Tensor::full({d}, 1.0);
    b.ln2_bias = Tensor::zeros({d});
    b.w_up = gaussian({d, dims_.d_ff}, std_w, rng);
    b.b_up = Tensor::zeros({dims_.d_ff});
    b.w_down = gaussian({dims_.d_ff, d}, std_resid, rng);
    b.b_down = Tensor::zeros({d});
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = Tensor::full({d}, 1.0);
  lnf_bias_ = Tensor::zeros({d});
  for (std::size_t i = vocab_.base_size(); i < vocab_.size(); ++i) {
    ext_embed_.push_back(gaussian({1, d}, std_w / dims_.embed_scale, rng));
  }
}

Tensor LanguageModel::hidden(std::span<const TokenId> ids, const ForwardOptions& opts) const {
  return run(ids, opts, nullptr, nullptr);
}

Tensor LanguageModel::hidden(std::span<const TokenId> ids, const ForwardOptions& opts,
                             const PrefixState* prefix) const {
  return run(ids, opts, prefix, nullptr);
}

PrefixState LanguageModel::prefix_state(std::span<const TokenId> ids) const {
  NoGradScope no_grad;
  PrefixState state;
  run(ids, {}, nullptr, &state);
  state.ids.assign(ids.begin(), ids.end());
  return state;
}

Tensor LanguageModel::run(std::span<const TokenId> ids, const ForwardOptions& opts, const PrefixState* prefix,
                          PrefixState* record) const {
  const std::size_t t = ids.size();
  if (t == 0) throw std::invalid_argument("forward: empty input");
  if (t > dims_.context_length) {
    throw ContextOverflow("forward: " + std::to_string(t) + " tokens exceed context length " +
                          std::to_string(dims_.context_length));
  }
  const std::size_t start = prefix ? prefix->ids.size() : 0;
  if (prefix) {
    if (opts.adapter != nullptr) throw std::invalid_argument("forward: a cached prefix excludes adapters");
    if (start >= t || !std::equal(prefix->ids.begin(), prefix->ids.end(), ids.begin()) ||
        prefix->keys.size() != blocks_.size() || prefix->values.size() != blocks_.size()) {
      throw std::invalid_argument("forward: cached prefix does not match the input");
    }
  }
  Tensor table = token_embed_;
  if (!ext_embed_.empty()) {
    std::vector<Tensor> parts{token_embed_};
    parts.insert(parts.end(), ext_embed_.begin(), ext_embed_.end());
    table = ops::concat_rows(parts);
  }
  Tensor x = ops::add(ops::scale(ops::gather_rows(table, ids.subspan(start)), dims_.embed_scale),
                      ops::slice_rows(pos_embed_, start, t));

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    Tensor h = ops::layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor q = ops::matmul(h, b.w_query);
    Tensor k = ops::matmul(h, b.w_key);
    Tensor v = ops::matmul(h, b.w_value);
    if (opts.adapter != nullptr) {
      if (Tensor dq = opts.adapter->delta(l, Projection::kQuery, h, opts.training); dq.defined()) {
        q = ops::add(q, dq);
      }
      if (Tensor dv = opts.adapter->delta(l, Projection::kValue, h, opts.training); dv.defined()) {
        v = ops::add(v, dv);
      }
    }
    if (record) {
      record->keys.push_back(k);
      record->values.push_back(v);
    }
    if (prefix) {
      k = ops::concat_rows({prefix->keys[l], k});
      v = ops::concat_rows({prefix->values[l], v});
    }
    Tensor attn = ops::causal_attention(q, k, v, dims_.n_heads);
    x = ops::add(x, ops::matmul(attn, b.w_out));

    Tensor h2 = ops::layer_norm(x, b.ln2_gain, b.ln2_bias);
    Tensor up = ops::gelu(ops::add_row(ops::matmul(h2, b.w_up), b.b_up));
    x = ops::add(x, ops::add_row(ops::matmul(up, b.w_down), b.b_down));
  }
  return ops::layer_norm(x, lnf_gain_, lnf_bias_);
}

Tensor LanguageModel::head(const Tensor& hidden_rows) const {
  // Base columns never depend on how many extension tokens exist, so
  // extending the vocabulary leaves pre-existing logits bit-identical.
  const double s = dims_.embed_scale;
  Tensor logits = ops::scale(ops::matmul_nt(hidden_rows, token_embed_), s);
  if (ext_embed_.empty()) return logits;
  std::vector<Tensor> parts{logits};
  for (const auto& e : ext_embed_) parts.push_back(ops::scale(ops::matmul_nt(hidden_rows, e), s));
  return ops::concat_cols(parts);
}

Tensor LanguageModel::forward(std::span<const TokenId> ids, const ForwardOptions& opts) const {
  return head(hidden(ids, opts));
}

std::vector<double> LanguageModel::next_token_logits(std::span<const TokenId> ids,
                                                     const ProjectionAdapter* adapter) const {
  NoGradScope no_grad;
  Tensor h = hidden(ids, ForwardOptions{adapter, false});
  Tensor last = ops::slice_rows(h, h.rows() - 1, h.rows());
  Tensor logits = head(last);
  return {logits.data().begin(), logits.data().end()};
}

TokenId LanguageModel::extend_vocabulary(const std::string& surface, std::string_view init_from) {
  auto source = vocab_.find(init_from);
  if (!source || vocab_.is_special(*source)) {
    throw std::invalid_argument("extend_vocabulary: unknown init token '" + std::string(init_from) +
                                "'");
  }
  std::vector<double> init;
  const std::size_t d = dims_.d_model;
  if (static_cast<std::size_t>(*source) < vocab_.base_size()) {
    auto data = token_embed_.data();
    auto row = data.subspan(static_cast<std::size_t>(*source) * d, d);
    init.assign(row.begin(), row.end());
  } else {
    auto row = extension_embedding(*source).data();
    init.assign(row.begin(), row.end());
  }
  TokenId id = vocab_.add_neologism(surface);
  ext_embed_.push_back(Tensor::from({1, d}, std::move(init)));
  return id;
}

Tensor& LanguageModel::extension_embedding(TokenId id) {
  if (!vocab_.is_neologism(id) || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw std::out_of_range("token " + std::to_string(id) + " is not an extension token");
  }
  return ext_embed_[static_cast<std::size_t>(id) - vocab_.base_size()];
}

const Tensor& LanguageModel::extension_embedding(TokenId id) const {
  return const_cast<LanguageModel*>(this)->extension_embedding(id);
}

Tensor LanguageModel::embedding_matrix() const {
  NoGradScope no_grad;
  if (ext_embed_.empty()) return token_embed_.clone();
  std::vector<Tensor> parts{token_embed_};
  parts.insert(parts.end(), ext_embed_.begin(), ext_embed_.end());
  return ops::concat_rows(parts).clone();
}

std::vector<NamedTensor> LanguageModel::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"token_embed", token_embed_});
  out.push_back({"pos_embed", pos_embed_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.bias", b.ln1_bias});
    out.push_back({p + "attn.query", b.w_query});
    out.push_back({p + "attn.key", b.w_key});
    out.push_back({p + "attn.value", b.w_value});
    out.push_back({p + "attn.out", b.w_out});
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.bias", b.ln2_bias});
    out.push_back({p + "mlp.up", b.w_up});
    out.push_back({p + "mlp.up_bias", b.b_up});
    out.push_back({p + "mlp.down", b.w_down});
    out.push_back({p + "mlp.down_bias", b.b_down});
  }
  out.push_back({"ln_f.gain", lnf_gain_});
  out.push_back({"ln_f.bias", lnf_bias_});
  for (std::size_t i = 0; i < ext_embed_.size(); ++i) {
    out.push_back({"extension." + vocab_.token(static_cast<TokenId>(vocab_.base_size() + i)),
                   ext_embed_[i]});
  }
  return out;
}

std::size_t LanguageModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

LanguageModel LanguageModel::clone() const {
  LanguageModel m;
  m.vocab_ = vocab_;
  m.dims_ = dims_;
  m.token_embed_ = token_embed_.clone();
  for (const auto& e : ext_embed_) m.ext_embed_.push_back(e.clone());
  m.pos_embed_ = pos_embed_.clone();
  for (const auto& b : blocks_) {
    TransformerBlock c;
    c.ln1_gain = b.ln1_gain.clone();
    c.ln1_bias = b.ln1_bias.clone();
    c.w_query = b.w_query.clone();
    c.w_key = b.w_key.clone();
    c.w_value = b.w_value.clone();
    c.w_out = b.w_out.clone();
    c.ln2_gain = b.ln2_gain.clone();
    c.ln2_bias = b.ln2_bias.clone();
    c.w_up = b.w_up.clone();
    c.b_up = b.b_up.clone();
    c.w_down = b.w_down.clone();
    c.b_down = b.b_down.clone();
    m.blocks_.push_back(std::move(c));
  }
  m.lnf_gain_ = lnf_gain_.clone();
  m.lnf_bias_ = lnf_bias_.clone();
  return m;
}

Tensor sequence_logprob(const LanguageModel& model, std::span<const TokenId> prompt,
                        std::span<const TokenId> response, const ForwardOptions& opts, const PrefixState* prefix) {
  if (response.empty()) return Tensor::scalar(0.0);
  const std::size_t ctx = model.dims().context_length;
  if (prompt.size() + response.size() > ctx) {
    throw ContextOverflow("sequence_logprob: prompt " + std::to_string(prompt.size()) +
                          " + response " + std::to_string(response.size()) +
                          " tokens exceed context length " + std::to_string(ctx));
  }
  std::vector<TokenId> input;
  input.reserve(1 + prompt.size() + response.size());
  input.push_back(model.vocab().bos());
  input.insert(input.end(), prompt.begin(), prompt.end());
  input.insert(input.end(), response.begin(), response.end() - 1);

  const std::size_t start = prefix ? prefix->ids.size() : 0;
  if (start > prompt.size()) throw std::invalid_argument("sequence_logprob: cached prefix reaches into the response");
  Tensor h = model.hidden(input, opts, prefix);
  // Absolute row prompt.size() + t predicts response[t].
  Tensor rows = ops::slice_rows(h, prompt.size() - start, prompt.size() - start + response.size());
  Tensor logp = ops::log_softmax_rows(model.head(rows));
  return ops::sum(ops::pick(logp, response));
}

double sequence_logprob_value(const LanguageModel& model, std::span<const TokenId> prompt,
                              std::span<const TokenId> response, const ProjectionAdapter* adapter) {
  NoGradScope no_grad;
  return sequence_logprob(model, prompt, response, ForwardOptions{adapter, false}).item();
}

}  // namespace neolab
