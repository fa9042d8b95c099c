#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "neolab/tensor.hpp"

// Differentiable tensor ops. Every op validates shapes, rejects non-finite
// results, and records a backward entry on the active tape whenever one of
// its inputs requires grad. Rank-1 tensors act as a single row.

namespace neolab::ops {

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor add_row(const Tensor& a, const Tensor& row);  // row broadcast over rows of a

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor relu(const Tensor& a);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids);
/// out[i] = a[i, index[i]]
Tensor pick(const Tensor& a, std::span<const std::int32_t> index);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);

/// Multi-head causal self-attention over rows (positions). k and v are
/// [Tk,d]; q is [Tq,d] with Tq <= Tk and holds the last Tq positions, so
/// query row i attends to key rows 0..Tk-Tq+i.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng);

}  // namespace neolab::ops
