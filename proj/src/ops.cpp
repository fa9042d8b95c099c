#include "neolab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "neolab/autograd.hpp"

namespace neolab::ops {

namespace {

using detail::maybe_record;

void add_into(Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto dst = t.mutable_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw TensorError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

std::vector<double> transposed(std::size_t rows, std::size_t cols, const double* src) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  auto bt = transposed(n, k, b);
  gemm_nn(m, k, n, a, bt.data(), c);
}

Tensor finish(Shape shape, std::vector<double> values, const char* op) {
  require_finite(values, op);
  return make_result(std::move(shape), std::move(values));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw TensorError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  gemm_nn(m, k, n, a.data().data(), b.data().data(), c.data());
  Tensor out = finish({m, n}, std::move(c), "matmul");
  maybe_record(out, {a, b}, [m, k, n](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    if (in[0].requires_grad()) {
      gemm_nt(m, n, k, g.data(), in[1].data().data(), in[0].mutable_grad().data());
    }
    if (in[1].requires_grad()) {
      gemm_tn(m, k, n, in[0].data().data(), g.data(), in[1].mutable_grad().data());
    }
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw TensorError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()) + "^T");
  }
  std::vector<double> c(m * n, 0.0);
  gemm_nt(m, k, n, a.data().data(), b.data().data(), c.data());
  Tensor out = finish({m, n}, std::move(c), "matmul_nt");
  maybe_record(out, {a, b}, [m, k, n](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    if (in[0].requires_grad()) {
      gemm_nn(m, n, k, g.data(), in[1].data().data(), in[0].mutable_grad().data());
    }
    if (in[1].requires_grad()) {
      gemm_tn(m, n, k, g.data(), in[0].data().data(), in[1].mutable_grad().data());
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = make_result({c, r}, transposed(r, c, a.data().data()));
  maybe_record(out, {a}, [r, c](const Tensor& o, std::vector<Tensor>& in) {
    add_into(in[0], transposed(c, r, o.grad().data()));
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] + db[i];
  Tensor out = finish(a.shape(), std::move(v), "add");
  maybe_record(out, {a, b}, [](const Tensor& o, std::vector<Tensor>& in) {
    add_into(in[0], o.grad());
    add_into(in[1], o.grad());
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] - db[i];
  Tensor out = finish(a.shape(), std::move(v), "sub");
  maybe_record(out, {a, b}, [](const Tensor& o, std::vector<Tensor>& in) {
    add_into(in[0], o.grad());
    if (in[1].requires_grad()) {
      auto g = o.grad();
      auto dst = in[1].mutable_grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = da[i] * db[i];
  Tensor out = finish(a.shape(), std::move(v), "mul");
  maybe_record(out, {a, b}, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    for (int s = 0; s < 2; ++s) {
      if (!in[s].requires_grad()) continue;
      auto other = in[1 - s].data();
      auto dst = in[s].mutable_grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * other[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x *= factor;
  Tensor out = finish(a.shape(), std::move(v), "scale");
  maybe_record(out, {a}, [factor](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * g[i];
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x += value;
  Tensor out = finish(a.shape(), std::move(v), "add_scalar");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    add_into(in[0], o.grad());
  });
  return out;
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const std::size_t r = a.rows(), c = a.cols();
  if (row.numel() != c) {
    throw TensorError("add_row: row of " + shape_str(row.shape()) + " cannot broadcast over " +
                      shape_str(a.shape()));
  }
  std::vector<double> v(a.data().begin(), a.data().end());
  auto b = row.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] += b[j];
  Tensor out = finish(a.shape(), std::move(v), "add_row");
  maybe_record(out, {a, row}, [r, c](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    add_into(in[0], g);
    if (in[1].requires_grad()) {
      auto dst = in[1].mutable_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dst[j] += g[i * c + j];
    }
  });
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data() + i * c;
    double* yr = v.data() + i * c;
    double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
  }
  Tensor out = finish(a.shape(), std::move(v), "softmax_rows");
  maybe_record(out, {a}, [r, c](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto y = o.data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) dst[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
  return out;
}

Tensor log_softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data() + i * c;
    double* yr = v.data() + i * c;
    double mx = *std::max_element(xr, xr + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xr[j] - mx);
    double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] - lz;
  }
  Tensor out = finish(a.shape(), std::move(v), "log_softmax_rows");
  maybe_record(out, {a}, [r, c](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto y = o.data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        dst[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gs;
    }
  });
  return out;
}

Tensor log(const Tensor& a) {
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(x[i]);
  Tensor out = finish(a.shape(), std::move(v), "log");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto x = in[0].data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] / x[i];
  });
  return out;
}

Tensor exp(const Tensor& a) {
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(x[i]);
  Tensor out = finish(a.shape(), std::move(v), "exp");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto y = o.data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * y[i];
  });
  return out;
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = stable_sigmoid(x[i]);
  Tensor out = finish(a.shape(), std::move(v), "sigmoid");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto y = o.data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * y[i] * (1.0 - y[i]);
  });
  return out;
}

Tensor log_sigmoid(const Tensor& a) {
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = x[i] >= 0 ? -std::log1p(std::exp(-x[i])) : x[i] - std::log1p(std::exp(x[i]));
  }
  Tensor out = finish(a.shape(), std::move(v), "log_sigmoid");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto x = in[0].data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * stable_sigmoid(-x[i]);
  });
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double xi = x[i];
    v[i] = 0.5 * xi * (1.0 + std::tanh(kGeluC * (xi + kGeluA * xi * xi * xi)));
  }
  Tensor out = finish(a.shape(), std::move(v), "gelu");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto x = in[0].data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double xi = x[i];
      double t = std::tanh(kGeluC * (xi + kGeluA * xi * xi * xi));
      double d = 0.5 * (1.0 + t) +
                 0.5 * xi * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * xi * xi);
      dst[i] += g[i] * d;
    }
  });
  return out;
}

Tensor relu(const Tensor& a) {
  std::vector<double> v(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] > 0 ? x[i] : 0.0;
  Tensor out = finish(a.shape(), std::move(v), "relu");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto x = in[0].data();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i)
      if (x[i] > 0) dst[i] += g[i];
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw TensorError("layer_norm: gain/bias width must equal " + std::to_string(c));
  }
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(r);
  std::vector<double> y(x.numel());
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = xd.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xr[j] - mu) * inv_std[i];
      y[i * c + j] = xhat[i * c + j] * gd[j] + bd[j];
    }
  }
  Tensor out = finish(x.shape(), std::move(y), "layer_norm");
  maybe_record(out, {x, gain, bias},
               [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                   const Tensor& o, std::vector<Tensor>& in) {
                 auto g = o.grad();
                 auto gd = in[1].data();
                 if (in[0].requires_grad()) {
                   auto dst = in[0].mutable_grad();
                   for (std::size_t i = 0; i < r; ++i) {
                     double m1 = 0.0, m2 = 0.0;
                     for (std::size_t j = 0; j < c; ++j) {
                       double dxh = g[i * c + j] * gd[j];
                       m1 += dxh;
                       m2 += dxh * xhat[i * c + j];
                     }
                     m1 /= static_cast<double>(c);
                     m2 /= static_cast<double>(c);
                     for (std::size_t j = 0; j < c; ++j) {
                       double dxh = g[i * c + j] * gd[j];
                       dst[i * c + j] += inv_std[i] * (dxh - m1 - xhat[i * c + j] * m2);
                     }
                   }
                 }
                 if (in[1].requires_grad()) {
                   auto dst = in[1].mutable_grad();
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) dst[j] += g[i * c + j] * xhat[i * c + j];
                 }
                 if (in[2].requires_grad()) {
                   auto dst = in[2].mutable_grad();
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) dst[j] += g[i * c + j];
                 }
               });
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t n = table.rows(), c = table.cols();
  if (ids.empty()) throw TensorError("gather_rows: empty index list");
  std::vector<double> v(ids.size() * c);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw TensorError("gather_rows: index " + std::to_string(ids[i]) + " out of range " +
                        std::to_string(n));
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * c, c, v.data() + i * c);
  }
  Tensor out = make_result({ids.size(), c}, std::move(v));
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  maybe_record(out, {table}, [c, idx = std::move(idx)](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* row = dst.data() + static_cast<std::size_t>(idx[i]) * c;
      for (std::size_t j = 0; j < c; ++j) row[j] += g[i * c + j];
    }
  });
  return out;
}

Tensor pick(const Tensor& a, std::span<const std::int32_t> index) {
  const std::size_t r = a.rows(), c = a.cols();
  if (index.size() != r) {
    throw TensorError("pick: need one index per row (" + std::to_string(r) + "), got " +
                      std::to_string(index.size()));
  }
  std::vector<double> v(r);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c) {
      throw TensorError("pick: column " + std::to_string(index[i]) + " out of range");
    }
    v[i] = ad[i * c + static_cast<std::size_t>(index[i])];
  }
  Tensor out = make_result({r}, std::move(v));
  std::vector<std::int32_t> idx(index.begin(), index.end());
  maybe_record(out, {a}, [c, idx = std::move(idx)](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) dst[i * c + static_cast<std::size_t>(idx[i])] += g[i];
  });
  return out;
}

Tensor sum(const Tensor& a) {
  auto d = a.data();
  double s = std::accumulate(d.begin(), d.end(), 0.0);
  Tensor out = finish({1}, {s}, "sum");
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    double g = o.grad()[0];
    for (double& x : in[0].mutable_grad()) x += g;
  });
  return out;
}

Tensor mean(const Tensor& a) {
  auto d = a.data();
  const double n = static_cast<double>(d.size());
  double s = std::accumulate(d.begin(), d.end(), 0.0) / n;
  Tensor out = finish({1}, {s}, "mean");
  maybe_record(out, {a}, [n](const Tensor& o, std::vector<Tensor>& in) {
    double g = o.grad()[0] / n;
    for (double& x : in[0].mutable_grad()) x += g;
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw TensorError("concat_rows: column counts differ");
    total += p.rows();
  }
  std::vector<double> v;
  v.reserve(total * c);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  Tensor out = make_result({total, c}, std::move(v));
  maybe_record(out, parts, [](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    std::size_t offset = 0;
    for (auto& p : in) {
      const std::size_t n = p.numel();
      if (p.requires_grad()) add_into(p, g.subspan(offset, n));
      offset += n;
    }
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw TensorError("concat_cols: row counts differ");
    total += p.cols();
  }
  std::vector<double> v(r * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto d = p.data();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(d.data() + i * pc, pc, v.data() + i * total + offset);
    offset += pc;
  }
  Tensor out = make_result({r, total}, std::move(v));
  maybe_record(out, parts, [r, total](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    std::size_t offset = 0;
    for (auto& p : in) {
      const std::size_t pc = p.cols();
      if (p.requires_grad()) {
        auto dst = p.mutable_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) dst[i * pc + j] += g[i * total + offset + j];
      }
      offset += pc;
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin >= end || end > r) {
    throw TensorError("slice_rows: bad range [" + std::to_string(begin) + ", " +
                      std::to_string(end) + ") of " + std::to_string(r));
  }
  auto d = a.data();
  std::vector<double> v(d.begin() + static_cast<std::ptrdiff_t>(begin * c),
                        d.begin() + static_cast<std::ptrdiff_t>(end * c));
  Tensor out = make_result({end - begin, c}, std::move(v));
  maybe_record(out, {a}, [begin, c](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[begin * c + i] += g[i];
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw TensorError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out = make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  maybe_record(out, {a}, [](const Tensor& o, std::vector<Tensor>& in) {
    add_into(in[0], o.grad());
  });
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads) {
  require_same_shape(k, v, "causal_attention");
  require_rank2(q, "causal_attention");
  require_rank2(k, "causal_attention");
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
  if (k.cols() != d || tq > tk) {
    throw TensorError("causal_attention: queries " + shape_str(q.shape()) + " do not fit keys " +
                      shape_str(k.shape()));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw TensorError("causal_attention: width " + std::to_string(d) + " not divisible by heads");
  }
  const std::size_t dh = d / n_heads;
  const std::size_t shift = tk - tq;  // absolute position of query row 0
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[h][i][j] for j <= shift + i, stored dense [h, tq, tk]
  std::vector<double> probs(n_heads * tq * tk, 0.0);
  std::vector<double> out(tq * d, 0.0);
  auto qd = q.data(), kd = k.data(), vd = v.data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      const std::size_t last = shift + i;
      double* p = probs.data() + (h * tq + i) * tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= last; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += qd[i * d + off + e] * kd[j * d + off + e];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= last; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j <= last; ++j) {
        p[j] /= z;
        for (std::size_t e = 0; e < dh; ++e) out[i * d + off + e] += p[j] * vd[j * d + off + e];
      }
    }
  }
  Tensor result = finish({tq, d}, std::move(out), "causal_attention");
  maybe_record(result, {q, k, v},
               [tq, tk, shift, d, dh, n_heads, inv_sqrt, probs = std::move(probs)](
                   const Tensor& o, std::vector<Tensor>& in) {
                 auto g = o.grad();
                 auto qd = in[0].data(), kd = in[1].data(), vd = in[2].data();
                 std::vector<double> dq(tq * d, 0.0), dk(tk * d, 0.0), dv(tk * d, 0.0);
                 std::vector<double> dp(tk);
                 for (std::size_t h = 0; h < n_heads; ++h) {
                   const std::size_t off = h * dh;
                   for (std::size_t i = 0; i < tq; ++i) {
                     const std::size_t last = shift + i;
                     const double* p = probs.data() + (h * tq + i) * tk;
                     double dot = 0.0;
                     for (std::size_t j = 0; j <= last; ++j) {
                       double s = 0.0;
                       for (std::size_t e = 0; e < dh; ++e) {
                         s += g[i * d + off + e] * vd[j * d + off + e];
                         dv[j * d + off + e] += p[j] * g[i * d + off + e];
                       }
                       dp[j] = s;
                       dot += s * p[j];
                     }
                     for (std::size_t j = 0; j <= last; ++j) {
                       double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                       for (std::size_t e = 0; e < dh; ++e) {
                         dq[i * d + off + e] += ds * kd[j * d + off + e];
                         dk[j * d + off + e] += ds * qd[i * d + off + e];
                       }
                     }
                   }
                 }
                 add_into(in[0], dq);
                 add_into(in[1], dk);
                 add_into(in[2], dv);
               });
  return result;
}

Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw TensorError("dropout: rate must be in [0, 1)");
  if (p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(a.numel());
  for (double& m : mask) m = keep(rng) ? s : 0.0;
  std::vector<double> v(a.numel());
  auto d = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = d[i] * mask[i];
  Tensor out = make_result(a.shape(), std::move(v));
  maybe_record(out, {a}, [mask = std::move(mask)](const Tensor& o, std::vector<Tensor>& in) {
    auto g = o.grad();
    auto dst = in[0].mutable_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * mask[i];
  });
  return out;
}

}  // namespace neolab::ops
