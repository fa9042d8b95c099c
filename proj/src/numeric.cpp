#include "neolab/numeric.hpp"

#include <cmath>

#include "neolab/autograd.hpp"

namespace neolab {

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double h, double eps) {
  if (h <= 0.0) throw TensorError("finite_difference_check: step must be positive");

  Tensor point = x.clone();
  point.set_requires_grad(true);

  double reference = 0.0;
  {
    NoGradScope no_grad;
    double first = f(point).item();
    double second = f(point).item();
    if (first != second) {
      throw TensorError("finite_difference_check: function value drifted between calls");
    }
    reference = first;
  }

  std::vector<double> analytic(point.numel(), 0.0);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f(point);
    if (y.item() != reference) {
      throw TensorError("finite_difference_check: taped value differs from untaped value");
    }
    if (y.requires_grad()) {
      tape.backward(y);
      if (point.has_grad()) {
        auto g = point.grad();
        analytic.assign(g.begin(), g.end());
      }
    }
  }

  GradCheckResult result;
  NoGradScope no_grad;
  auto values = point.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    double up = f(point).item();
    values[i] = saved - h;
    double down = f(point).item();
    values[i] = saved;
    double numeric = (up - down) / (2.0 * h);
    double abs_err = std::abs(analytic[i] - numeric);
    double rel_err = abs_err / (std::abs(analytic[i]) + eps);
    if (rel_err > result.max_rel_error) {
      result.max_rel_error = rel_err;
      result.worst_index = i;
    }
    result.max_abs_error = std::max(result.max_abs_error, abs_err);
  }
  return result;
}

double global_norm(std::span<const Tensor> tensors) {
  double sq = 0.0;
  for (const auto& t : tensors) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_global_norm(std::span<Tensor> params, double max_norm) {
  if (max_norm <= 0.0) throw TensorError("clip_global_norm: max_norm must be positive");
  const double norm = global_norm(params);
  if (norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (double& g : p.mutable_grad()) g *= factor;
  }
  return factor;
}

}  // namespace neolab
