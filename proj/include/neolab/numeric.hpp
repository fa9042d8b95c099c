#pragma once

#include <functional>
#include <span>
#include <vector>

#include "neolab/tensor.hpp"

namespace neolab {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Relative error per element is |analytic - numeric| / (|analytic| + eps).
/// `f` is evaluated twice at the unperturbed point first; a value drift
/// between the calls raises TensorError (non-deterministic function).
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double h = 1e-5, double eps = 1e-6);

double global_norm(std::span<const Tensor> tensors);

/// Rescales the gradients of `params` in place so their global L2 norm is at
/// most `max_norm`. Returns the factor applied (1.0 when already in bound).
double clip_global_norm(std::span<Tensor> params, double max_norm);

}  // namespace neolab
