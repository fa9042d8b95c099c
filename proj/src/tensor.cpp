#include "neolab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace neolab {

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) {
    throw TensorError("empty shape");
  }
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) {
      throw TensorError("zero-sized dimension in shape " + shape_str(shape));
    }
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw TensorError("data length " + std::to_string(values.size()) +
                      " does not match shape " + shape_str(shape));
  }
  require_finite(values, "from");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

TensorImpl& Tensor::checked() const {
  if (!impl_) {
    throw TensorError("use of undefined tensor");
  }
  return *impl_;
}

const Shape& Tensor::shape() const { return checked().shape; }
std::size_t Tensor::numel() const { return checked().data.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 1 ? 1 : s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.back();
}

std::span<const double> Tensor::data() const { return checked().data; }
std::span<double> Tensor::mutable_data() { return checked().data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return checked().data[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  auto& impl = checked();
  if (!impl.leaf) {
    throw TensorError("requires_grad can only be toggled on leaf tensors");
  }
  impl.requires_grad = on;
}

bool Tensor::is_leaf() const { return checked().leaf; }

bool Tensor::has_grad() const { return !checked().grad.empty(); }

std::span<const double> Tensor::grad() const {
  auto& impl = checked();
  if (impl.grad.empty()) {
    throw TensorError("tensor has no gradient");
  }
  return impl.grad;
}

std::span<double> Tensor::mutable_grad() {
  auto& impl = checked();
  if (impl.grad.empty()) {
    impl.grad.assign(impl.data.size(), 0.0);
  }
  return impl.grad;
}

void Tensor::zero_grad() {
  auto& impl = checked();
  if (!impl.grad.empty()) {
    std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
  }
}

void Tensor::clear_grad() { checked().grad.clear(); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->data = checked().data;
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<double> values) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->leaf = false;
  return Tensor(std::move(impl));
}

void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw TensorError(std::string("non-finite value produced by ") + op);
    }
  }
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::memcmp(da.data(), db.data(), da.size() * sizeof(double)) == 0;
}

}  // namespace neolab
