#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neolab {

using Shape = std::vector<std::size_t>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
};

/// Shared handle to a dense row-major double tensor.
///
/// Copies alias the same storage (like a framework tensor handle); use
/// clone() for an independent deep copy. Rank is 1 or 2 for everything the
/// toy model needs; a scalar is shape {1}.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros on first use
  void zero_grad();
  void clear_grad();

  /// Deep copy of values only; the copy is a fresh leaf without grad.
  Tensor clone() const;

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  TensorImpl& checked() const;

  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_result(Shape shape, std::vector<double> values);
};

/// Output tensor of an op; not a leaf.
Tensor make_result(Shape shape, std::vector<double> values);

/// Throws TensorError naming `op` when any value is NaN or infinite.
void require_finite(std::span<const double> values, const char* op);

bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace neolab
