#pragma once

#include <functional>
#include <vector>

#include "neolab/tensor.hpp"

namespace neolab {

/// Propagates the gradient held by `out` into the gradients of `inputs`.
/// Implementations must skip inputs that do not require grad.
using BackwardFn = std::function<void(const Tensor& out, std::vector<Tensor>& inputs)>;

/// Ordered record of executed ops. Backward walks entries in reverse
/// insertion order, which is a valid reverse topological order because an
/// op can only consume tensors that already exist.
///
/// A tape is confined to the thread that owns it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every requires_grad
  /// leaf reachable from `loss`. Leaf gradients accumulate across calls on
  /// different tapes; a single tape may only be consumed once.
  void backward(const Tensor& loss);

  void reset();
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    Tensor output;
    std::vector<Tensor> inputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// The tape ops record into on this thread, or nullptr (no-grad mode).
Tape* active_tape();

/// Installs a tape as the thread's active tape for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

/// Records `out` on the active tape when any input requires grad.
/// Returns true when recorded (out then requires grad).
bool maybe_record(Tensor& out, std::vector<Tensor> inputs, BackwardFn fn);

inline bool wants_grad(const Tensor& t) { return t.requires_grad(); }

}  // namespace detail

}  // namespace neolab
