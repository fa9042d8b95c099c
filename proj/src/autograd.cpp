#include "neolab/autograd.hpp"

#include <algorithm>

namespace neolab {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void Tape::record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn) {
  if (consumed_) {
    throw TensorError("recording onto a tape that was already consumed by backward");
  }
  entries_.push_back(Entry{output, std::move(inputs), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw TensorError("backward called twice on the same tape without reset");
  }
  if (loss.numel() != 1) {
    throw TensorError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (entries_.empty()) {
    throw TensorError("backward on an empty tape");
  }
  auto produced = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) {
    return e.output.same_as(loss);
  });
  if (produced == entries_.end()) {
    throw TensorError("loss is detached from this tape");
  }

  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn(it->output, it->inputs);
  }
  consumed_ = true;
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

namespace detail {

bool maybe_record(Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return false;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return false;
  out.impl()->requires_grad = true;
  tape->record(out, std::move(inputs), std::move(fn));
  return true;
}

}  // namespace detail

}  // namespace neolab
