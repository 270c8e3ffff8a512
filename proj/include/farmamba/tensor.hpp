#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "farmamba/rng.hpp"

namespace farmamba {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class R>
class Tape;

namespace detail {
template <class R>
inline Tape<R>*& current_tape_slot() {
  thread_local Tape<R>* slot = nullptr;
  return slot;
}
}  // namespace detail

// Reverse-mode tape: a Wengert list of backward closures appended in forward
// order. Creation order is a topological order of the dynamic graph, so
// backward simply runs the list in reverse. One tape belongs to one thread;
// independent tapes on separate threads do not interact.
template <class R>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  static Tape* current() { return detail::current_tape_slot<R>(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// RAII activation of a tape for the current thread. Ops record backward
// closures only while a tape is active, so inference is just "no scope".
template <class R>
class TapeScope {
 public:
  explicit TapeScope(Tape<R>& tape) : prev_(detail::current_tape_slot<R>()) {
    detail::current_tape_slot<R>() = &tape;
  }
  ~TapeScope() { detail::current_tape_slot<R>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<R>* prev_;
};

// Dense N-dimensional tensor. Values are shared and treated as immutable
// after creation; the only mutable aspects are gradient accumulation during
// backward and explicit in-place edits via mutable_values() (parameter init
// and optimizer steps, which happen between tapes).
//
// A tensor with a grad buffer participates in gradient flow; detach() drops
// the buffer, and a detached tensor never receives gradient.
template <class R>
class Tensor {
 public:
  using Buffer = std::vector<R>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<Buffer>(static_cast<std::size_t>(shape_numel(t.shape_)), R(0));
    if (requires_grad) t.ensure_grad();
    return t;
  }

  static Tensor full(Shape shape, R value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : *t.data_) v = value;
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), R(1)); }

  static Tensor scalar(R value) { return full({1}, value); }

  static Tensor from(Shape shape, std::vector<R> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<Buffer>(std::move(values));
    return t;
  }

  template <class Src>
  static Tensor from_real(Shape shape, const std::vector<Src>& values) {
    std::vector<R> v(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<R>(values[i]);
    return from(std::move(shape), std::move(v));
  }

  static Tensor uniform(Shape shape, Rng& rng, R lo, R hi, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : *t.data_) v = static_cast<R>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, R mean, R stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : *t.data_) v = static_cast<R>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_ ? data_->size() : 0); }

  std::span<const R> values() const { return {data_->data(), data_->size()}; }
  std::span<R> mutable_values() { return {data_->data(), data_->size()}; }
  R operator[](std::size_t i) const { return (*data_)[i]; }

  bool has_grad() const { return grad_ != nullptr; }

  void ensure_grad() {
    if (!grad_) grad_ = std::make_shared<Buffer>(data_->size(), R(0));
  }

  void zero_grad() {
    if (grad_)
      for (auto& g : *grad_) g = R(0);
  }

  std::span<const R> grad() const {
    if (!grad_) throw std::logic_error("Tensor::grad: tensor has no gradient buffer");
    return {grad_->data(), grad_->size()};
  }

  std::span<R> mutable_grad() {
    ensure_grad();
    return {grad_->data(), grad_->size()};
  }

  // Same values, no gradient participation.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Deep copy of values (fresh storage, no grad buffer).
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<Buffer>(*data_);
    return t;
  }

  const std::shared_ptr<Buffer>& value_ptr() const { return data_; }
  const std::shared_ptr<Buffer>& grad_ptr() const { return grad_; }

  // Shares an existing gradient buffer; used by order-preserving views
  // (reshape) where accumulation must land in the source buffer.
  void adopt_grad(std::shared_ptr<Buffer> grad) {
    if (grad && grad->size() != data_->size())
      throw std::invalid_argument("Tensor::adopt_grad: size mismatch");
    grad_ = std::move(grad);
  }

  // Wraps existing storage without copying; op-author API (e.g. reshape).
  static Tensor wrap(Shape shape, std::shared_ptr<Buffer> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data->size()))
      throw std::invalid_argument("Tensor::wrap: shape/storage size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

 private:
  Shape shape_;
  std::shared_ptr<Buffer> data_;
  std::shared_ptr<Buffer> grad_;
};

// True when a backward closure should be recorded for an op whose inputs
// include at least one gradient-bearing tensor.
template <class R, class... Ts>
inline bool grad_needed(const Ts&... inputs) {
  return Tape<R>::current() != nullptr && (inputs.has_grad() || ...);
}

template <class R>
inline void record_node(std::function<void()> backward_fn) {
  Tape<R>::current()->record(std::move(backward_fn));
}

// Populates gradients for every tensor reachable from `loss` on the active
// tape. Gradients accumulate; callers zero parameter grads between steps.
template <class R>
inline void backward(Tensor<R>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  if (!loss.has_grad())
    throw std::invalid_argument("backward: loss is detached from the tape");
  Tape<R>* tape = Tape<R>::current();
  if (!tape) throw std::logic_error("backward: no active tape");
  loss.mutable_grad()[0] += R(1);
  tape->run_backward();
}

}  // namespace farmamba
