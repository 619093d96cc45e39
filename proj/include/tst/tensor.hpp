#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <utility>
#include <vector>

#include "tst/common.hpp"

namespace tst {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of reals. Copies are handles sharing the underlying
// buffers; operations always allocate fresh outputs, so a tensor's values do
// not change after the op that produced it. Leaves (parameters) are the one
// exception: the optimizer updates their data in place between steps.
//
// The gradient buffer exists exactly when requires_grad is set; it has the
// same shape as the data and is only ever accumulated into or zeroed.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), fill)) {}

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data has " + std::to_string(values.size()) +
                           " elements, shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  std::vector<T>& data() { return *data_; }
  const std::vector<T>& data() const { return *data_; }

  bool requires_grad() const { return requires_grad_; }

  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on && !grad_) grad_ = std::make_shared<std::vector<T>>(numel(), T(0));
    return *this;
  }

  bool has_grad() const { return static_cast<bool>(grad_); }

  // Gradient buffer; shared between handle copies so backward rules can
  // accumulate through captured copies.
  std::vector<T>& grad() const {
    if (!grad_) throw Error("tensor has no gradient buffer");
    return *grad_;
  }

  void zero_grad() const {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  T& at(std::initializer_list<std::size_t> idx) { return (*data_)[offset(idx)]; }
  T at(std::initializer_list<std::size_t> idx) const { return (*data_)[offset(idx)]; }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t i = 0;
    for (auto v : idx) {
      off = off * shape_[i] + v;
      ++i;
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  bool requires_grad_ = false;
};

// Ordered record of forward operations. Ops push their output handle and a
// backward rule; backward() replays the rules newest-first, which is a valid
// topological order because inputs always precede their consumers on the tape.
//
// Gradients of recorded outputs are reset before each replay; leaf gradients
// are never reset here, so running backward twice without zeroing the leaves
// yields exactly twice the gradient. Use from a single thread.
template <typename T>
class GradTape {
 public:
  void record(Tensor<T> output, std::function<void()> backward_rule) {
    entries_.push_back(Entry{std::move(output), std::move(backward_rule)});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw DimensionError("backward expects a scalar loss, got shape " +
                           shape_str(loss.shape()));
    }
    for (auto& e : entries_) {
      e.output.set_requires_grad(true);
      e.output.zero_grad();
    }
    loss.set_requires_grad(true);
    loss.grad()[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->backward_rule();
    }
  }

 private:
  struct Entry {
    Tensor<T> output;
    std::function<void()> backward_rule;
  };
  std::vector<Entry> entries_;
};

// Boolean mask, broadcastable against tensors with trailing-dim alignment.
// A set element means "masked out" (excluded).
struct BoolMask {
  Shape shape;
  std::vector<std::uint8_t> masked;

  static BoolMask none() { return BoolMask{{1}, {0}}; }
};

}  // namespace tst
