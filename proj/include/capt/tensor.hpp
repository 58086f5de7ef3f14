#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every differentiable op that sees at least one input with requires_grad
// appends an entry to the calling thread's Tape. backward() replays the tape
// in reverse, which is a valid reverse topological order because entries are
// appended in execution order, and then clears it.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "capt/errors.hpp"

namespace capt::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool leaf = true;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

// Per-thread switch. Inference and data preparation run with gradients off,
// so nothing is recorded and intermediate buffers are freed immediately.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tape {
 public:
  struct Entry {
    NodePtr<T> output;
    std::vector<NodePtr<T>> inputs;
    std::function<void()> backward;
    const char* op = "";
  };

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  void record(Entry e) { entries_.push_back(std::move(e)); }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] bool empty() const { return entries_.empty(); }
  [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<Node<T>>()) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t numel() const { return node_->value.size(); }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  // 2-D view helpers. A rank-1 tensor of length n reads as a 1 x n row.
  [[nodiscard]] std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  [[nodiscard]] std::size_t cols() const { return rank() == 1 ? node_->shape[0] : numel() / node_->shape[0]; }

  [[nodiscard]] std::span<const T> values() const { return node_->value; }
  [[nodiscard]] std::span<T> mutable_values() { return node_->value; }
  [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
  [[nodiscard]] bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  [[nodiscard]] T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  [[nodiscard]] T at(std::size_t i) const { return node_->value.at(i); }
  [[nodiscard]] T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  [[nodiscard]] bool is_leaf() const { return node_->leaf; }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
    else node_->grad.clear();
  }

  // Detached copy sharing no autograd history.
  [[nodiscard]] Tensor detach() const { return Tensor(shape(), node_->value, false); }

  [[nodiscard]] const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

namespace detail {

template <class T>
void require_finite(const std::vector<T>& v, const char* what, const char* op) {
  // Exponent-bit test; an integer OR-reduction vectorizes where isfinite does not.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exponent = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  bool bad = false;
  for (const T& x : v) bad |= (std::bit_cast<Bits>(x) & exponent) == exponent;
  if (bad) throw NumericalFault(std::string("non-finite ") + what + " produced by '" + op + "'");
}

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!grad_mode_flag()) return false;
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// Wraps a freshly computed buffer into an output tensor and, when needed,
// records the backward closure. The closure receives the output node so it
// can read the incoming gradient.
template <class T, class Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<NodePtr<T>> inputs, Backward&& backward) {
  require_finite(value, "value", op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = grad_mode_flag();
  if (track) {
    track = false;
    for (auto& in : inputs)
      if (in->requires_grad) track = true;
  }
  if (track) {
    node->requires_grad = true;
    node->leaf = false;
    Node<T>* out = node.get();
    auto fn = [out, bw = std::forward<Backward>(backward)]() { bw(*out); };
    Tape<T>::active().record({node, std::move(inputs), std::move(fn), op});
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

// Reverse pass. Seeds d(loss)/d(loss) = 1, replays the tape backwards and
// clears it. Leaf gradients accumulate, so callers zero them between steps.
template <class T>
void backward(const Tensor<T>& loss) {
  auto& tape = Tape<T>::active();
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (tape.empty()) throw ContractError("backward() called with an empty tape");
  if (!loss.requires_grad()) throw ContractError("backward() on a loss that does not require grad");

  auto& root = *loss.node();
  root.ensure_grad()[0] += T(1);
  const auto& entries = tape.entries();
  std::unordered_set<const Node<T>*> leaves;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward();
    for (auto& in : it->inputs)
      if (in->leaf && in->requires_grad) leaves.insert(in.get());
  }
  tape.clear();
  for (auto* leaf : leaves) detail::require_finite(leaf->grad, "gradient", "backward");
}

}  // namespace capt::ad
