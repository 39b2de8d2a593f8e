#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mixssm/errors.hpp"

namespace mixssm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Resolves a possibly negative axis against `rank`; throws ShapeError when out of range.
std::size_t normalize_axis(int axis, std::size_t rank, const char* op);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node;

template <typename T>
class BackwardContext;

template <typename T>
using BackwardFn = std::function<void(BackwardContext<T>&)>;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty == absent
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;

  bool is_leaf() const { return !backward; }
};

/// View handed to a backward rule: the output gradient, saved values, and
/// lazily allocated gradient buffers for the op inputs.
template <typename T>
class BackwardContext {
 public:
  explicit BackwardContext(Node<T>& node) : node_(node) {}

  std::span<const T> grad_output() const { return node_.grad; }
  std::span<const T> output() const { return node_.value; }
  const Shape& output_shape() const { return node_.shape; }
  std::span<const T> input(std::size_t i) const { return node_.inputs.at(i)->value; }
  const Shape& input_shape(std::size_t i) const { return node_.inputs.at(i)->shape; }
  bool needs_grad(std::size_t i) const {
    const auto& in = node_.inputs.at(i);
    return in && in->requires_grad;
  }

  /// Gradient accumulator for input i; empty when the input does not need one.
  std::span<T> grad(std::size_t i) {
    auto& in = node_.inputs.at(i);
    if (!in || !in->requires_grad) return {};
    if (in->grad.empty()) in->grad.assign(in->value.size(), T(0));
    return in->grad;
  }

 private:
  Node<T>& node_;
};

bool& grad_mode_flag();

}  // namespace detail

/// True unless a NoGradGuard is alive on this thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major N-dimensional array of finite values with optional gradient.
///
/// Tensors are handles: copies share the same storage and tape node. Values
/// are immutable after construction except through `mutable_data()`, which is
/// reserved for leaves (parameters updated by an optimizer or perturbed by a
/// gradient check).
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(int axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;
  std::vector<T> to_vector() const { return {data().begin(), data().end()}; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_ && node_->is_leaf(); }
  const char* op_name() const { return node_ ? node_->op : "undefined"; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar, accumulating into every reachable
  /// leaf that requires grad.
  void backward() const;

  /// Same values, no tape history, requires_grad off.
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const {
    const auto src = data();
    std::vector<U> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Builds an op output. Values are checked for finiteness; when grad mode is
/// on and any input requires grad, the node is recorded on the tape with
/// `backward` as its rule. Custom fused ops use this directly.
template <typename T>
Tensor<T> make_op_result(const char* op, Shape shape, std::vector<T> values,
                         const std::vector<Tensor<T>>& inputs, detail::BackwardFn<T> backward);

/// Throws NumericError naming `what` if any value is NaN or infinite.
template <typename T>
void check_finite(std::span<const T> values, const char* what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mixssm
