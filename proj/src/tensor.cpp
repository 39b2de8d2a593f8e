#include "mixssm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mixssm {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const auto r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

namespace detail {

bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

template <typename T>
void check_finite(std::span<const T> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  check_finite<T>(values, "tensor");
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw Error("tensor: use of undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  return shape()[normalize_axis(axis, rank(), "dim")];
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw Error("tensor: use of undefined tensor");
  return node_->value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_) throw Error("tensor: use of undefined tensor");
  if (!node_->is_leaf()) throw Error(std::string("tensor: in-place write to non-leaf output of ") + node_->op);
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return data()[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("at: index rank mismatch for shape " + shape_string(s));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= s[k]) throw ShapeError("at: index out of range for shape " + shape_string(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return data()[flat];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!node_) throw Error("tensor: use of undefined tensor");
  if (!node_->is_leaf()) throw Error("set_requires_grad: only leaves can toggle gradient tracking");
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_) throw Error("tensor: use of undefined tensor");
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
void Tensor<T>::backward() const {
  if (!node_) throw Error("backward: undefined tensor");
  if (node_->value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_string(node_->shape));
  }
  if (!node_->requires_grad) return;

  using NodePtr = detail::Node<T>*;
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      NodePtr child = n->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  if (node_->grad.empty()) node_->grad.assign(1, T(0));
  node_->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    detail::BackwardContext<T> ctx(*n);
    n->backward(ctx);
  }
  for (auto* n : order) {
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  for (auto* n : order) {
    if (n->is_leaf() && !n->grad.empty()) check_finite<T>(n->grad, "backward");
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), to_vector());
}

template <typename T>
Tensor<T> make_op_result(const char* op, Shape shape, std::vector<T> values,
                         const std::vector<Tensor<T>>& inputs, detail::BackwardFn<T> backward) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError(std::string(op) + ": internal shape/value mismatch " + shape_string(shape));
  }
  check_finite<T>(values, op);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool record = false;
  if (grad_enabled() && backward) {
    for (const auto& in : inputs) record = record || in.requires_grad();
  }
  if (record) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template Tensor<float> make_op_result<float>(const char*, Shape, std::vector<float>,
                                             const std::vector<Tensor<float>>&, detail::BackwardFn<float>);
template Tensor<double> make_op_result<double>(const char*, Shape, std::vector<double>,
                                               const std::vector<Tensor<double>>&, detail::BackwardFn<double>);

}  // namespace mixssm
