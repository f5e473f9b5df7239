#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsem {

// N x C x H x W, row-major.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t spatial() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows back
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `grad` and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Handle onto a node of the autodiff graph. Copies share the node.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<T> data,
                               bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->data; }
  // Writable access is reserved for leaves: initialization, optimizer steps
  // and checkpoint loading.
  std::span<T> mutable_data() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const;
  T at(int n, int c, int h, int w) const;

  // Same values, no history, no gradient.
  BasicTensor detach() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Reverse-mode sweep from a scalar output (seed 1) or with an explicit
// upstream gradient of the output's shape.
template <typename T>
void backward(const BasicTensor<T>& output);
template <typename T>
void backward(const BasicTensor<T>& output, std::span<const T> seed);

// True when every element of data (and grad, if present) is finite.
template <typename T>
bool all_finite(const BasicTensor<T>& t);

// Builds an op result node. Used by the op implementations.
template <typename T>
BasicTensor<T> make_result(
    Shape shape, std::vector<T> data,
    std::vector<std::shared_ptr<detail::Node<T>>> parents,
    std::function<void(detail::Node<T>&)> backward_fn);

}  // namespace dsem
