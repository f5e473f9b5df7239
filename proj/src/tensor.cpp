#include "dsem/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dsem {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor extent " + shape.str());
  }
  return from_data(shape, std::vector<T>(shape.numel(), value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data,
                                         bool requires_grad) {
  if (data.size() != shape.numel()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape.str());
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape;
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape().str());
  }
  return node_->data[0];
}

template <typename T>
T BasicTensor<T>::at(int n, int c, int h, int w) const {
  const Shape& s = shape();
  return node_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w +
                     w];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_data(shape(), node_->data, false);
}

template <typename T>
BasicTensor<T> make_result(
    Shape shape, std::vector<T> data,
    std::vector<std::shared_ptr<detail::Node<T>>> parents,
    std::function<void(detail::Node<T>&)> backward_fn) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape;
  node->data = std::move(data);
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  node->requires_grad = any;
  if (any) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(node));
}

namespace {

template <typename T>
std::vector<detail::Node<T>*> topo_order(detail::Node<T>* root) {
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  // Iterative post-order DFS; parents are visited in declaration order.
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void backward(const BasicTensor<T>& output, std::span<const T> seed) {
  if (seed.size() != output.numel()) {
    throw ShapeError("backward seed length " + std::to_string(seed.size()) +
                     " does not match output shape " + output.shape().str());
  }
  detail::Node<T>* root = output.node().get();
  if (!root->requires_grad) return;
  auto& g = root->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  auto order = topo_order(root);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

template <typename T>
void backward(const BasicTensor<T>& output) {
  if (output.numel() != 1) {
    throw ShapeError("backward() without seed needs a scalar, got " +
                     output.shape().str());
  }
  const T one = T(1);
  backward(output, std::span<const T>(&one, 1));
}

template <typename T>
bool all_finite(const BasicTensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(v)) return false;
  for (T v : t.grad())
    if (!std::isfinite(v)) return false;
  return true;
}

#define DSEM_INSTANTIATE(T)                                                   \
  template class BasicTensor<T>;                                              \
  template BasicTensor<T> make_result<T>(                                     \
      Shape, std::vector<T>, std::vector<std::shared_ptr<detail::Node<T>>>, \
      std::function<void(detail::Node<T>&)>);                                 \
  template void backward<T>(const BasicTensor<T>&);                           \
  template void backward<T>(const BasicTensor<T>&, std::span<const T>);       \
  template bool all_finite<T>(const BasicTensor<T>&);

DSEM_INSTANTIATE(float)
DSEM_INSTANTIATE(double)
#undef DSEM_INSTANTIATE

}  // namespace dsem
