#include "dsem/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "dsem/ops.hpp"

namespace dsem {

template <typename T>
Parameter<T>& ParamStore<T>::create(std::string name, Shape shape) {
  if (find(name) != nullptr) {
    throw std::invalid_argument("duplicate parameter name '" + name + "'");
  }
  Parameter<T>& p = params_.emplace_back();
  p.name = std::move(name);
  p.tensor = BasicTensor<T>::zeros(shape, true);
  p.momentum_buffer.assign(shape.numel(), T(0));
  return p;
}

template <typename T>
Parameter<T>* ParamStore<T>::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
const Parameter<T>* ParamStore<T>::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::vector<Parameter<T>*> ParamStore<T>::all() {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ParamStore<T>::all() const {
  std::vector<const Parameter<T>*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

template <typename T>
Conv2d<T> Conv2d<T>::create(ParamStore<T>& store, const std::string& name,
                            int cin, int cout, int kernel, int stride,
                            int padding, int dilation) {
  Conv2d conv;
  conv.weight = &store.create(name + ".weight", Shape{cout, cin, kernel, kernel});
  conv.bias = &store.create(name + ".bias", Shape{1, cout, 1, 1});
  conv.stride = stride;
  conv.padding = padding;
  conv.dilation = dilation;
  return conv;
}

template <typename T>
BasicTensor<T> Conv2d<T>::operator()(const BasicTensor<T>& x) const {
  return conv2d(x, weight->tensor, bias->tensor, stride, padding, dilation);
}

template <typename T>
void init_conv(Conv2d<T>& conv, Rng& rng) {
  const Shape ws = conv.weight->tensor.shape();
  const double fan_in = static_cast<double>(ws.c) * ws.h * ws.w;
  const double bound = std::sqrt(6.0 / fan_in);
  for (T& v : conv.weight->tensor.mutable_data())
    v = static_cast<T>(rng.uniform(-bound, bound));
  for (T& v : conv.bias->tensor.mutable_data()) v = T(0);
}

namespace {

template <typename T>
void step_one(Parameter<T>& p, double lr, double momentum, double weight_decay) {
  if (!p.tensor.has_grad()) {
    throw std::runtime_error("sgd_step: parameter '" + p.name + "' has no gradient");
  }
  auto w = p.tensor.mutable_data();
  auto g = p.tensor.grad();
  const T m = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  const T eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < w.size(); ++i) {
    T& v = p.momentum_buffer[i];
    v = m * v + g[i] + wd * w[i];
    w[i] -= eta * v;
  }
  p.tensor.zero_grad();
}

}  // namespace

template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, double lr, double momentum,
              double weight_decay) {
  // Validate up front so a failure leaves every parameter untouched.
  for (const Parameter<T>* p : params) {
    if (!p->tensor.has_grad()) {
      throw std::runtime_error("sgd_step: parameter '" + p->name + "' has no gradient");
    }
  }
  for (Parameter<T>* p : params) step_one(*p, lr, momentum, weight_decay);
}

template <typename T>
void sgd_step(std::span<const ParamGroup<T>> groups, double lr, double momentum,
              double weight_decay) {
  for (const auto& group : groups)
    for (const Parameter<T>* p : group.params)
      if (!p->tensor.has_grad())
        throw std::runtime_error("sgd_step: parameter '" + p->name + "' has no gradient");
  for (const auto& group : groups)
    for (Parameter<T>* p : group.params)
      step_one(*p, lr * group.lr_multiplier, momentum, weight_decay);
}

template <typename T>
void zero_grads(std::span<Parameter<T>* const> params) {
  for (Parameter<T>* p : params) p->tensor.zero_grad();
}

#define DSEM_INSTANTIATE_NN(T)                                                 \
  template class ParamStore<T>;                                                \
  template struct Conv2d<T>;                                                   \
  template void init_conv(Conv2d<T>&, Rng&);                                   \
  template void sgd_step(std::span<Parameter<T>* const>, double, double, double); \
  template void sgd_step(std::span<const ParamGroup<T>>, double, double, double); \
  template void zero_grads(std::span<Parameter<T>* const>);

DSEM_INSTANTIATE_NN(float)
DSEM_INSTANTIATE_NN(double)
#undef DSEM_INSTANTIATE_NN

}  // namespace dsem
