#pragma once

#include <deque>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dsem/rng.hpp"
#include "dsem/tensor.hpp"

namespace dsem {

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> tensor;
  std::vector<T> momentum_buffer;
};

// Owns parameters with stable addresses; names are unique.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  // Zero-initialized, requires_grad, zero momentum.
  Parameter<T>& create(std::string name, Shape shape);
  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;

  std::vector<Parameter<T>*> all();
  std::vector<const Parameter<T>*> all() const;
  std::size_t size() const { return params_.size(); }

 private:
  std::deque<Parameter<T>> params_;
};

template <typename T>
struct Conv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  // Registers "<name>.weight" (cout x cin x k x k) and "<name>.bias".
  static Conv2d create(ParamStore<T>& store, const std::string& name, int cin,
                       int cout, int kernel, int stride = 1, int padding = 0,
                       int dilation = 1);

  int in_channels() const { return weight->tensor.shape().c; }
  int out_channels() const { return weight->tensor.shape().n; }
  int kernel() const { return weight->tensor.shape().h; }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

// Kaiming-uniform over fan-in (bound sqrt(6 / fan_in)), zero bias.
template <typename T>
void init_conv(Conv2d<T>& conv, Rng& rng);

template <typename T>
struct ParamGroup {
  std::vector<Parameter<T>*> params;
  double lr_multiplier = 1.0;
};

// v <- momentum*v + grad + weight_decay*w; w <- w - lr*v; grads cleared.
// Throws if any parameter has no gradient, naming it.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, double lr, double momentum,
              double weight_decay);
template <typename T>
void sgd_step(std::span<const ParamGroup<T>> groups, double lr, double momentum,
              double weight_decay);

template <typename T>
void zero_grads(std::span<Parameter<T>* const> params);

}  // namespace dsem
