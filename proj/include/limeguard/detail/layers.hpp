#pragma once

// Differentiable layers. Every layer runs on double and on Dual tensors; the
// Dual instantiation propagates an input-space tangent through the forward
// pass and the backward pass, which is how the penalty on input gradients
// gets exact parameter gradients.

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "limeguard/dual.hpp"
#include "limeguard/tensor.hpp"

namespace limeguard::detail {

template <class T>
struct LayerCache {
  std::size_t n = 0;
  InputShape in_shape{};
  std::vector<T> saved;               // layer input or im2col columns
  std::vector<std::uint32_t> index;   // pooling argmax / relu mask
  std::vector<LayerCache> children;   // residual branches: body..., shortcut...
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string name() const = 0;
  virtual InputShape output_shape(InputShape in) const = 0;
  virtual std::size_t num_params() const { return 0; }
  virtual void init_params(std::mt19937_64& /*rng*/, std::span<double> /*params*/) const {}

  // cache == nullptr selects inference mode: nothing is saved.
  virtual BasicTensor<double> forward(const BasicTensor<double>& in, std::span<const double> p,
                                      LayerCache<double>* cache) const = 0;
  virtual BasicTensor<Dual> forward(const BasicTensor<Dual>& in, std::span<const double> p,
                                    LayerCache<Dual>* cache) const = 0;

  // Accumulates parameter gradients into grad (skipped when grad is empty);
  // returns the input gradient (empty tensor when need_input_grad is false).
  virtual BasicTensor<double> backward(const BasicTensor<double>& grad_out, std::span<const double> p,
                                       const LayerCache<double>& cache, std::span<double> grad,
                                       bool need_input_grad) const = 0;
  virtual BasicTensor<Dual> backward(const BasicTensor<Dual>& grad_out, std::span<const double> p,
                                     const LayerCache<Dual>& cache, std::span<Dual> grad,
                                     bool need_input_grad) const = 0;
};

using LayerPtr = std::shared_ptr<const Layer>;

// CRTP bridge: Derived implements fwd<T> and bwd<T> once.
template <class Derived>
class LayerImpl : public Layer {
 public:
  BasicTensor<double> forward(const BasicTensor<double>& in, std::span<const double> p,
                              LayerCache<double>* cache) const override {
    return self().template fwd<double>(in, p, cache);
  }
  BasicTensor<Dual> forward(const BasicTensor<Dual>& in, std::span<const double> p,
                            LayerCache<Dual>* cache) const override {
    return self().template fwd<Dual>(in, p, cache);
  }
  BasicTensor<double> backward(const BasicTensor<double>& g, std::span<const double> p,
                               const LayerCache<double>& cache, std::span<double> grad,
                               bool need_input_grad) const override {
    return self().template bwd<double>(g, p, cache, grad, need_input_grad);
  }
  BasicTensor<Dual> backward(const BasicTensor<Dual>& g, std::span<const double> p,
                             const LayerCache<Dual>& cache, std::span<Dual> grad,
                             bool need_input_grad) const override {
    return self().template bwd<Dual>(g, p, cache, grad, need_input_grad);
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }
};

class Conv2d final : public LayerImpl<Conv2d> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding, bool zero_init = false);

  std::string name() const override { return "conv2d"; }
  InputShape output_shape(InputShape in) const override;
  std::size_t num_params() const override;
  void init_params(std::mt19937_64& rng, std::span<double> params) const override;

  template <class T>
  BasicTensor<T> fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const;
  template <class T>
  BasicTensor<T> bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                     std::span<T> grad, bool need_input_grad) const;

 private:
  std::size_t in_c_, out_c_, k_, stride_, pad_;
  bool zero_init_;
};

class Dense final : public LayerImpl<Dense> {
 public:
  Dense(std::size_t in_features, std::size_t out_features, bool zero_init = false);

  std::string name() const override { return "dense"; }
  InputShape output_shape(InputShape in) const override;
  std::size_t num_params() const override { return out_ * in_ + out_; }
  void init_params(std::mt19937_64& rng, std::span<double> params) const override;

  template <class T>
  BasicTensor<T> fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const;
  template <class T>
  BasicTensor<T> bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                     std::span<T> grad, bool need_input_grad) const;

 private:
  std::size_t in_, out_;
  bool zero_init_;
};

class Relu final : public LayerImpl<Relu> {
 public:
  std::string name() const override { return "relu"; }
  InputShape output_shape(InputShape in) const override { return in; }

  template <class T>
  BasicTensor<T> fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const;
  template <class T>
  BasicTensor<T> bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                     std::span<T> grad, bool need_input_grad) const;
};

class MaxPool2 final : public LayerImpl<MaxPool2> {
 public:
  std::string name() const override { return "maxpool2"; }
  InputShape output_shape(InputShape in) const override;

  template <class T>
  BasicTensor<T> fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const;
  template <class T>
  BasicTensor<T> bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                     std::span<T> grad, bool need_input_grad) const;
};

class GlobalAvgPool final : public LayerImpl<GlobalAvgPool> {
 public:
  std::string name() const override { return "gap"; }
  InputShape output_shape(InputShape in) const override { return {in.channels, 1, 1}; }

  template <class T>
  BasicTensor<T> fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const;
  template <class T>
  BasicTensor<T> bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                     std::span<T> grad, bool need_input_grad) const;
};

class Flatten final : public LayerImpl<Flatten> {
 public:
  std::string name() const override { return "flatten"; }
  InputShape output_shape(InputShape in) const override { return {in.size(), 1, 1}; }

  template <class T>
  BasicTensor<T> fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const;
  template <class T>
  BasicTensor<T> bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                     std::span<T> grad, bool need_input_grad) const;
};

/// out = body(x) + shortcut(x); an empty shortcut is the identity.
class Residual final : public LayerImpl<Residual> {
 public:
  Residual(std::vector<LayerPtr> body, std::vector<LayerPtr> shortcut);

  std::string name() const override { return "residual"; }
  InputShape output_shape(InputShape in) const override;
  std::size_t num_params() const override;
  void init_params(std::mt19937_64& rng, std::span<double> params) const override;

  template <class T>
  BasicTensor<T> fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const;
  template <class T>
  BasicTensor<T> bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                     std::span<T> grad, bool need_input_grad) const;

 private:
  std::vector<LayerPtr> body_;
  std::vector<LayerPtr> shortcut_;
};

}  // namespace limeguard::detail
