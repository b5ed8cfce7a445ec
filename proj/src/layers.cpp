#include "limeguard/detail/layers.hpp"

#include <cmath>

#include "limeguard/detail/gemm.hpp"

namespace limeguard::detail {

namespace {

void he_normal(std::mt19937_64& rng, std::span<double> w, std::size_t fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : w) v = dist(rng);
}

template <class T>
BasicTensor<T> empty_like_input(const LayerCache<T>& cache) {
  return BasicTensor<T>(cache.n, cache.in_shape);
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               std::size_t stride, std::size_t padding, bool zero_init)
    : in_c_(in_channels), out_c_(out_channels), k_(kernel), stride_(stride), pad_(padding),
      zero_init_(zero_init) {
  if (in_c_ == 0 || out_c_ == 0 || k_ == 0 || stride_ == 0) throw ConfigError("conv2d: zero-sized dimension");
}

InputShape Conv2d::output_shape(InputShape in) const {
  if (in.channels != in_c_) {
    throw ConfigError("conv2d expects " + std::to_string(in_c_) + " channels, got " + in.str());
  }
  if (in.height + 2 * pad_ < k_ || in.width + 2 * pad_ < k_) throw ConfigError("conv2d: input smaller than kernel");
  return {out_c_, (in.height + 2 * pad_ - k_) / stride_ + 1, (in.width + 2 * pad_ - k_) / stride_ + 1};
}

std::size_t Conv2d::num_params() const { return out_c_ * in_c_ * k_ * k_ + out_c_; }

void Conv2d::init_params(std::mt19937_64& rng, std::span<double> params) const {
  const std::size_t nw = out_c_ * in_c_ * k_ * k_;
  if (zero_init_) {
    std::fill(params.begin(), params.end(), 0.0);
  } else {
    he_normal(rng, params.first(nw), in_c_ * k_ * k_);
    std::fill(params.begin() + static_cast<std::ptrdiff_t>(nw), params.end(), 0.0);
  }
}

template <class T>
BasicTensor<T> Conv2d::fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const {
  const InputShape is = in.shape();
  const InputShape os = output_shape(is);
  const std::size_t n = in.batch();
  const std::size_t ckk = in_c_ * k_ * k_;
  const std::size_t plane = os.height * os.width;
  const std::size_t cols_w = n * plane;

  std::vector<T> cols(ckk * cols_w, T(0.0));
  for (std::size_t c = 0; c < in_c_; ++c) {
    for (std::size_t ky = 0; ky < k_; ++ky) {
      for (std::size_t kx = 0; kx < k_; ++kx) {
        T* row = cols.data() + ((c * k_ + ky) * k_ + kx) * cols_w;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t oy = 0; oy < os.height; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(pad_);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
            const T* src = in.data() + ((i * in_c_ + c) * is.height + static_cast<std::size_t>(iy)) * is.width;
            T* dst = row + i * plane + oy * os.width;
            for (std::size_t ox = 0; ox < os.width; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(pad_);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(is.width)) dst[ox] = src[ix];
            }
          }
        }
      }
    }
  }

  std::vector<T> out_mat(out_c_ * cols_w);
  gemm(false, false, out_c_, cols_w, ckk, p.data(), cols.data(), out_mat.data(), false);
  const double* bias = p.data() + out_c_ * ckk;

  BasicTensor<T> out(n, os);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_c_; ++o) {
      const T* src = out_mat.data() + o * cols_w + i * plane;
      T* dst = out.data() + (i * out_c_ + o) * plane;
      for (std::size_t q = 0; q < plane; ++q) dst[q] = src[q] + bias[o];
    }
  }
  if (cache) {
    cache->n = n;
    cache->in_shape = is;
    cache->saved = std::move(cols);
  }
  return out;
}

template <class T>
BasicTensor<T> Conv2d::bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                           std::span<T> grad, bool need_input_grad) const {
  const InputShape is = cache.in_shape;
  const InputShape os = output_shape(is);
  const std::size_t n = cache.n;
  const std::size_t ckk = in_c_ * k_ * k_;
  const std::size_t plane = os.height * os.width;
  const std::size_t cols_w = n * plane;

  std::vector<T> gmat(out_c_ * cols_w);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_c_; ++o) {
      const T* src = g.data() + (i * out_c_ + o) * plane;
      T* dst = gmat.data() + o * cols_w + i * plane;
      std::copy_n(src, plane, dst);
    }
  }
  if (!grad.empty()) {
    gemm(false, true, out_c_, ckk, cols_w, gmat.data(), cache.saved.data(), grad.data(), true);
    T* gbias = grad.data() + out_c_ * ckk;
    for (std::size_t o = 0; o < out_c_; ++o) {
      T s(0.0);
      const T* row = gmat.data() + o * cols_w;
      for (std::size_t q = 0; q < cols_w; ++q) s += row[q];
      gbias[o] += s;
    }
  }
  if (!need_input_grad) return {};

  std::vector<T> gcols(ckk * cols_w);
  gemm(true, false, ckk, cols_w, out_c_, p.data(), gmat.data(), gcols.data(), false);
  BasicTensor<T> gin = empty_like_input(cache);
  for (std::size_t c = 0; c < in_c_; ++c) {
    for (std::size_t ky = 0; ky < k_; ++ky) {
      for (std::size_t kx = 0; kx < k_; ++kx) {
        const T* row = gcols.data() + ((c * k_ + ky) * k_ + kx) * cols_w;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t oy = 0; oy < os.height; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - static_cast<std::ptrdiff_t>(pad_);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
            T* dst = gin.data() + ((i * in_c_ + c) * is.height + static_cast<std::size_t>(iy)) * is.width;
            const T* src = row + i * plane + oy * os.width;
            for (std::size_t ox = 0; ox < os.width; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - static_cast<std::ptrdiff_t>(pad_);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(is.width)) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
  return gin;
}

// ---------------------------------------------------------------- Dense

Dense::Dense(std::size_t in_features, std::size_t out_features, bool zero_init)
    : in_(in_features), out_(out_features), zero_init_(zero_init) {
  if (in_ == 0 || out_ == 0) throw ConfigError("dense: zero-sized dimension");
}

InputShape Dense::output_shape(InputShape in) const {
  if (in.size() != in_) {
    throw ConfigError("dense expects " + std::to_string(in_) + " features, got " + in.str());
  }
  return {out_, 1, 1};
}

void Dense::init_params(std::mt19937_64& rng, std::span<double> params) const {
  if (zero_init_) {
    std::fill(params.begin(), params.end(), 0.0);
    return;
  }
  he_normal(rng, params.first(out_ * in_), in_);
  std::fill(params.begin() + static_cast<std::ptrdiff_t>(out_ * in_), params.end(), 0.0);
}

template <class T>
BasicTensor<T> Dense::fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const {
  const InputShape os = output_shape(in.shape());
  const std::size_t n = in.batch();
  BasicTensor<T> out(n, os);
  gemm(false, true, n, out_, in_, in.data(), p.data(), out.data(), false);
  const double* bias = p.data() + out_ * in_;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out_; ++o) out.data()[i * out_ + o] += bias[o];
  }
  if (cache) {
    cache->n = n;
    cache->in_shape = in.shape();
    cache->saved = in.storage();
  }
  return out;
}

template <class T>
BasicTensor<T> Dense::bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                          std::span<T> grad, bool need_input_grad) const {
  const std::size_t n = cache.n;
  if (!grad.empty()) {
    gemm(true, false, out_, in_, n, g.data(), cache.saved.data(), grad.data(), true);
    T* gbias = grad.data() + out_ * in_;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < out_; ++o) gbias[o] += g.data()[i * out_ + o];
    }
  }
  if (!need_input_grad) return {};
  BasicTensor<T> gin = empty_like_input(cache);
  gemm(false, false, n, in_, out_, g.data(), p.data(), gin.data(), false);
  return gin;
}

// ---------------------------------------------------------------- Relu

template <class T>
BasicTensor<T> Relu::fwd(const BasicTensor<T>& in, std::span<const double>, LayerCache<T>* cache) const {
  BasicTensor<T> out(in.batch(), in.shape());
  if (cache) {
    cache->n = in.batch();
    cache->in_shape = in.shape();
    cache->index.assign(in.size(), 0);
  }
  for (std::size_t q = 0; q < in.size(); ++q) {
    const bool on = primal(in[q]) > 0.0;
    out[q] = on ? in[q] : T(0.0);
    if (cache) cache->index[q] = on ? 1u : 0u;
  }
  return out;
}

template <class T>
BasicTensor<T> Relu::bwd(const BasicTensor<T>& g, std::span<const double>, const LayerCache<T>& cache,
                         std::span<T>, bool need_input_grad) const {
  if (!need_input_grad) return {};
  BasicTensor<T> gin = empty_like_input(cache);
  for (std::size_t q = 0; q < gin.size(); ++q) gin[q] = cache.index[q] ? g[q] : T(0.0);
  return gin;
}

// ---------------------------------------------------------------- MaxPool2

InputShape MaxPool2::output_shape(InputShape in) const {
  if (in.height < 2 || in.width < 2) throw ConfigError("maxpool2: input smaller than window");
  return {in.channels, in.height / 2, in.width / 2};
}

template <class T>
BasicTensor<T> MaxPool2::fwd(const BasicTensor<T>& in, std::span<const double>, LayerCache<T>* cache) const {
  const InputShape is = in.shape();
  const InputShape os = output_shape(is);
  const std::size_t n = in.batch();
  BasicTensor<T> out(n, os);
  if (cache) {
    cache->n = n;
    cache->in_shape = is;
    cache->index.assign(out.size(), 0);
  }
  std::size_t q = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < is.channels; ++c) {
      const std::size_t base = (i * is.channels + c) * is.plane();
      for (std::size_t oy = 0; oy < os.height; ++oy) {
        for (std::size_t ox = 0; ox < os.width; ++ox, ++q) {
          std::size_t best = base + (2 * oy) * is.width + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = base + (2 * oy + dy) * is.width + 2 * ox + dx;
              if (primal(in[idx]) > primal(in[best])) best = idx;
            }
          }
          out[q] = in[best];
          if (cache) cache->index[q] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return out;
}

template <class T>
BasicTensor<T> MaxPool2::bwd(const BasicTensor<T>& g, std::span<const double>, const LayerCache<T>& cache,
                             std::span<T>, bool need_input_grad) const {
  if (!need_input_grad) return {};
  BasicTensor<T> gin = empty_like_input(cache);
  for (std::size_t q = 0; q < g.size(); ++q) gin[cache.index[q]] += g[q];
  return gin;
}

// ---------------------------------------------------------------- GlobalAvgPool

template <class T>
BasicTensor<T> GlobalAvgPool::fwd(const BasicTensor<T>& in, std::span<const double>, LayerCache<T>* cache) const {
  const InputShape is = in.shape();
  const std::size_t plane = is.plane();
  BasicTensor<T> out(in.batch(), output_shape(is));
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t m = 0; m < in.batch() * is.channels; ++m) {
    T s(0.0);
    for (std::size_t q = 0; q < plane; ++q) s += in[m * plane + q];
    out[m] = s * T(inv);
  }
  if (cache) {
    cache->n = in.batch();
    cache->in_shape = is;
  }
  return out;
}

template <class T>
BasicTensor<T> GlobalAvgPool::bwd(const BasicTensor<T>& g, std::span<const double>, const LayerCache<T>& cache,
                                  std::span<T>, bool need_input_grad) const {
  if (!need_input_grad) return {};
  BasicTensor<T> gin = empty_like_input(cache);
  const std::size_t plane = cache.in_shape.plane();
  const T inv(1.0 / static_cast<double>(plane));
  for (std::size_t m = 0; m < g.size(); ++m) {
    const T v = g[m] * inv;
    for (std::size_t q = 0; q < plane; ++q) gin[m * plane + q] = v;
  }
  return gin;
}

// ---------------------------------------------------------------- Flatten

template <class T>
BasicTensor<T> Flatten::fwd(const BasicTensor<T>& in, std::span<const double>, LayerCache<T>* cache) const {
  BasicTensor<T> out = in;
  out.reshape(output_shape(in.shape()));
  if (cache) {
    cache->n = in.batch();
    cache->in_shape = in.shape();
  }
  return out;
}

template <class T>
BasicTensor<T> Flatten::bwd(const BasicTensor<T>& g, std::span<const double>, const LayerCache<T>& cache,
                            std::span<T>, bool need_input_grad) const {
  if (!need_input_grad) return {};
  BasicTensor<T> gin = g;
  gin.reshape(cache.in_shape);
  return gin;
}

// ---------------------------------------------------------------- Residual

Residual::Residual(std::vector<LayerPtr> body, std::vector<LayerPtr> shortcut)
    : body_(std::move(body)), shortcut_(std::move(shortcut)) {
  if (body_.empty()) throw ConfigError("residual: empty body");
}

InputShape Residual::output_shape(InputShape in) const {
  InputShape a = in;
  for (const auto& l : body_) a = l->output_shape(a);
  InputShape b = in;
  for (const auto& l : shortcut_) b = l->output_shape(b);
  if (!(a == b)) throw ConfigError("residual: body " + a.str() + " vs shortcut " + b.str());
  return a;
}

std::size_t Residual::num_params() const {
  std::size_t total = 0;
  for (const auto& l : body_) total += l->num_params();
  for (const auto& l : shortcut_) total += l->num_params();
  return total;
}

void Residual::init_params(std::mt19937_64& rng, std::span<double> params) const {
  std::size_t off = 0;
  for (const auto* branch : {&body_, &shortcut_}) {
    for (const auto& l : *branch) {
      l->init_params(rng, params.subspan(off, l->num_params()));
      off += l->num_params();
    }
  }
}

template <class T>
BasicTensor<T> Residual::fwd(const BasicTensor<T>& in, std::span<const double> p, LayerCache<T>* cache) const {
  if (cache) {
    cache->n = in.batch();
    cache->in_shape = in.shape();
    cache->children.assign(body_.size() + shortcut_.size(), {});
  }
  std::size_t off = 0;
  std::size_t slot = 0;
  BasicTensor<T> a = in;
  for (const auto& l : body_) {
    a = l->forward(a, p.subspan(off, l->num_params()), cache ? &cache->children[slot] : nullptr);
    off += l->num_params();
    ++slot;
  }
  BasicTensor<T> b = in;
  for (const auto& l : shortcut_) {
    b = l->forward(b, p.subspan(off, l->num_params()), cache ? &cache->children[slot] : nullptr);
    off += l->num_params();
    ++slot;
  }
  for (std::size_t q = 0; q < a.size(); ++q) a[q] += b[q];
  return a;
}

template <class T>
BasicTensor<T> Residual::bwd(const BasicTensor<T>& g, std::span<const double> p, const LayerCache<T>& cache,
                             std::span<T> grad, bool need_input_grad) const {
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& l : body_) {
    offsets.push_back(off);
    off += l->num_params();
  }
  for (const auto& l : shortcut_) {
    offsets.push_back(off);
    off += l->num_params();
  }
  // Inner layers always propagate; the flag only matters at the network input.
  auto run_branch = [&](const std::vector<LayerPtr>& layers, std::size_t first_slot) {
    BasicTensor<T> cur = g;
    for (std::size_t r = layers.size(); r-- > 0;) {
      const auto& l = layers[r];
      const std::size_t slot = first_slot + r;
      cur = l->backward(cur, p.subspan(offsets[slot], l->num_params()), cache.children[slot],
                        grad.empty() ? grad : grad.subspan(offsets[slot], l->num_params()),
                        need_input_grad || r > 0);
    }
    return cur;
  };
  BasicTensor<T> ga = run_branch(body_, 0);
  BasicTensor<T> gb = shortcut_.empty() ? g : run_branch(shortcut_, body_.size());
  if (!need_input_grad) return {};
  for (std::size_t q = 0; q < ga.size(); ++q) ga[q] += gb[q];
  return ga;
}

#define LIMEGUARD_INSTANTIATE_LAYER(L, T)                                                        \
  template BasicTensor<T> L::fwd<T>(const BasicTensor<T>&, std::span<const double>, LayerCache<T>*) \
      const;                                                                                     \
  template BasicTensor<T> L::bwd<T>(const BasicTensor<T>&, std::span<const double>,             \
                                    const LayerCache<T>&, std::span<T>, bool) const;

#define LIMEGUARD_INSTANTIATE_BOTH(L)    \
  LIMEGUARD_INSTANTIATE_LAYER(L, double) \
  LIMEGUARD_INSTANTIATE_LAYER(L, Dual)

LIMEGUARD_INSTANTIATE_BOTH(Conv2d)
LIMEGUARD_INSTANTIATE_BOTH(Dense)
LIMEGUARD_INSTANTIATE_BOTH(Relu)
LIMEGUARD_INSTANTIATE_BOTH(MaxPool2)
LIMEGUARD_INSTANTIATE_BOTH(GlobalAvgPool)
LIMEGUARD_INSTANTIATE_BOTH(Flatten)
LIMEGUARD_INSTANTIATE_BOTH(Residual)

}  // namespace limeguard::detail
