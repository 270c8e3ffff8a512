#pragma once

#include <cstdint>
#include <string>

#include "farmamba/ops.hpp"
#include "farmamba/param_tree.hpp"
#include "farmamba/rng.hpp"
#include "farmamba/tensor.hpp"

// Small parameterized layers. Each layer registers its tensors in a ParamTree
// under a dotted name and keeps shared handles, so checkpoint restore through
// the tree is visible to the layer without rewiring. Initialization draws
// from an Rng stream keyed by (seed, parameter name): construction order
// never changes the values a parameter receives.

namespace farmamba {
namespace init {

template <class R>
Tensor<R> scaled_uniform(Shape shape, std::int64_t fan_in, std::uint64_t seed,
                         const std::string& name) {
  auto rng = Rng::stream(seed, name);
  const R bound = static_cast<R>(1.0 / std::sqrt(static_cast<double>(fan_in)));
  return Tensor<R>::uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace init

template <class R>
struct Conv2dLayer {
  Tensor<R> w, b;
  std::int64_t stride = 1, padding = 0, groups = 1;

  Conv2dLayer() = default;
  Conv2dLayer(ParamTree<R>& tree, const std::string& name, std::uint64_t seed, std::int64_t in_ch,
              std::int64_t out_ch, std::int64_t k, std::int64_t padding_ = 0,
              std::int64_t stride_ = 1, std::int64_t groups_ = 1, bool zero_init = false)
      : stride(stride_), padding(padding_), groups(groups_) {
    const std::int64_t fan_in = (in_ch / groups_) * k * k;
    w = tree.add(name + ".w",
                 zero_init ? Tensor<R>::zeros({out_ch, in_ch / groups_, k, k})
                           : init::scaled_uniform<R>({out_ch, in_ch / groups_, k, k}, fan_in, seed,
                                                     name + ".w"));
    b = tree.add(name + ".b", zero_init ? Tensor<R>::zeros({out_ch})
                                        : init::scaled_uniform<R>({out_ch}, fan_in, seed,
                                                                  name + ".b"));
  }

  Tensor<R> operator()(const Tensor<R>& x) const {
    return conv2d(x, w, b, stride, padding, groups);
  }
};

template <class R>
struct LinearLayer {
  Tensor<R> w, b;

  LinearLayer() = default;
  LinearLayer(ParamTree<R>& tree, const std::string& name, std::uint64_t seed, std::int64_t in_dim,
              std::int64_t out_dim, bool zero_init = false) {
    w = tree.add(name + ".w",
                 zero_init ? Tensor<R>::zeros({in_dim, out_dim})
                           : init::scaled_uniform<R>({in_dim, out_dim}, in_dim, seed, name + ".w"));
    b = tree.add(name + ".b", zero_init ? Tensor<R>::zeros({out_dim})
                                        : init::scaled_uniform<R>({out_dim}, in_dim, seed,
                                                                  name + ".b"));
  }

  Tensor<R> operator()(const Tensor<R>& x) const { return linear(x, w, b); }
};

template <class R>
struct LayerNormLayer {
  Tensor<R> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(ParamTree<R>& tree, const std::string& name, std::int64_t dim) {
    gamma = tree.add(name + ".gamma", Tensor<R>::ones({dim}));
    beta = tree.add(name + ".beta", Tensor<R>::zeros({dim}));
  }

  Tensor<R> operator()(const Tensor<R>& x) const { return layer_norm(x, gamma, beta); }
};

}  // namespace farmamba
