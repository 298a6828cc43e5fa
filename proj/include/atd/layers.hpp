#pragma once

#include <string>
#include <vector>

#include "atd/ops.hpp"

namespace atd {

/// Affine map over the last axis: y = x W + b.
struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  /// Weights ~ N(0, 0.02), zero bias.
  static Linear create(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Same-padded k x k convolution over channels-last images.
struct Conv2d {
  Tensor weight;  // [k x k x Cin x Cout]
  Tensor bias;    // [Cout]

  /// Uniform(+-1/sqrt(fan_in)) weights, zero bias.
  static Conv2d create(std::size_t k, std::size_t cin, std::size_t cout, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias); }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  float eps = 1e-5f;

  static LayerNorm create(std::size_t channels);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

}  // namespace atd
