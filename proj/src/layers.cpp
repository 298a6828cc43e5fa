#include "atd/layers.hpp"

#include <cmath>

namespace atd {

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng) {
  return {Tensor::randn({in, out}, 0.02f, rng, true), Tensor::zeros({out}, true)};
}

void Linear::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Conv2d Conv2d::create(std::size_t k, std::size_t cin, std::size_t cout, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(k * k * cin));
  return {Tensor::uniform({k, k, cin, cout}, -bound, bound, rng, true), Tensor::zeros({cout}, true)};
}

void Conv2d::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm LayerNorm::create(std::size_t channels) {
  return {Tensor::full({channels}, 1.0f, true), Tensor::zeros({channels}, true), 1e-5f};
}

void LayerNorm::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

}  // namespace atd
