#pragma once

#include <span>
#include <string>
#include <vector>

#include "atd/layers.hpp"

namespace atd {

/// Feed-forward branch with optional category embedding input:
/// out = x + proj(dwconv3x3(gelu([LN(x) expand, delta embed])))
struct CffnParams {
  LayerNorm norm;
  Linear expand;    // d -> 2d
  Linear category;  // d -> d/2; undefined weights when the category path is off
  Tensor dw_weight;  // [3 x 3 x hidden]
  Tensor dw_bias;    // [hidden]
  Linear project;   // hidden -> d

  static CffnParams create(std::size_t dim, bool category_aware, Rng& rng);
  bool category_aware() const { return category.weight.defined(); }
  std::size_t hidden() const { return dw_bias.dim(0); }
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Row j is entries[idx[j]]; backward scatter-adds into the selected rows.
Tensor select_embedding(const Tensor& entries, std::span<const int> idx);

/// x and delta are H x W x d; delta is ignored (may be undefined) when the
/// category path is off.
Tensor cffn(const Tensor& x, const Tensor& delta, const CffnParams& p);

}  // namespace atd
