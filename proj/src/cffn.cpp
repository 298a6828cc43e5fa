#include "atd/cffn.hpp"

#include <cmath>

namespace atd {

CffnParams CffnParams::create(std::size_t dim, bool category_aware, Rng& rng) {
  if (dim < 2 || dim % 2 != 0) throw Error("cffn: width must be even, got " + std::to_string(dim));
  CffnParams p;
  p.norm = LayerNorm::create(dim);
  p.expand = Linear::create(dim, 2 * dim, rng);
  if (category_aware) p.category = Linear::create(dim, dim / 2, rng);
  const std::size_t hidden = 2 * dim + (category_aware ? dim / 2 : 0);
  const float bound = 1.0f / 3.0f;  // fan-in of a 3x3 depth-wise tap set
  p.dw_weight = Tensor::uniform({3, 3, hidden}, -bound, bound, rng, true);
  p.dw_bias = Tensor::zeros({hidden}, true);
  p.project = Linear::create(hidden, dim, rng);
  return p;
}

void CffnParams::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  expand.collect(out, prefix + ".expand");
  if (category_aware()) category.collect(out, prefix + ".category");
  out.push_back({prefix + ".dw.weight", dw_weight});
  out.push_back({prefix + ".dw.bias", dw_bias});
  project.collect(out, prefix + ".project");
}

Tensor select_embedding(const Tensor& entries, std::span<const int> idx) {
  if (entries.rank() != 2) throw ShapeError("select_embedding: entries must be M x d");
  std::vector<std::size_t> rows(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || static_cast<std::size_t>(idx[j]) >= entries.dim(0)) {
      throw Error("select_embedding: index " + std::to_string(idx[j]) + " outside [0, " +
                  std::to_string(entries.dim(0)) + ")");
    }
    rows[j] = static_cast<std::size_t>(idx[j]);
  }
  return gather_rows(entries, rows);
}

Tensor cffn(const Tensor& x, const Tensor& delta, const CffnParams& p) {
  if (x.rank() != 3 || x.dim(2) != p.expand.in_features()) {
    throw ShapeError("cffn: features " + shape_str(x.shape()) + " do not match width " +
                     std::to_string(p.expand.in_features()));
  }
  Tensor hidden = p.expand(p.norm(x));
  if (p.category_aware()) {
    if (!delta.defined() || delta.shape() != x.shape()) {
      throw ShapeError("cffn: category embedding " + (delta.defined() ? shape_str(delta.shape()) : "<none>") +
                       " must match " + shape_str(x.shape()));
    }
    hidden = concat_last(hidden, p.category(delta));
  }
  Tensor mixed = dwconv2d(gelu(hidden), p.dw_weight, p.dw_bias);
  return add(x, p.project(mixed));
}

}  // namespace atd
