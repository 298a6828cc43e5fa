#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "atd/tensor.hpp"

namespace atd {

// Elementwise and reductions -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
/// x * s where s holds a single learnable value.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
/// Adds b[C] along the last axis.
Tensor add_bias(const Tensor& x, const Tensor& b);
Tensor gelu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean |a - b|
Tensor l1_loss(const Tensor& a, const Tensor& b);
/// mean sqrt((a - b)^2 + eps^2)
Tensor charbonnier_loss(const Tensor& a, const Tensor& b, float eps = 1e-3f);

// Shape manipulation ---------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
/// Rows of x[N x d] selected by index; backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
/// Concatenates along the last axis; leading extents must agree.
Tensor concat_last(const Tensor& a, const Tensor& b);

// Dense algebra --------------------------------------------------------------

/// a[m x k] * b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[... x in] * w[in x out] + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Softmax over the last axis with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
/// Rows scaled to unit norm; norms below eps are clamped to eps.
Tensor l2_normalize_rows(const Tensor& x, float eps);

// Images (channels-last H x W x C) -------------------------------------------

/// Same-padded cross-correlation; w is [k x k x Cin x Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
/// Depth-wise same-padded cross-correlation; w is [k x k x C].
Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& b);
/// [H x W x r*r*C] -> [rH x rW x C]; channel block (i, j) lands at offset (i, j).
Tensor pixel_shuffle(const Tensor& x, std::size_t r);
Tensor pixel_unshuffle(const Tensor& x, std::size_t r);
/// Reflect-pads the bottom and right edges.
Tensor reflect_pad(const Tensor& x, std::size_t pad_bottom, std::size_t pad_right);
/// Keeps the top-left h x w region.
Tensor crop(const Tensor& x, std::size_t h, std::size_t w);

// Attention -------------------------------------------------------------------

/// Half-open row range [begin, end).
struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const Range&) const = default;
};

/// Multi-head scaled dot-product attention computed independently inside each
/// row range of q, k, v (all [N x d]). Scale is 1/sqrt(d / heads).
///
/// `bias`, when defined, is [heads x G x G] and added to every group's logits;
/// all groups must then have size G. `mask`, when non-empty, holds one G x G
/// additive block per group (0 or -inf) and is not differentiated.
struct AttentionOptions {
  std::size_t heads = 1;
  Tensor bias;
  std::span<const float> mask;
};

Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::span<const Range> groups, const AttentionOptions& options);

/// Post-softmax weights of one group/head, for inspection.
std::vector<float> grouped_attention_weights(const Tensor& q, const Tensor& k,
                                             std::span<const Range> groups,
                                             const AttentionOptions& options, std::size_t group,
                                             std::size_t head);

// Index utilities ---------------------------------------------------------------

/// Ascending order; equal keys keep their original relative order.
std::vector<std::size_t> stable_argsort(std::span<const int> keys);
std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

}  // namespace atd
