#pragma once

#include <string>
#include <vector>

#include "atd/layers.hpp"

namespace atd {

/// Token order for a cyclic roll by (-shift, -shift) followed by
/// window x window tiles in raster order.
struct WindowLayout {
  std::size_t height = 0, width = 0, window = 0, shift = 0;
  std::vector<std::size_t> order;    // partitioned row -> raster token
  std::vector<std::size_t> inverse;  // raster token -> partitioned row
  std::vector<Range> groups;
  /// window*window additive block per window (0 or -inf); empty when shift == 0.
  std::vector<float> mask;

  std::size_t window_count() const { return groups.size(); }
};

WindowLayout window_layout(std::size_t height, std::size_t width, std::size_t window, std::size_t shift);

/// [H x W x d] -> [(H W) x d] with rows grouped window by window.
Tensor window_partition(const Tensor& x, std::size_t window, std::size_t shift);
/// Inverse of window_partition.
Tensor window_reverse(const Tensor& windows, std::size_t height, std::size_t width, std::size_t window,
                      std::size_t shift);

struct WindowParams {
  Linear query;
  Linear key;
  Linear value;
  Linear out;
  Tensor rel_pos_bias;  // [(2w-1)^2 x heads], zero init
  std::size_t window = 8;
  std::size_t shift = 0;
  std::size_t heads = 1;

  static WindowParams create(std::size_t dim, std::size_t window, std::size_t shift, std::size_t heads, Rng& rng);
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Table row for the offset between two positions of a window.
std::size_t relative_index(std::size_t window, std::size_t qy, std::size_t qx, std::size_t ky, std::size_t kx);
/// Expands the bias table to [heads x w^2 x w^2]; differentiable.
Tensor relative_bias(const Tensor& table, std::size_t window, std::size_t heads);

/// Shifted-window multi-head self-attention over an H x W x d feature map.
Tensor swmsa(const Tensor& x, const WindowParams& p);

/// Post-softmax weights of one window and head, [w^2 x w^2] row-major.
std::vector<float> swmsa_attention_weights(const Tensor& x, const WindowParams& p, std::size_t window_index,
                                           std::size_t head);

}  // namespace atd
