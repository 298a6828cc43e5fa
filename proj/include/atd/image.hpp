#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atd/tensor.hpp"

namespace atd {

/// Interleaved float image with values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<float> data;

  static Image zeros(std::size_t h, std::size_t w, std::size_t c);
  float& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

/// 8-bit PNG in, RGB or grayscale out (alpha dropped, palettes expanded).
Image read_png(const std::string& path);
/// Clamps to [0, 1], quantizes with round-half-up.
void write_png(const std::string& path, const Image& img);
/// Palette image; every index must be below palette.size() / 3 (at most 256).
void write_indexed_png(const std::string& path, const std::vector<std::uint8_t>& indices, std::size_t h,
                       std::size_t w, const std::vector<std::uint8_t>& palette_rgb);

Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);

/// Separable bicubic (a = -0.5) with edge clamping; antialiased when shrinking.
Image bicubic_resize(const Image& img, std::size_t out_h, std::size_t out_w);
/// Output extents are round(extent * scale).
Image bicubic_resize(const Image& img, double scale);
/// Normalized bicubic taps for one axis, exposed for tests: for each output
/// index, (first source index before clamping, weights).
struct ResizeTaps {
  std::vector<long> first;
  std::vector<std::vector<double>> weights;
};
ResizeTaps bicubic_taps(std::size_t in_len, std::size_t out_len);
double cubic_kernel(double x);

Image crop_border(const Image& img, std::size_t border);

enum class ChannelMode { kRgb, kY };
/// BT.601 luma in [0, 1] (16..235 range); grayscale images pass through.
Image to_y(const Image& img);

/// 10 log10(1 / MSE); +infinity for identical images.
double psnr(const Image& a, const Image& b, ChannelMode mode = ChannelMode::kY);
/// Mean SSIM over valid 11 x 11 Gaussian windows, averaged over channels.
double ssim(const Image& a, const Image& b, ChannelMode mode = ChannelMode::kY);

struct MetricResult {
  double psnr_db = 0.0;
  double ssim = 0.0;
  ChannelMode mode = ChannelMode::kY;
};
MetricResult evaluate(const Image& output, const Image& reference, ChannelMode mode, std::size_t border = 0);

/// JSON value for a PSNR: the string "inf" when infinite.
std::string psnr_json(double db);

/// Smooth random RGB patch built from a few low-frequency cosines.
Image synthetic_patch(std::size_t size, Rng& rng);

}  // namespace atd
