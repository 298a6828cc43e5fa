#include "atd/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numbers>

namespace atd {

Image Image::zeros(std::size_t h, std::size_t w, std::size_t c) {
  if (c != 1 && c != 3) throw Error("Image: channels must be 1 or 3, got " + std::to_string(c));
  return {h, w, c, std::vector<float>(h * w * c, 0.0f)};
}

namespace {

std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::floor(c * 255.0f + 0.5f));
}

png_image blank_image() {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  return im;
}

void write_image(const std::string& path, png_image& im, const void* buffer, const void* colormap) {
  if (!png_image_write_to_file(&im, path.c_str(), 0, buffer, 0, colormap)) {
    const std::string msg = im.message;
    png_image_free(&im);
    throw Error("png: cannot write " + path + ": " + msg);
  }
}

}  // namespace

Image read_png(const std::string& path) {
  png_image im = blank_image();
  if (!png_image_begin_read_from_file(&im, path.c_str())) {
    throw Error("png: cannot read " + path + ": " + im.message);
  }
  const bool color = (im.format & PNG_FORMAT_FLAG_COLOR) != 0;
  im.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img = Image::zeros(im.height, im.width, color ? 3 : 1);
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(im));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&im, &black, buf.data(), 0, nullptr)) {
    const std::string msg = im.message;
    png_image_free(&im);
    throw Error("png: cannot decode " + path + ": " + msg);
  }
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("write_png: channels must be 1 or 3");
  std::vector<std::uint8_t> px(img.data.size());
  std::transform(img.data.begin(), img.data.end(), px.begin(), quantize);
  png_image im = blank_image();
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  write_image(path, im, px.data(), nullptr);
}

void write_indexed_png(const std::string& path, const std::vector<std::uint8_t>& indices, std::size_t h,
                       std::size_t w, const std::vector<std::uint8_t>& palette_rgb) {
  const std::size_t colors = palette_rgb.size() / 3;
  if (colors == 0 || colors > 256 || palette_rgb.size() % 3 != 0) throw Error("write_indexed_png: bad palette");
  if (indices.size() != h * w) throw ShapeError("write_indexed_png: index count does not match extents");
  for (auto i : indices)
    if (i >= colors) throw Error("write_indexed_png: index outside palette");
  png_image im = blank_image();
  im.width = static_cast<png_uint_32>(w);
  im.height = static_cast<png_uint_32>(h);
  im.format = PNG_FORMAT_RGB_COLORMAP;
  im.colormap_entries = static_cast<png_uint_32>(colors);
  write_image(path, im, indices.data(), palette_rgb.data());
}

Tensor image_to_tensor(const Image& img) {
  return Tensor::from({img.height, img.width, img.channels}, img.data);
}

Image tensor_to_image(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("tensor_to_image: expected H x W x C, got " + shape_str(t.shape()));
  Image img = Image::zeros(t.dim(0), t.dim(1), t.dim(2));
  auto d = t.data();
  std::transform(d.begin(), d.end(), img.data.begin(), [](float v) { return std::clamp(v, 0.0f, 1.0f); });
  return img;
}

double cubic_kernel(double x) {
  const double a = -0.5;
  x = std::fabs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

ResizeTaps bicubic_taps(std::size_t in_len, std::size_t out_len) {
  if (in_len == 0 || out_len == 0) throw Error("bicubic_resize: extents must be positive");
  const double scale = static_cast<double>(out_len) / static_cast<double>(in_len);
  const double stretch = scale < 1.0 ? scale : 1.0;
  const double support = 2.0 / stretch;
  ResizeTaps taps;
  for (std::size_t i = 0; i < out_len; ++i) {
    const double center = (static_cast<double>(i) + 0.5) / scale - 0.5;
    const long first = static_cast<long>(std::floor(center - support)) + 1;
    const long last = static_cast<long>(std::ceil(center + support)) - 1;
    std::vector<double> w;
    double total = 0.0;
    for (long p = first; p <= last; ++p) {
      const double k = stretch * cubic_kernel(stretch * (center - static_cast<double>(p)));
      w.push_back(k);
      total += k;
    }
    for (auto& v : w) v /= total;
    taps.first.push_back(first);
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

Image bicubic_resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (img.height == 0 || img.width == 0) throw Error("bicubic_resize: empty input");
  const auto rows = bicubic_taps(img.height, out_h);
  const auto cols = bicubic_taps(img.width, out_w);
  const std::size_t c = img.channels;
  auto clampi = [](long p, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(p, 0, long(n) - 1)); };
  // Vertical pass into doubles, then horizontal.
  std::vector<double> mid(out_h * img.width * c, 0.0);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& w = rows.weights[y];
    for (std::size_t t = 0; t < w.size(); ++t) {
      const std::size_t sy = clampi(rows.first[y] + long(t), img.height);
      for (std::size_t x = 0; x < img.width * c; ++x) mid[y * img.width * c + x] += w[t] * img.data[sy * img.width * c + x];
    }
  }
  Image out = Image::zeros(out_h, out_w, c);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& w = cols.weights[x];
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t t = 0; t < w.size(); ++t) {
          const std::size_t sx = clampi(cols.first[x] + long(t), img.width);
          acc += w[t] * mid[(y * img.width + sx) * c + ch];
        }
        out.at(y, x, ch) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Image bicubic_resize(const Image& img, double scale) {
  if (!(scale > 0.0)) throw Error("bicubic_resize: scale must be positive");
  const auto h = static_cast<std::size_t>(std::lround(static_cast<double>(img.height) * scale));
  const auto w = static_cast<std::size_t>(std::lround(static_cast<double>(img.width) * scale));
  if (h == 0 || w == 0) throw Error("bicubic_resize: output would be empty");
  return bicubic_resize(img, h, w);
}

Image crop_border(const Image& img, std::size_t border) {
  if (border == 0) return img;
  if (2 * border >= img.height || 2 * border >= img.width) throw Error("crop_border: border too large");
  Image out = Image::zeros(img.height - 2 * border, img.width - 2 * border, img.channels);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y + border, x + border, c);
  return out;
}

Image to_y(const Image& img) {
  if (img.channels == 1) return img;
  Image out = Image::zeros(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const double r = img.data[3 * i], g = img.data[3 * i + 1], b = img.data[3 * i + 2];
    out.data[i] = static_cast<float>((16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0);
  }
  return out;
}

namespace {

void require_same(const Image& a, const Image& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shapes differ (" + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     "x" + std::to_string(a.channels) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + "x" + std::to_string(b.channels) + ")");
  }
}

}  // namespace

double psnr(const Image& a, const Image& b, ChannelMode mode) {
  require_same(a, b, "psnr");
  const Image x = mode == ChannelMode::kY ? to_y(a) : a;
  const Image y = mode == ChannelMode::kY ? to_y(b) : b;
  double se = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = static_cast<double>(x.data[i]) - y.data[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(x.data.size())));
}

double ssim(const Image& a, const Image& b, ChannelMode mode) {
  require_same(a, b, "ssim");
  if (a.height < 11 || a.width < 11) throw Error("ssim: images must be at least 11x11");
  const Image x = mode == ChannelMode::kY ? to_y(a) : a;
  const Image y = mode == ChannelMode::kY ? to_y(b) : b;
  double g[11];
  double gs = 0.0;
  for (int i = 0; i < 11; ++i) gs += (g[i] = std::exp(-((i - 5) * (i - 5)) / (2.0 * 1.5 * 1.5)));
  for (double& v : g) v /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t oh = x.height - 10, ow = x.width - 10;
  double total = 0.0;
  for (std::size_t c = 0; c < x.channels; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t u = 0; u < 11; ++u) {
          for (std::size_t v = 0; v < 11; ++v) {
            const double w = g[u] * g[v];
            const double p = x.at(i + u, j + v, c), q = y.at(i + u, j + v, c);
            mx += w * p;
            my += w * q;
            sxx += w * p * p;
            syy += w * q * q;
            sxy += w * p * q;
          }
        }
        const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
  }
  return total / static_cast<double>(oh * ow * x.channels);
}

MetricResult evaluate(const Image& output, const Image& reference, ChannelMode mode, std::size_t border) {
  const Image o = crop_border(output, border), r = crop_border(reference, border);
  MetricResult m;
  m.mode = mode;
  m.psnr_db = psnr(o, r, mode);
  m.ssim = (o.height >= 11 && o.width >= 11) ? ssim(o, r, mode) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

std::string psnr_json(double db) {
  if (std::isinf(db)) return "\"inf\"";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", db);
  return buf;
}

Image synthetic_patch(std::size_t size, Rng& rng) {
  std::uniform_real_distribution<double> freq(0.5, 2.5), phase(0.0, 2.0 * std::numbers::pi), amp(0.05, 0.15);
  Image img = Image::zeros(size, size, 3);
  const double n = static_cast<double>(size);
  for (std::size_t c = 0; c < 3; ++c) {
    double fx[3], fy[3], ph[3], am[3];
    for (int k = 0; k < 3; ++k) fx[k] = freq(rng), fy[k] = freq(rng), ph[k] = phase(rng), am[k] = amp(rng);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        double v = 0.5;
        for (int k = 0; k < 3; ++k)
          v += am[k] * std::cos(2.0 * std::numbers::pi * (fx[k] * x + fy[k] * y) / n + ph[k]);
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

}  // namespace atd
