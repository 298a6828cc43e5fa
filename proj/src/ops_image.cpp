#include <algorithm>
#include <cstddef>

#include "atd/ops.hpp"
#include "atd/parallel.hpp"

namespace atd {

using detail::make_result;
using detail::Node;

namespace {

std::span<float> grad_of(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  t.node()->ensure_grad();
  return t.node()->grad;
}

void require_image(const char* op, const Tensor& x) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected H x W x C, got " + shape_str(x.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_image("conv2d", x);
  if (w.rank() != 4 || w.dim(0) != w.dim(1) || w.dim(0) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be k x k x Cin x Cout with odd k, got " + shape_str(w.shape()));
  }
  const std::size_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const std::size_t k = w.dim(0), cout = w.dim(3);
  if (w.dim(2) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                     std::to_string(w.dim(2)));
  }
  if (b.defined() && b.numel() != cout) throw ShapeError("conv2d: bias " + shape_str(b.shape()));
  const long pad = static_cast<long>(k / 2);
  const float* xd = x.data().data();
  const float* wdat = w.data().data();
  std::vector<float> out(h * wd * cout, 0.0f);
  parallel_for(h, [&](std::size_t y) {
    for (std::size_t xx = 0; xx < wd; ++xx) {
      float* o = out.data() + (y * wd + xx) * cout;
      if (b.defined()) std::copy_n(b.data().begin(), cout, o);
      for (std::size_t dy = 0; dy < k; ++dy) {
        const long iy = static_cast<long>(y + dy) - pad;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t dx = 0; dx < k; ++dx) {
          const long ix = static_cast<long>(xx + dx) - pad;
          if (ix < 0 || ix >= static_cast<long>(wd)) continue;
          const float* in = xd + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin;
          const float* tap = wdat + (dy * k + dx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const float v = in[ci];
            const float* wrow = tap + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += v * wrow[co];
          }
        }
      }
    }
  });
  return make_result("conv2d", {h, wd, cout}, std::move(out), {x, w, b}, [x, w, b, h, wd, cin, k, cout, pad](Node& self) {
    const float* g = self.grad.data();
    const float* xd = x.data().data();
    const float* wdat = w.data().data();
    if (auto gx = grad_of(x); !gx.empty()) {
      parallel_for(h, [&](std::size_t iy) {
        for (std::size_t ix = 0; ix < wd; ++ix) {
          float* dst = gx.data() + (iy * wd + ix) * cin;
          for (std::size_t dy = 0; dy < k; ++dy) {
            const long y = static_cast<long>(iy) + pad - static_cast<long>(dy);
            if (y < 0 || y >= static_cast<long>(h)) continue;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const long xo = static_cast<long>(ix) + pad - static_cast<long>(dx);
              if (xo < 0 || xo >= static_cast<long>(wd)) continue;
              const float* go = g + (static_cast<std::size_t>(y) * wd + static_cast<std::size_t>(xo)) * cout;
              const float* tap = wdat + (dy * k + dx) * cin * cout;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                float acc = 0.0f;
                for (std::size_t co = 0; co < cout; ++co) acc += tap[ci * cout + co] * go[co];
                dst[ci] += acc;
              }
            }
          }
        }
      });
    }
    if (auto gw = grad_of(w); !gw.empty()) {
      parallel_for(k * k * cin, [&](std::size_t idx) {
        const std::size_t dy = idx / (k * cin), dx = (idx / cin) % k, ci = idx % cin;
        float* dst = gw.data() + idx * cout;
        for (std::size_t y = 0; y < h; ++y) {
          const long iy = static_cast<long>(y + dy) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t xo = 0; xo < wd; ++xo) {
            const long ix = static_cast<long>(xo + dx) - pad;
            if (ix < 0 || ix >= static_cast<long>(wd)) continue;
            const float v = xd[(static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin + ci];
            const float* go = g + (y * wd + xo) * cout;
            for (std::size_t co = 0; co < cout; ++co) dst[co] += v * go[co];
          }
        }
      });
    }
    if (auto gb = grad_of(b); !gb.empty())
      for (std::size_t p = 0; p < h * wd; ++p)
        for (std::size_t co = 0; co < cout; ++co) gb[co] += g[p * cout + co];
  });
}

Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_image("dwconv2d", x);
  if (w.rank() != 3 || w.dim(0) != w.dim(1) || w.dim(0) % 2 == 0) {
    throw ShapeError("dwconv2d: kernel must be k x k x C with odd k, got " + shape_str(w.shape()));
  }
  const std::size_t h = x.dim(0), wd = x.dim(1), c = x.dim(2), k = w.dim(0);
  if (w.dim(2) != c) {
    throw ShapeError("dwconv2d: input has " + std::to_string(c) + " channels, kernel has " + std::to_string(w.dim(2)));
  }
  if (b.defined() && b.numel() != c) throw ShapeError("dwconv2d: bias " + shape_str(b.shape()));
  const long pad = static_cast<long>(k / 2);
  const float* xd = x.data().data();
  const float* wdat = w.data().data();
  std::vector<float> out(h * wd * c, 0.0f);
  parallel_for(h, [&](std::size_t y) {
    for (std::size_t xx = 0; xx < wd; ++xx) {
      float* o = out.data() + (y * wd + xx) * c;
      if (b.defined()) std::copy_n(b.data().begin(), c, o);
      for (std::size_t dy = 0; dy < k; ++dy) {
        const long iy = static_cast<long>(y + dy) - pad;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t dx = 0; dx < k; ++dx) {
          const long ix = static_cast<long>(xx + dx) - pad;
          if (ix < 0 || ix >= static_cast<long>(wd)) continue;
          const float* in = xd + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * c;
          const float* tap = wdat + (dy * k + dx) * c;
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += in[ch] * tap[ch];
        }
      }
    }
  });
  return make_result("dwconv2d", {h, wd, c}, std::move(out), {x, w, b}, [x, w, b, h, wd, c, k, pad](Node& self) {
    const float* g = self.grad.data();
    const float* xd = x.data().data();
    const float* wdat = w.data().data();
    if (auto gx = grad_of(x); !gx.empty()) {
      parallel_for(h, [&](std::size_t iy) {
        for (std::size_t ix = 0; ix < wd; ++ix) {
          float* dst = gx.data() + (iy * wd + ix) * c;
          for (std::size_t dy = 0; dy < k; ++dy) {
            const long y = static_cast<long>(iy) + pad - static_cast<long>(dy);
            if (y < 0 || y >= static_cast<long>(h)) continue;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const long xo = static_cast<long>(ix) + pad - static_cast<long>(dx);
              if (xo < 0 || xo >= static_cast<long>(wd)) continue;
              const float* go = g + (static_cast<std::size_t>(y) * wd + static_cast<std::size_t>(xo)) * c;
              const float* tap = wdat + (dy * k + dx) * c;
              for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += tap[ch] * go[ch];
            }
          }
        }
      });
    }
    if (auto gw = grad_of(w); !gw.empty()) {
      parallel_for(k * k, [&](std::size_t t) {
        const std::size_t dy = t / k, dx = t % k;
        float* dst = gw.data() + t * c;
        for (std::size_t y = 0; y < h; ++y) {
          const long iy = static_cast<long>(y + dy) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t xo = 0; xo < wd; ++xo) {
            const long ix = static_cast<long>(xo + dx) - pad;
            if (ix < 0 || ix >= static_cast<long>(wd)) continue;
            const float* in = xd + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * c;
            const float* go = g + (y * wd + xo) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += in[ch] * go[ch];
          }
        }
      });
    }
    if (auto gb = grad_of(b); !gb.empty())
      for (std::size_t p = 0; p < h * wd; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += g[p * c + ch];
  });
}

namespace {

// Flat index map from shuffled output positions to input positions.
std::vector<std::size_t> shuffle_map(std::size_t h, std::size_t w, std::size_t c, std::size_t r) {
  std::vector<std::size_t> map(h * w * r * r * c);
  const std::size_t ow = w * r;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t dst = ((y * r + i) * ow + (x * r + j)) * c + ch;
            const std::size_t src = (y * w + x) * r * r * c + (i * r + j) * c + ch;
            map[dst] = src;
          }
  return map;
}

// out[i] = in[map[i]] with a scatter-add backward.
Tensor permute_flat(const char* op, const Tensor& x, Shape shape, std::vector<std::size_t> map) {
  auto xd = x.data();
  std::vector<float> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xd[map[i]];
  return make_result(op, std::move(shape), std::move(out), {x}, [x, map = std::move(map)](Node& self) {
    auto g = grad_of(x);
    for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
  });
}

}  // namespace

Tensor pixel_shuffle(const Tensor& x, std::size_t r) {
  require_image("pixel_shuffle", x);
  if (r == 0 || x.dim(2) % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: " + std::to_string(x.dim(2)) + " channels not divisible by r^2 = " +
                     std::to_string(r * r));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2) / (r * r);
  return permute_flat("pixel_shuffle", x, {h * r, w * r, c}, shuffle_map(h, w, c, r));
}

Tensor pixel_unshuffle(const Tensor& x, std::size_t r) {
  require_image("pixel_unshuffle", x);
  if (r == 0 || x.dim(0) % r != 0 || x.dim(1) % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial extents " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(r));
  }
  const std::size_t h = x.dim(0) / r, w = x.dim(1) / r, c = x.dim(2);
  auto forward = shuffle_map(h, w, c, r);
  std::vector<std::size_t> map(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) map[forward[i]] = i;
  return permute_flat("pixel_unshuffle", x, {h, w, r * r * c}, std::move(map));
}

Tensor reflect_pad(const Tensor& x, std::size_t pad_bottom, std::size_t pad_right) {
  require_image("reflect_pad", x);
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if ((pad_bottom > 0 && pad_bottom >= h) || (pad_right > 0 && pad_right >= w)) {
    throw ShapeError("reflect_pad: padding (" + std::to_string(pad_bottom) + ", " + std::to_string(pad_right) +
                     ") must be smaller than extents " + shape_str(x.shape()));
  }
  const std::size_t oh = h + pad_bottom, ow = w + pad_right;
  std::vector<std::size_t> map(oh * ow * c);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = y < h ? y : 2 * h - 2 - y;
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const std::size_t sx = xx < w ? xx : 2 * w - 2 - xx;
      for (std::size_t ch = 0; ch < c; ++ch) map[(y * ow + xx) * c + ch] = (sy * w + sx) * c + ch;
    }
  }
  return permute_flat("reflect_pad", x, {oh, ow, c}, std::move(map));
}

Tensor crop(const Tensor& x, std::size_t h, std::size_t w) {
  require_image("crop", x);
  if (h > x.dim(0) || w > x.dim(1)) {
    throw ShapeError("crop: " + std::to_string(h) + "x" + std::to_string(w) + " exceeds " + shape_str(x.shape()));
  }
  const std::size_t iw = x.dim(1), c = x.dim(2);
  std::vector<std::size_t> map(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) map[(y * w + xx) * c + ch] = (y * iw + xx) * c + ch;
  return permute_flat("crop", x, {h, w, c}, std::move(map));
}

}  // namespace atd
