#include "atd/window.hpp"

#include <limits>

namespace atd {

namespace {

void check_grid(std::size_t height, std::size_t width, std::size_t window, std::size_t shift) {
  if (window == 0 || height == 0 || width == 0 || height % window != 0 || width % window != 0) {
    throw ShapeError("window: " + std::to_string(height) + "x" + std::to_string(width) +
                     " grid is not divisible by window " + std::to_string(window));
  }
  if (shift >= window) {
    throw Error("window: shift " + std::to_string(shift) + " must be below window " + std::to_string(window));
  }
}

// Region label along one rolled axis; wrapped-in rows get their own label.
int region(std::size_t pos, std::size_t extent, std::size_t window, std::size_t shift) {
  if (pos < extent - window) return 0;
  return pos < extent - shift ? 1 : 2;
}

}  // namespace

WindowLayout window_layout(std::size_t height, std::size_t width, std::size_t window, std::size_t shift) {
  check_grid(height, width, window, shift);
  WindowLayout l;
  l.height = height;
  l.width = width;
  l.window = window;
  l.shift = shift;
  const std::size_t g = window * window;
  const std::size_t wy = height / window, wx = width / window;
  l.order.reserve(height * width);
  for (std::size_t by = 0; by < wy; ++by) {
    for (std::size_t bx = 0; bx < wx; ++bx) {
      l.groups.push_back({l.order.size(), l.order.size() + g});
      std::vector<int> labels;
      for (std::size_t a = 0; a < window; ++a) {
        for (std::size_t b = 0; b < window; ++b) {
          const std::size_t ry = by * window + a, rx = bx * window + b;
          l.order.push_back(((ry + shift) % height) * width + (rx + shift) % width);
          if (shift > 0) labels.push_back(3 * region(ry, height, window, shift) + region(rx, width, window, shift));
        }
      }
      if (shift > 0) {
        for (std::size_t i = 0; i < g; ++i)
          for (std::size_t j = 0; j < g; ++j)
            l.mask.push_back(labels[i] == labels[j] ? 0.0f : -std::numeric_limits<float>::infinity());
      }
    }
  }
  l.inverse = inverse_permutation(l.order);
  return l;
}

Tensor window_partition(const Tensor& x, std::size_t window, std::size_t shift) {
  if (x.rank() != 3) throw ShapeError("window_partition: expected H x W x d, got " + shape_str(x.shape()));
  const auto l = window_layout(x.dim(0), x.dim(1), window, shift);
  return gather_rows(reshape(x, {x.dim(0) * x.dim(1), x.dim(2)}), l.order);
}

Tensor window_reverse(const Tensor& windows, std::size_t height, std::size_t width, std::size_t window,
                      std::size_t shift) {
  if (windows.rank() != 2 || windows.dim(0) != height * width) {
    throw ShapeError("window_reverse: " + shape_str(windows.shape()) + " does not hold " + std::to_string(height) +
                     "x" + std::to_string(width) + " tokens");
  }
  const auto l = window_layout(height, width, window, shift);
  return reshape(gather_rows(windows, l.inverse), {height, width, windows.dim(1)});
}

WindowParams WindowParams::create(std::size_t dim, std::size_t window, std::size_t shift, std::size_t heads,
                                  Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw Error("swmsa: width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (window == 0 || shift >= window) throw Error("swmsa: need 0 <= shift < window");
  WindowParams p;
  p.query = Linear::create(dim, dim, rng);
  p.key = Linear::create(dim, dim, rng);
  p.value = Linear::create(dim, dim, rng);
  p.out = Linear::create(dim, dim, rng);
  const std::size_t span = 2 * window - 1;
  p.rel_pos_bias = Tensor::zeros({span * span, heads}, true);
  p.window = window;
  p.shift = shift;
  p.heads = heads;
  return p;
}

void WindowParams::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  this->out.collect(out, prefix + ".out");
  out.push_back({prefix + ".rel_pos_bias", rel_pos_bias});
}

std::size_t relative_index(std::size_t window, std::size_t qy, std::size_t qx, std::size_t ky, std::size_t kx) {
  const std::size_t dy = qy + window - 1 - ky, dx = qx + window - 1 - kx;
  return dy * (2 * window - 1) + dx;
}

Tensor relative_bias(const Tensor& table, std::size_t window, std::size_t heads) {
  const std::size_t span = 2 * window - 1, g = window * window;
  if (table.shape() != Shape{span * span, heads}) {
    throw ShapeError("relative_bias: table " + shape_str(table.shape()) + " expected " +
                     shape_str({span * span, heads}));
  }
  std::vector<std::size_t> index(g * g);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j)
      index[i * g + j] = relative_index(window, i / window, i % window, j / window, j % window);
  std::vector<float> out(heads * g * g);
  auto t = table.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t p = 0; p < g * g; ++p) out[h * g * g + p] = t[index[p] * heads + h];
  return detail::make_result("relative_bias", {heads, g, g}, std::move(out), {table},
                             [table, index = std::move(index), heads, g](detail::Node& self) {
                               auto* n = table.node().get();
                               n->ensure_grad();
                               for (std::size_t h = 0; h < heads; ++h)
                                 for (std::size_t p = 0; p < g * g; ++p)
                                   n->grad[index[p] * heads + h] += self.grad[h * g * g + p];
                             });
}

namespace {

struct Prepared {
  WindowLayout layout;
  Tensor q, k, v;
  AttentionOptions options;
};

Prepared prepare(const Tensor& x, const WindowParams& p) {
  if (x.rank() != 3 || x.dim(2) != p.query.in_features()) {
    throw ShapeError("swmsa: features " + shape_str(x.shape()) + " do not match width " +
                     std::to_string(p.query.in_features()));
  }
  Prepared r;
  r.layout = window_layout(x.dim(0), x.dim(1), p.window, p.shift);
  Tensor part = gather_rows(reshape(x, {x.dim(0) * x.dim(1), x.dim(2)}), r.layout.order);
  r.q = p.query(part);
  r.k = p.key(part);
  r.v = p.value(part);
  r.options.heads = p.heads;
  r.options.bias = relative_bias(p.rel_pos_bias, p.window, p.heads);
  r.options.mask = r.layout.mask;
  return r;
}

}  // namespace

Tensor swmsa(const Tensor& x, const WindowParams& p) {
  Prepared r = prepare(x, p);
  Tensor y = grouped_attention(r.q, r.k, r.v, r.layout.groups, r.options);
  return reshape(p.out(gather_rows(y, r.layout.inverse)), x.shape());
}

std::vector<float> swmsa_attention_weights(const Tensor& x, const WindowParams& p, std::size_t window_index,
                                           std::size_t head) {
  NoGradGuard guard;
  Prepared r = prepare(x, p);
  if (window_index >= r.layout.window_count() || head >= p.heads) throw Error("swmsa: window or head out of range");
  return grouped_attention_weights(r.q, r.k, r.layout.groups, r.options, window_index, head);
}

}  // namespace atd
