#include <algorithm>
#include <cmath>
#include <numeric>

#include "atd/ops.hpp"
#include "atd/parallel.hpp"

namespace atd {

using detail::make_result;
using detail::Node;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Accumulation target for an input, or empty when it needs no gradient.
std::span<float> grad_of(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  t.node()->ensure_grad();
  return t.node()->grad;
}

std::size_t last_extent(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("tensor has no axes");
  return x.shape().back();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    for (const Tensor* in : {&a, &b}) {
      auto g = grad_of(*in);
      if (g.empty()) continue;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    if (auto g = grad_of(a); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    if (auto g = grad_of(b); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    auto ad = a.data();
    auto bd = b.data();
    if (auto g = grad_of(a); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bd[i];
    if (auto g = grad_of(b); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ad[i];
  });
}

Tensor scale(const Tensor& x, float factor) {
  auto xd = x.data();
  std::vector<float> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  return make_result("scale", x.shape(), std::move(out), {x}, [x, factor](Node& self) {
    auto g = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: factor must hold one value, got " + shape_str(s.shape()));
  const float f = s.item();
  auto xd = x.data();
  std::vector<float> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * f;
  return make_result("mul_scalar", x.shape(), std::move(out), {x, s}, [x, s](Node& self) {
    const float f = s.item();
    auto xd = x.data();
    if (auto g = grad_of(x); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f;
    if (auto g = grad_of(s); !g.empty()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < xd.size(); ++i) acc += static_cast<double>(self.grad[i]) * xd[i];
      g[0] += static_cast<float>(acc);
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t c = last_extent(x);
  if (b.numel() != c) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  auto xd = x.data();
  auto bd = b.data();
  std::vector<float> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + bd[i % c];
  return make_result("add_bias", x.shape(), std::move(out), {x, b}, [x, b, c](Node& self) {
    if (auto g = grad_of(x); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    if (auto g = grad_of(b); !g.empty())
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
  });
}

Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  auto xd = x.data();
  std::vector<float> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5f * xd[i] * (1.0f + std::erf(xd[i] * kInvSqrt2));
  return make_result("gelu", x.shape(), std::move(out), {x}, [x](Node& self) {
    constexpr float kInvSqrt2Pi = 0.39894228040143268f;
    auto xd = x.data();
    auto g = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float v = xd[i];
      const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
      const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_result("sum", {1}, {static_cast<float>(acc)}, {x}, [x](Node& self) {
    auto g = grad_of(x);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const float inv = 1.0f / static_cast<float>(x.numel());
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_result("mean", {1}, {static_cast<float>(acc / x.numel())}, {x}, [x, inv](Node& self) {
    auto g = grad_of(x);
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
  require_same_shape("l1_loss", a, b);
  auto ad = a.data();
  auto bd = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) acc += std::fabs(static_cast<double>(ad[i]) - bd[i]);
  const float inv = 1.0f / static_cast<float>(ad.size());
  return make_result("l1_loss", {1}, {static_cast<float>(acc / ad.size())}, {a, b}, [a, b, inv](Node& self) {
    auto ad = a.data();
    auto bd = b.data();
    const float g0 = self.grad[0] * inv;
    auto ga = grad_of(a);
    auto gb = grad_of(b);
    for (std::size_t i = 0; i < ad.size(); ++i) {
      const float d = ad[i] - bd[i];
      const float s = d > 0.0f ? g0 : (d < 0.0f ? -g0 : 0.0f);
      if (!ga.empty()) ga[i] += s;
      if (!gb.empty()) gb[i] -= s;
    }
  });
}

Tensor charbonnier_loss(const Tensor& a, const Tensor& b, float eps) {
  require_same_shape("charbonnier_loss", a, b);
  auto ad = a.data();
  auto bd = b.data();
  const double e2 = static_cast<double>(eps) * eps;
  double acc = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = static_cast<double>(ad[i]) - bd[i];
    acc += std::sqrt(d * d + e2);
  }
  const float inv = 1.0f / static_cast<float>(ad.size());
  return make_result("charbonnier_loss", {1}, {static_cast<float>(acc / ad.size())}, {a, b},
                     [a, b, inv, eps](Node& self) {
                       auto ad = a.data();
                       auto bd = b.data();
                       auto ga = grad_of(a);
                       auto gb = grad_of(b);
                       for (std::size_t i = 0; i < ad.size(); ++i) {
                         const float d = ad[i] - bd[i];
                         const float s = self.grad[0] * inv * d / std::sqrt(d * d + eps * eps);
                         if (!ga.empty()) ga[i] += s;
                         if (!gb.empty()) gb[i] -= s;
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result("reshape", std::move(shape), x.to_vector(), {x}, [x](Node& self) {
    auto g = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto xd = x.data();
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
  return make_result("transpose", {n, m}, std::move(out), {x}, [x, m, n](Node& self) {
    auto g = grad_of(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), d = x.dim(1);
  auto xd = x.data();
  std::vector<float> out(index.size() * d);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) {
      throw Error("gather_rows: index " + std::to_string(index[r]) + " out of range [0, " +
                  std::to_string(rows) + ")");
    }
    std::copy_n(xd.begin() + index[r] * d, d, out.begin() + r * d);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result("gather_rows", {index.size(), d}, std::move(out), {x},
                     [x, idx = std::move(idx), d](Node& self) {
                       auto g = grad_of(x);
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t c = 0; c < d; ++c) g[idx[r] * d + c] += self.grad[r * d + c];
                     });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw ShapeError("concat_last: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  const std::size_t p = sa.back(), q = sb.back(), rows = a.numel() / p;
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(rows * (p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.begin() + r * p, p, out.begin() + r * (p + q));
    std::copy_n(bd.begin() + r * q, q, out.begin() + r * (p + q) + p);
  }
  Shape so = sa;
  so.back() = p + q;
  return make_result("concat_last", std::move(so), std::move(out), {a, b}, [a, b, p, q, rows](Node& self) {
    auto ga = grad_of(a);
    auto gb = grad_of(b);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!ga.empty())
        for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += self.grad[r * (p + q) + c];
      if (!gb.empty())
        for (std::size_t c = 0; c < q; ++c) gb[r * q + c] += self.grad[r * (p + q) + p + c];
    }
  });
}

namespace {

// out[m x n] += a[m x k] * b[k x n]
void gemm_acc(const float* a, const float* b, float* out, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, [&](std::size_t i) {
    float* row = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  });
}

// da[m x k] += g[m x n] * b^T
void gemm_grad_a(const float* g, const float* b, float* da, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(m, [&](std::size_t i) {
    for (std::size_t p = 0; p < k; ++p) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * b[p * n + j];
      da[i * k + p] += acc;
    }
  });
}

// db[k x n] += a^T * g
void gemm_grad_b(const float* a, const float* g, float* db, std::size_t m, std::size_t k, std::size_t n) {
  parallel_for(k, [&](std::size_t p) {
    float* row = db + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const float av = a[i * k + p];
      if (av == 0.0f) continue;
      const float* grow = g + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * grow[j];
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expected matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ (" + std::to_string(k) + " vs " + std::to_string(b.dim(0)) +
                     ") for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<float> out(m * n, 0.0f);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
    if (auto g = grad_of(a); !g.empty()) gemm_grad_a(self.grad.data(), b.data().data(), g.data(), m, k, n);
    if (auto g = grad_of(b); !g.empty()) gemm_grad_b(a.data().data(), self.grad.data(), g.data(), m, k, n);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be a matrix, got " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (last_extent(x) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (b.defined() && b.numel() != out_dim) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  std::vector<float> out(rows * out_dim, 0.0f);
  if (b.defined()) {
    auto bd = b.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * out_dim);
  }
  gemm_acc(x.data().data(), w.data().data(), out.data(), rows, in, out_dim);
  Shape so = x.shape();
  so.back() = out_dim;
  return make_result("linear", std::move(so), std::move(out), {x, w, b}, [x, w, b, rows, in, out_dim](Node& self) {
    if (auto g = grad_of(x); !g.empty()) gemm_grad_a(self.grad.data(), w.data().data(), g.data(), rows, in, out_dim);
    if (auto g = grad_of(w); !g.empty()) gemm_grad_b(x.data().data(), self.grad.data(), g.data(), rows, in, out_dim);
    if (auto g = grad_of(b); !g.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < out_dim; ++c) g[c] += self.grad[r * out_dim + c];
  });
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t m = last_extent(x), rows = x.numel() / m;
  auto xd = x.data();
  std::vector<float> out(xd.size());
  parallel_for(rows, [&](std::size_t r) {
    const float* in = xd.data() + r * m;
    float* o = out.data() + r * m;
    const float mx = *std::max_element(in, in + m);
    float total = 0.0f;
    for (std::size_t j = 0; j < m; ++j) total += (o[j] = std::exp(in[j] - mx));
    const float inv = 1.0f / total;
    for (std::size_t j = 0; j < m; ++j) o[j] *= inv;
  });
  return make_result("softmax_rows", x.shape(), std::move(out), {x}, [x, m, rows](Node& self) {
    auto g = grad_of(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * m;
      const float* gy = self.grad.data() + r * m;
      float dot = 0.0f;
      for (std::size_t j = 0; j < m; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < m; ++j) g[r * m + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t c = last_extent(x), rows = x.numel() / c;
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " vs input " + shape_str(x.shape()));
  }
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<float> out(xd.size());
  std::vector<float> xhat(xd.size());
  std::vector<float> inv_std(rows);
  parallel_for(rows, [&](std::size_t r) {
    const float* in = xd.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= c;
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<float>(inv);
    for (std::size_t j = 0; j < c; ++j) {
      const float h = static_cast<float>((in[j] - mu) * inv);
      xhat[r * c + j] = h;
      out[r * c + j] = h * gd[j] + bd[j];
    }
  });
  const bool track = detail::any_requires_grad({&x, &gamma, &beta});
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, c, rows, xhat = track ? std::move(xhat) : std::vector<float>{},
       inv_std = track ? std::move(inv_std) : std::vector<float>{}](Node& self) {
        auto gd = gamma.data();
        if (auto gg = grad_of(gamma); !gg.empty())
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gg[j] += self.grad[r * c + j] * xhat[r * c + j];
        if (auto gb = grad_of(beta); !gb.empty())
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[r * c + j];
        if (auto gx = grad_of(x); !gx.empty()) {
          parallel_for(rows, [&](std::size_t r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = static_cast<double>(self.grad[r * c + j]) * gd[j];
              mean_d += dh;
              mean_dx += dh * xhat[r * c + j];
            }
            mean_d /= c;
            mean_dx /= c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = static_cast<double>(self.grad[r * c + j]) * gd[j];
              gx[r * c + j] += static_cast<float>(inv_std[r] * (dh - mean_d - xhat[r * c + j] * mean_dx));
            }
          });
        }
      });
}

Tensor l2_normalize_rows(const Tensor& x, float eps) {
  const std::size_t d = last_extent(x), rows = x.numel() / d;
  auto xd = x.data();
  std::vector<float> out(xd.size());
  std::vector<float> denom(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(xd[r * d + j]) * xd[r * d + j];
    denom[r] = std::max(static_cast<float>(std::sqrt(sq)), eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] / denom[r];
  }
  return make_result("l2_normalize_rows", x.shape(), std::move(out), {x},
                     [x, d, rows, eps, denom = std::move(denom)](Node& self) {
                       auto g = grad_of(x);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const float* y = self.data.data() + r * d;
                         const float* gy = self.grad.data() + r * d;
                         const bool clamped = denom[r] <= eps;
                         float dot = 0.0f;
                         if (!clamped)
                           for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
                         for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - y[j] * dot) / denom[r];
                       }
                     });
}

std::vector<std::size_t> stable_argsort(std::span<const int> keys) {
  std::vector<std::size_t> perm(keys.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  return perm;
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size(), perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || inv[perm[i]] != perm.size()) throw Error("inverse_permutation: input is not a permutation");
    inv[perm[i]] = i;
  }
  return inv;
}

}  // namespace atd
