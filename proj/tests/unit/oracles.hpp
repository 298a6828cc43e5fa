#pragma once

// Slow double-precision reference implementations used as test oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "atd/categorize.hpp"
#include "atd/cffn.hpp"
#include "atd/dictionary.hpp"
#include "atd/window.hpp"

namespace atd::testing {

/// rows [n x in] (double) times a Linear layer; counts multiplies when asked.
inline std::vector<double> linear_ref(const std::vector<double>& rows, std::size_t n, const Linear& l,
                                      std::uint64_t* mults = nullptr) {
  const std::size_t in = l.in_features(), out = l.out_features();
  std::vector<double> r(n * out);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = l.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += rows[t * in + i] * l.weight[i * out + o];
      r[t * out + o] = acc;
    }
  }
  if (mults) *mults += n * in * out;
  return r;
}

inline std::vector<double> to_double(const Tensor& t) {
  auto d = t.data();
  return {d.begin(), d.end()};
}

inline std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

/// Logit bias for (head, query member, key member); -inf blocks the pair.
using BiasFn = std::function<double(std::size_t, std::size_t, std::size_t)>;

/// Multi-head attention over the listed rows of q, k, v ([N x d] each).
/// Writes the result rows back at the same token positions of `out`.
inline void group_attention_ref(const std::vector<double>& q, const std::vector<double>& k,
                                const std::vector<double>& v, std::size_t d, const std::vector<std::size_t>& members,
                                std::size_t heads, std::vector<double>& out, const BiasFn& bias = nullptr,
                                std::uint64_t* mults = nullptr) {
  const std::size_t hd = d / heads, g = members.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < g; ++i) {
      std::vector<double> logit(g);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < g; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < hd; ++c) dot += q[members[i] * d + h * hd + c] * k[members[j] * d + h * hd + c];
        logit[j] = dot * scale + (bias ? bias(h, i, j) : 0.0);
        mx = std::max(mx, logit[j]);
      }
      double z = 0;
      for (auto& l : logit) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < hd; ++c) {
        double acc = 0;
        for (std::size_t j = 0; j < g; ++j) acc += logit[j] / z * v[members[j] * d + h * hd + c];
        out[members[i] * d + h * hd + c] = acc;
      }
    }
  }
  // q.k and a.v each cost g * g * d multiplies over all heads.
  if (mults) *mults += 2 * g * g * d;
}

inline std::vector<double> project(std::span<const float> row, const Linear& l) {
  const std::size_t in = l.in_features(), out = l.out_features();
  std::vector<double> r(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = l.bias[o];
    for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * l.weight[i * out + o];
    r[o] = acc;
  }
  return r;
}

// Explicit per-token dot products and softmax in double.
struct LoopTdca {
  std::vector<double> attn;
  std::vector<double> enhanced;
};

inline LoopTdca tdca_loop_oracle(const Tensor& x, const TokenDictionary& dict) {
  const std::size_t n = x.dim(0), d = x.dim(1), m = dict.size();
  const double scale = 1.0 + std::max(dict.tau.item(), 0.0f) * std::log(static_cast<double>(m));
  std::vector<std::vector<double>> keys, values;
  for (std::size_t i = 0; i < m; ++i) {
    auto row = dict.entries.data().subspan(i * d, d);
    keys.push_back(project(row, dict.key));
    values.push_back(project(row, dict.value));
  }
  LoopTdca out;
  out.attn.resize(n * m);
  out.enhanced.assign(n * d, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    auto q = project(x.data().subspan(j * d, d), dict.query);
    std::vector<double> logits(m);
    double mx = -1e300;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0, nq = 0, nk = 0;
      for (std::size_t t = 0; t < q.size(); ++t) {
        dot += q[t] * keys[i][t];
        nq += q[t] * q[t];
        nk += keys[i][t] * keys[i][t];
      }
      logits[i] = scale * dot / (std::max(std::sqrt(nq), 1e-8) * std::max(std::sqrt(nk), 1e-8));
      mx = std::max(mx, logits[i]);
    }
    double z = 0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (std::size_t i = 0; i < m; ++i) {
      out.attn[j * m + i] = logits[i] / z;
      for (std::size_t c = 0; c < d; ++c) out.enhanced[j * d + c] += out.attn[j * m + i] * values[i][c];
    }
  }
  return out;
}

// Bucket fill: category by category, original order inside each.
inline std::vector<std::vector<std::size_t>> groups_ref(const std::vector<int>& idx, std::size_t n_s) {
  const int m = idx.empty() ? 0 : *std::max_element(idx.begin(), idx.end()) + 1;
  std::vector<std::size_t> order;
  for (int c = 0; c < m; ++c)
    for (std::size_t t = 0; t < idx.size(); ++t)
      if (idx[t] == c) order.push_back(t);
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t s = 0; s < order.size(); s += n_s)
    groups.emplace_back(order.begin() + s, order.begin() + std::min(order.size(), s + n_s));
  return groups;
}

inline std::vector<double> acmsa_ref(const Tensor& x, const std::vector<int>& idx, const AcmsaParams& p,
                                     std::size_t n_s, std::uint64_t* mults = nullptr) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto rows = to_double(x);
  auto q = linear_ref(rows, n, p.query, mults);
  auto k = linear_ref(rows, n, p.key, mults);
  auto v = linear_ref(rows, n, p.value, mults);
  std::vector<double> y(n * d);
  for (const auto& g : groups_ref(idx, n_s)) group_attention_ref(q, k, v, d, g, p.heads, y, nullptr, mults);
  return linear_ref(y, n, p.out, mults);
}

// Each window of the rolled grid attends internally; tokens that arrived by
// wrap-around in either axis only see tokens with the same wrap status.
inline std::vector<double> swmsa_ref(const Tensor& x, const WindowParams& p) {
  const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2), win = p.window, s = p.shift;
  const std::size_t n = h * w;
  auto rows = to_double(x);
  auto q = linear_ref(rows, n, p.query), k = linear_ref(rows, n, p.key), v = linear_ref(rows, n, p.value);
  std::vector<double> y(n * d);
  for (std::size_t by = 0; by < h; by += win) {
    for (std::size_t bx = 0; bx < w; bx += win) {
      std::vector<std::size_t> members;
      std::vector<std::pair<bool, bool>> wrapped;
      for (std::size_t a = 0; a < win; ++a) {
        for (std::size_t b = 0; b < win; ++b) {
          const std::size_t ry = by + a, rx = bx + b;
          members.push_back(((ry + s) % h) * w + (rx + s) % w);
          wrapped.push_back({ry + s >= h, rx + s >= w});
        }
      }
      auto bias = [&](std::size_t head, std::size_t i, std::size_t j) {
        if (wrapped[i] != wrapped[j]) return -std::numeric_limits<double>::infinity();
        const long dy = long(i / win) - long(j / win) + long(win) - 1;
        const long dx = long(i % win) - long(j % win) + long(win) - 1;
        return static_cast<double>(p.rel_pos_bias[(dy * (2 * win - 1) + dx) * p.heads + head]);
      };
      group_attention_ref(q, k, v, d, members, p.heads, y, bias);
    }
  }
  return linear_ref(y, n, p.out);
}

inline std::vector<double> cffn_ref(const Tensor& x, const Tensor& delta, const CffnParams& p) {
  const std::size_t h = x.dim(0), w = x.dim(1), d = x.dim(2), n = h * w;
  auto rows = to_double(x);
  std::vector<double> normed(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mu += rows[t * d + c];
    mu /= d;
    for (std::size_t c = 0; c < d; ++c) var += (rows[t * d + c] - mu) * (rows[t * d + c] - mu);
    var /= d;
    for (std::size_t c = 0; c < d; ++c)
      normed[t * d + c] = (rows[t * d + c] - mu) / std::sqrt(var + 1e-5) * p.norm.gamma[c] + p.norm.beta[c];
  }
  auto a = linear_ref(normed, n, p.expand);
  std::vector<double> b;
  if (p.category_aware()) b = linear_ref(to_double(delta), n, p.category);
  const std::size_t ha = p.expand.out_features(), hb = p.category_aware() ? p.category.out_features() : 0;
  const std::size_t hid = ha + hb;
  std::vector<double> act(n * hid);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < hid; ++c) {
      const double z = c < ha ? a[t * ha + c] : b[t * hb + c - ha];
      act[t * hid + c] = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
    }
  }
  std::vector<double> conv(n * hid);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < hid; ++c) {
        double acc = p.dw_bias[c];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long y = long(i) + dy, xx = long(j) + dx;
            if (y < 0 || xx < 0 || y >= long(h) || xx >= long(w)) continue;
            acc += p.dw_weight[((dy + 1) * 3 + dx + 1) * hid + c] * act[(y * w + xx) * hid + c];
          }
        conv[(i * w + j) * hid + c] = acc;
      }
  auto out = linear_ref(conv, n, p.project);
  for (std::size_t e = 0; e < out.size(); ++e) out[e] += rows[e];
  return out;
}

}  // namespace atd::testing
