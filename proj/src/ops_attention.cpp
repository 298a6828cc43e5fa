#include <algorithm>
#include <cmath>
#include <limits>

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

struct Layout {
  std::size_t n = 0, d = 0, heads = 1, head_dim = 0;
  std::size_t uniform = 0;                  // common group size, 0 when ragged
  std::vector<std::size_t> prob_offset;     // start of each group's heads*g*g block
  std::size_t prob_total = 0;
};

Layout validate(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Range> groups,
                const AttentionOptions& opt) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("grouped_attention: q, k, v must share an N x d shape, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  Layout l;
  l.n = q.dim(0);
  l.d = q.dim(1);
  l.heads = opt.heads;
  if (l.heads == 0 || l.d % l.heads != 0) {
    throw ShapeError("grouped_attention: width " + std::to_string(l.d) + " not divisible by " +
                     std::to_string(l.heads) + " heads");
  }
  l.head_dim = l.d / l.heads;
  std::size_t cursor = 0;
  bool uniform = true;
  for (const auto& g : groups) {
    if (g.begin < cursor || g.end <= g.begin || g.end > l.n) {
      throw Error("grouped_attention: groups must be ascending, non-empty, disjoint ranges inside [0, " +
                  std::to_string(l.n) + ")");
    }
    cursor = g.end;
    if (g.size() != groups.front().size()) uniform = false;
    l.prob_offset.push_back(l.prob_total);
    l.prob_total += l.heads * g.size() * g.size();
  }
  l.uniform = (uniform && !groups.empty()) ? groups.front().size() : 0;
  if (opt.bias.defined() || !opt.mask.empty()) {
    if (l.uniform == 0) throw Error("grouped_attention: bias and mask need equally sized groups");
  }
  const std::size_t gg = l.uniform * l.uniform;
  if (opt.bias.defined() && opt.bias.shape() != Shape{l.heads, l.uniform, l.uniform}) {
    throw ShapeError("grouped_attention: bias " + shape_str(opt.bias.shape()) + " expected " +
                     shape_str({l.heads, l.uniform, l.uniform}));
  }
  if (!opt.mask.empty() && opt.mask.size() != groups.size() * gg) {
    throw ShapeError("grouped_attention: mask holds " + std::to_string(opt.mask.size()) + " values, expected " +
                     std::to_string(groups.size() * gg));
  }
  return l;
}

// Post-softmax weights of one (group, head) into probs[g x g].
void group_head_weights(const float* q, const float* k, const Layout& l, const Range& grp, std::size_t gi,
                        std::size_t h, const AttentionOptions& opt, float* probs) {
  const std::size_t g = grp.size();
  const std::size_t off = h * l.head_dim;
  const float scale = 1.0f / std::sqrt(static_cast<float>(l.head_dim));
  const float* bias = opt.bias.defined() ? opt.bias.data().data() + h * g * g : nullptr;
  const float* mask = opt.mask.empty() ? nullptr : opt.mask.data() + gi * g * g;
  for (std::size_t i = 0; i < g; ++i) {
    const float* qi = q + (grp.begin + i) * l.d + off;
    float* row = probs + i * g;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < g; ++j) {
      const float* kj = k + (grp.begin + j) * l.d + off;
      float s = 0.0f;
      for (std::size_t t = 0; t < l.head_dim; ++t) s += qi[t] * kj[t];
      s *= scale;
      if (bias) s += bias[i * g + j];
      if (mask) s += mask[i * g + j];
      row[j] = s;
      mx = std::max(mx, s);
    }
    float total = 0.0f;
    for (std::size_t j = 0; j < g; ++j) total += (row[j] = std::exp(row[j] - mx));
    const float inv = 1.0f / total;
    for (std::size_t j = 0; j < g; ++j) row[j] *= inv;
  }
}

}  // namespace

Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Range> groups,
                         const AttentionOptions& options) {
  Layout l = validate(q, k, v, groups, options);
  const float* qd = q.data().data();
  const float* kd = k.data().data();
  const float* vd = v.data().data();
  std::vector<float> probs(l.prob_total);
  std::vector<float> out(l.n * l.d, 0.0f);
  parallel_for(groups.size(), [&](std::size_t gi) {
    const Range& grp = groups[gi];
    const std::size_t g = grp.size();
    for (std::size_t h = 0; h < l.heads; ++h) {
      float* p = probs.data() + l.prob_offset[gi] + h * g * g;
      group_head_weights(qd, kd, l, grp, gi, h, options, p);
      const std::size_t off = h * l.head_dim;
      for (std::size_t i = 0; i < g; ++i) {
        float* o = out.data() + (grp.begin + i) * l.d + off;
        for (std::size_t j = 0; j < g; ++j) {
          const float pij = p[i * g + j];
          const float* vj = vd + (grp.begin + j) * l.d + off;
          for (std::size_t t = 0; t < l.head_dim; ++t) o[t] += pij * vj[t];
        }
      }
    }
  });

  Tensor bias = options.bias;
  const bool track = detail::any_requires_grad({&q, &k, &v, &bias});
  std::vector<Range> grp_copy(groups.begin(), groups.end());
  return make_result(
      "grouped_attention", {l.n, l.d}, std::move(out), {q, k, v, bias},
      [q, k, v, bias, l, groups = std::move(grp_copy), probs = track ? std::move(probs) : std::vector<float>{}](
          Node& self) {
        const float* qd = q.data().data();
        const float* kd = k.data().data();
        const float* vd = v.data().data();
        const float* go = self.grad.data();
        auto gq = grad_of(q);
        auto gk = grad_of(k);
        auto gv = grad_of(v);
        const bool want_bias = bias.defined() && bias.requires_grad();
        std::vector<float> dlogits(want_bias ? probs.size() : 0);
        const float scale = 1.0f / std::sqrt(static_cast<float>(l.head_dim));
        parallel_for(groups.size(), [&](std::size_t gi) {
          const Range& grp = groups[gi];
          const std::size_t g = grp.size();
          std::vector<float> ds(g * g);
          for (std::size_t h = 0; h < l.heads; ++h) {
            const float* p = probs.data() + l.prob_offset[gi] + h * g * g;
            const std::size_t off = h * l.head_dim;
            for (std::size_t i = 0; i < g; ++i) {
              const float* goi = go + (grp.begin + i) * l.d + off;
              float rowdot = 0.0f;
              for (std::size_t j = 0; j < g; ++j) {
                const float* vj = vd + (grp.begin + j) * l.d + off;
                float dp = 0.0f;
                for (std::size_t t = 0; t < l.head_dim; ++t) dp += goi[t] * vj[t];
                ds[i * g + j] = dp;
                rowdot += dp * p[i * g + j];
              }
              for (std::size_t j = 0; j < g; ++j) ds[i * g + j] = p[i * g + j] * (ds[i * g + j] - rowdot);
            }
            if (!gv.empty()) {
              for (std::size_t j = 0; j < g; ++j) {
                float* dst = gv.data() + (grp.begin + j) * l.d + off;
                for (std::size_t i = 0; i < g; ++i) {
                  const float pij = p[i * g + j];
                  const float* goi = go + (grp.begin + i) * l.d + off;
                  for (std::size_t t = 0; t < l.head_dim; ++t) dst[t] += pij * goi[t];
                }
              }
            }
            if (!gq.empty()) {
              for (std::size_t i = 0; i < g; ++i) {
                float* dst = gq.data() + (grp.begin + i) * l.d + off;
                for (std::size_t j = 0; j < g; ++j) {
                  const float w = ds[i * g + j] * scale;
                  const float* kj = kd + (grp.begin + j) * l.d + off;
                  for (std::size_t t = 0; t < l.head_dim; ++t) dst[t] += w * kj[t];
                }
              }
            }
            if (!gk.empty()) {
              for (std::size_t j = 0; j < g; ++j) {
                float* dst = gk.data() + (grp.begin + j) * l.d + off;
                for (std::size_t i = 0; i < g; ++i) {
                  const float w = ds[i * g + j] * scale;
                  const float* qi = qd + (grp.begin + i) * l.d + off;
                  for (std::size_t t = 0; t < l.head_dim; ++t) dst[t] += w * qi[t];
                }
              }
            }
            if (want_bias) std::copy(ds.begin(), ds.end(), dlogits.begin() + l.prob_offset[gi] + h * g * g);
          }
        });
        if (want_bias) {
          auto gb = grad_of(bias);
          for (std::size_t gi = 0; gi < groups.size(); ++gi)
            for (std::size_t t = 0; t < gb.size(); ++t) gb[t] += dlogits[l.prob_offset[gi] + t];
        }
      });
}

std::vector<float> grouped_attention_weights(const Tensor& q, const Tensor& k, std::span<const Range> groups,
                                             const AttentionOptions& options, std::size_t group, std::size_t head) {
  Layout l = validate(q, k, k, groups, options);
  if (group >= groups.size() || head >= l.heads) throw Error("grouped_attention_weights: group/head out of range");
  const std::size_t g = groups[group].size();
  std::vector<float> probs(g * g);
  group_head_weights(q.data().data(), k.data().data(), l, groups[group], group, head, options, probs.data());
  return probs;
}

}  // namespace atd
