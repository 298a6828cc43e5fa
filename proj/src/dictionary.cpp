#include "atd/dictionary.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace atd {

float initial_tau(std::size_t entries) {
  return entries > 1 ? static_cast<float>(1.0 / std::log(static_cast<double>(entries))) : 0.0f;
}

TokenDictionary TokenDictionary::create(std::size_t entries, std::size_t dim, std::size_t reduced_dim, Rng& rng,
                                        ScaleMode mode) {
  if (entries == 0) throw Error("TokenDictionary: needs at least one entry");
  Tensor d = Tensor::randn({entries, dim}, 0.02f, rng, true);
  return attach(d, reduced_dim, rng, mode);
}

TokenDictionary TokenDictionary::attach(const Tensor& shared_entries, std::size_t reduced_dim, Rng& rng,
                                        ScaleMode mode) {
  const std::size_t dim = shared_entries.dim(1);
  if (reduced_dim == 0 || reduced_dim > dim) {
    throw Error("TokenDictionary: reduced dim " + std::to_string(reduced_dim) + " must lie in [1, " +
                std::to_string(dim) + "]");
  }
  TokenDictionary t;
  t.entries = shared_entries;
  t.query = Linear::create(dim, reduced_dim, rng);
  t.key = Linear::create(dim, reduced_dim, rng);
  t.value = Linear::create(dim, dim, rng);
  const float tau0 = mode == ScaleMode::kReparameterized ? initial_tau(shared_entries.dim(0)) : 1.0f;
  t.tau = Tensor::scalar(tau0, true);
  t.scale_mode = mode;
  return t;
}

void TokenDictionary::collect_projections(std::vector<NamedTensor>& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  out.push_back({prefix + ".tau", tau});
}

Tensor cosine_similarity(const Tensor& q, const Tensor& k, float eps) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) {
    throw ShapeError("cosine_similarity: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  }
  return matmul(l2_normalize_rows(q, eps), transpose(l2_normalize_rows(k, eps)));
}

Tensor effective_scale(const TokenDictionary& dict) {
  const double log_m = std::log(static_cast<double>(dict.size()));
  const bool reparam = dict.scale_mode == ScaleMode::kReparameterized;
  const float tau = dict.tau.item();
  const float clamped = std::max(tau, 0.0f);
  const float value = reparam ? static_cast<float>(1.0 + clamped * log_m) : clamped;
  const float slope = tau > 0.0f ? (reparam ? static_cast<float>(log_m) : 1.0f) : 0.0f;
  Tensor t = dict.tau;
  return detail::make_result("effective_scale", {1}, {value}, {t}, [t, slope](detail::Node& self) {
    t.node()->ensure_grad();
    t.node()->grad[0] += self.grad[0] * slope;
  });
}

std::vector<int> row_argmax(const Tensor& attn_map) {
  const std::size_t n = attn_map.dim(0), m = attn_map.dim(1);
  auto a = attn_map.data();
  std::vector<int> idx(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (a[r * m + j] > a[r * m + best]) best = j;
    idx[r] = static_cast<int>(best);
  }
  return idx;
}

TdcaOutput tdca(const Tensor& x, const TokenDictionary& dict) {
  if (x.rank() != 2 || x.dim(1) != dict.dim()) {
    throw ShapeError("tdca: tokens " + shape_str(x.shape()) + " do not match dictionary width " +
                     std::to_string(dict.dim()));
  }
  if (x.dim(0) == 0) throw ShapeError("tdca: no tokens");
  Tensor q = dict.query(x);
  Tensor k = dict.key(dict.entries);
  Tensor v = dict.value(dict.entries);
  Tensor logits = mul_scalar(cosine_similarity(q, k), effective_scale(dict));
  TdcaOutput out;
  out.attn_map = softmax_rows(logits);
  out.enhanced = matmul(out.attn_map, v);
  out.argmax_idx = row_argmax(out.attn_map);
  const std::size_t m = dict.size();
  auto a = out.attn_map.data();
  out.max_weight.resize(out.argmax_idx.size());
  for (std::size_t r = 0; r < out.argmax_idx.size(); ++r) out.max_weight[r] = a[r * m + out.argmax_idx[r]];
  return out;
}

std::size_t Histogram::total() const {
  std::size_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

Histogram max_weight_histogram(std::span<const float> max_weight, std::size_t entries, std::size_t bins) {
  if (bins < 2) throw Error("max_weight_histogram: need at least 2 bins");
  if (entries == 0) throw Error("max_weight_histogram: dictionary size must be positive");
  Histogram h;
  h.lo = 1.0 / static_cast<double>(entries);
  h.hi = 1.0;
  h.counts.assign(bins, 0);
  const double width = h.hi - h.lo;
  for (float w : max_weight) {
    std::size_t b = bins - 1;
    if (width > 0.0) {
      const double pos = (static_cast<double>(w) - h.lo) / width * static_cast<double>(bins);
      b = pos <= 0.0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(pos));
    }
    ++h.counts[b];
  }
  return h;
}

Histogram max_weight_histogram(const TdcaOutput& out, std::size_t bins) {
  return max_weight_histogram(out.max_weight, out.attn_map.dim(1), bins);
}

void write_histogram_csv(std::ostream& os, const Histogram& h) {
  os << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) os << h.bin_lo(i) << ',' << h.bin_hi(i) << ',' << h.counts[i] << '\n';
}

}  // namespace atd
