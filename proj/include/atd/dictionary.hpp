#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "atd/layers.hpp"

namespace atd {

enum class ScaleMode {
  /// tau' = 1 + max(tau, 0) * ln(M)
  kReparameterized,
  /// max(tau, 0) used directly as the temperature.
  kPlain,
};

/// Learnable token dictionary together with the projections one cross-attention
/// layer applies to it. `entries` is a shared handle: every layer of a block
/// holds the same tensor while owning its own projections and temperature.
struct TokenDictionary {
  Tensor entries;  // D [M x d]
  Linear query;    // d -> d_r, applied to image tokens
  Linear key;      // d -> d_r, applied to entries
  Linear value;    // d -> d, applied to entries
  Tensor tau;      // [1]
  ScaleMode scale_mode = ScaleMode::kReparameterized;

  /// Fresh entries ~ N(0, 0.02) plus projections.
  static TokenDictionary create(std::size_t entries, std::size_t dim, std::size_t reduced_dim, Rng& rng,
                                ScaleMode mode = ScaleMode::kReparameterized);
  /// Projections and tau for a layer that reuses an existing entry tensor.
  static TokenDictionary attach(const Tensor& shared_entries, std::size_t reduced_dim, Rng& rng,
                                ScaleMode mode = ScaleMode::kReparameterized);

  std::size_t size() const { return entries.dim(0); }
  std::size_t dim() const { return entries.dim(1); }
  std::size_t reduced_dim() const { return query.out_features(); }

  /// Projections and tau only; the shared entry tensor is collected by its owner.
  void collect_projections(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// tau init so that tau' starts at 2 (tau = 1 / ln M, or 0 when M = 1).
float initial_tau(std::size_t entries);

/// <q_j, k_i> / (max(|q_j|, eps) * max(|k_i|, eps)), shape [N x M].
Tensor cosine_similarity(const Tensor& q, const Tensor& k, float eps = 1e-8f);

/// Softmax temperature as a differentiable [1] tensor; never below 1 in the
/// reparameterized mode.
Tensor effective_scale(const TokenDictionary& dict);

struct TdcaOutput {
  Tensor enhanced;              // [N x d]
  Tensor attn_map;              // [N x M]
  std::vector<int> argmax_idx;  // lowest index wins ties
  std::vector<float> max_weight;
};

/// Token-dictionary cross-attention: single head, cosine logits scaled by tau'.
TdcaOutput tdca(const Tensor& x, const TokenDictionary& dict);

/// Row argmax with lowest-index tie-break.
std::vector<int> row_argmax(const Tensor& attn_map);

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::size_t> counts;

  double bin_lo(std::size_t i) const { return lo + (hi - lo) * static_cast<double>(i) / counts.size(); }
  double bin_hi(std::size_t i) const { return lo + (hi - lo) * static_cast<double>(i + 1) / counts.size(); }
  std::size_t total() const;
};

/// Counts of per-token max weights over [1/M, 1] in equal bins.
Histogram max_weight_histogram(std::span<const float> max_weight, std::size_t entries, std::size_t bins);
Histogram max_weight_histogram(const TdcaOutput& out, std::size_t bins);

/// `bin_lo,bin_hi,count` rows with a header line.
void write_histogram_csv(std::ostream& os, const Histogram& h);

}  // namespace atd
