#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "atd/layers.hpp"

namespace atd {

/// Sort of the tokens by category plus the contiguous sub-category slices of
/// the sorted order.
struct CategoryAssignment {
  std::vector<int> category_idx;
  std::vector<std::size_t> perm;      // sorted position -> original token
  std::vector<std::size_t> inv_perm;  // original token -> sorted position
  std::vector<Range> group_bounds;    // over the sorted sequence
  std::size_t group_size = 0;
};

/// Per-row argmax, lowest index on ties.
std::vector<int> assign_categories(const Tensor& attn_map);

/// Stable sort by category, then chunks of `group_size`; the last chunk may be short.
CategoryAssignment make_assignment(std::vector<int> category_idx, std::size_t group_size);

std::pair<Tensor, CategoryAssignment> categorize(const Tensor& x, std::vector<int> category_idx,
                                                 std::size_t group_size);
Tensor uncategorize(const Tensor& y, const CategoryAssignment& a);

struct AcmsaParams {
  Linear query;
  Linear key;
  Linear value;
  Linear out;
  std::size_t heads = 1;

  static AcmsaParams create(std::size_t dim, std::size_t heads, Rng& rng);
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Multi-head attention inside each sub-category. Routing is taken from
/// `attn_map` and carries no gradient.
Tensor acmsa(const Tensor& x, const Tensor& attn_map, const AcmsaParams& p, std::size_t group_size);
/// Same, with a fixed routing.
Tensor acmsa(const Tensor& x, const CategoryAssignment& a, const AcmsaParams& p);

/// Multiply-add counts (two flops each) for one attention layer.
struct AttentionFlops {
  double projection = 0;  // Q, K, V and output maps
  double scores = 0;      // Q K^T
  double aggregate = 0;   // A V
  double core() const { return scores + aggregate; }
  double total() const { return projection + core(); }
};

/// Grouped attention with `group_size` tokens per group: 2 N n_s d per stage.
AttentionFlops attention_flops(std::size_t n, std::size_t group_size, std::size_t dim, std::size_t heads);
/// Global attention over all N tokens: 2 N^2 d per stage.
AttentionFlops global_attention_flops(std::size_t n, std::size_t dim, std::size_t heads);

/// Category map of a token grid as an indexed-colour PNG (index mod 256).
void write_category_png(const std::string& path, const std::vector<int>& category_idx, std::size_t rows,
                        std::size_t cols);
/// `token_row,token_col,category`
void write_category_csv(std::ostream& os, const std::vector<int>& category_idx, std::size_t rows, std::size_t cols);
/// `group,position,token_row,token_col,category`, one line per token in sorted order.
void write_group_csv(std::ostream& os, const CategoryAssignment& a, std::size_t cols);

}  // namespace atd
