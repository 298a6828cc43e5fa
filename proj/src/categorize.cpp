#include "atd/categorize.hpp"

#include <cmath>
#include <ostream>

#include "atd/dictionary.hpp"
#include "atd/image.hpp"

namespace atd {

std::vector<int> assign_categories(const Tensor& attn_map) {
  if (attn_map.rank() != 2) throw ShapeError("assign_categories: expected N x M, got " + shape_str(attn_map.shape()));
  return row_argmax(attn_map);
}

CategoryAssignment make_assignment(std::vector<int> category_idx, std::size_t group_size) {
  if (group_size == 0) throw Error("categorize: sub-category size must be at least 1");
  CategoryAssignment a;
  a.perm = stable_argsort(category_idx);
  a.inv_perm = inverse_permutation(a.perm);
  a.category_idx = std::move(category_idx);
  a.group_size = group_size;
  const std::size_t n = a.perm.size();
  for (std::size_t s = 0; s < n; s += group_size) a.group_bounds.push_back({s, std::min(n, s + group_size)});
  return a;
}

std::pair<Tensor, CategoryAssignment> categorize(const Tensor& x, std::vector<int> category_idx,
                                                 std::size_t group_size) {
  if (x.rank() != 2 || x.dim(0) != category_idx.size()) {
    throw ShapeError("categorize: " + std::to_string(category_idx.size()) + " indices for tokens " +
                     shape_str(x.shape()));
  }
  auto a = make_assignment(std::move(category_idx), group_size);
  return {gather_rows(x, a.perm), std::move(a)};
}

Tensor uncategorize(const Tensor& y, const CategoryAssignment& a) {
  if (y.rank() != 2 || y.dim(0) != a.perm.size()) {
    throw ShapeError("uncategorize: " + shape_str(y.shape()) + " does not match a permutation of length " +
                     std::to_string(a.perm.size()));
  }
  return gather_rows(y, a.inv_perm);
}

AcmsaParams AcmsaParams::create(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw Error("acmsa: width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
  AcmsaParams p;
  p.query = Linear::create(dim, dim, rng);
  p.key = Linear::create(dim, dim, rng);
  p.value = Linear::create(dim, dim, rng);
  p.out = Linear::create(dim, dim, rng);
  p.heads = heads;
  return p;
}

void AcmsaParams::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  this->out.collect(out, prefix + ".out");
}

Tensor acmsa(const Tensor& x, const CategoryAssignment& a, const AcmsaParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.query.in_features()) {
    throw ShapeError("acmsa: tokens " + shape_str(x.shape()) + " do not match width " +
                     std::to_string(p.query.in_features()));
  }
  if (x.dim(0) != a.perm.size()) {
    throw ShapeError("acmsa: routing covers " + std::to_string(a.perm.size()) + " tokens, got " +
                     std::to_string(x.dim(0)));
  }
  Tensor sorted = gather_rows(x, a.perm);
  AttentionOptions opt;
  opt.heads = p.heads;
  Tensor y = grouped_attention(p.query(sorted), p.key(sorted), p.value(sorted), a.group_bounds, opt);
  return p.out(uncategorize(y, a));
}

Tensor acmsa(const Tensor& x, const Tensor& attn_map, const AcmsaParams& p, std::size_t group_size) {
  if (attn_map.rank() != 2 || attn_map.dim(0) != x.dim(0)) {
    throw ShapeError("acmsa: attention map " + shape_str(attn_map.shape()) + " for tokens " + shape_str(x.shape()));
  }
  return acmsa(x, make_assignment(assign_categories(attn_map), group_size), p);
}

AttentionFlops attention_flops(std::size_t n, std::size_t group_size, std::size_t dim, std::size_t heads) {
  if (n == 0 || group_size == 0 || dim == 0 || heads == 0) throw Error("attention_flops: arguments must be positive");
  // Splitting into heads does not change the count.
  (void)heads;
  const double N = static_cast<double>(n), d = static_cast<double>(dim), g = static_cast<double>(group_size);
  AttentionFlops f;
  f.projection = 4.0 * 2.0 * N * d * d;
  f.scores = 2.0 * N * g * d;
  f.aggregate = 2.0 * N * g * d;
  return f;
}

AttentionFlops global_attention_flops(std::size_t n, std::size_t dim, std::size_t heads) {
  return attention_flops(n, n, dim, heads);
}

namespace {

std::vector<std::uint8_t> category_palette() {
  // Spread hues with the golden-angle step so neighbouring indices contrast.
  std::vector<std::uint8_t> pal;
  for (int i = 0; i < 256; ++i) {
    const double h = std::fmod(i * 137.50776405, 360.0) / 60.0;
    const double s = 0.65 + 0.35 * ((i / 7) % 2), v = 0.95 - 0.3 * ((i / 3) % 2);
    const double c = v * s, x = c * (1 - std::fabs(std::fmod(h, 2.0) - 1)), m = v - c;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(h)) {
      case 0: r = c, g = x; break;
      case 1: r = x, g = c; break;
      case 2: g = c, b = x; break;
      case 3: g = x, b = c; break;
      case 4: r = x, b = c; break;
      default: r = c, b = x; break;
    }
    for (double ch : {r, g, b}) pal.push_back(static_cast<std::uint8_t>(std::lround((ch + m) * 255.0)));
  }
  return pal;
}

}  // namespace

void write_category_png(const std::string& path, const std::vector<int>& category_idx, std::size_t rows,
                        std::size_t cols) {
  if (category_idx.size() != rows * cols) throw ShapeError("write_category_png: index count does not match grid");
  std::vector<std::uint8_t> px(category_idx.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(category_idx[i] & 0xff);
  write_indexed_png(path, px, rows, cols, category_palette());
}

void write_category_csv(std::ostream& os, const std::vector<int>& category_idx, std::size_t rows, std::size_t cols) {
  if (category_idx.size() != rows * cols) throw ShapeError("write_category_csv: index count does not match grid");
  os << "token_row,token_col,category\n";
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) os << r << ',' << c << ',' << category_idx[r * cols + c] << '\n';
}

void write_group_csv(std::ostream& os, const CategoryAssignment& a, std::size_t cols) {
  os << "group,position,token_row,token_col,category\n";
  for (std::size_t g = 0; g < a.group_bounds.size(); ++g) {
    for (std::size_t s = a.group_bounds[g].begin; s < a.group_bounds[g].end; ++s) {
      const std::size_t t = a.perm[s];
      os << g << ',' << s << ',' << t / cols << ',' << t % cols << ',' << a.category_idx[t] << '\n';
    }
  }
}

}  // namespace atd
