#include "atd/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <string>

#include "atd/ops.hpp"

namespace atd {

namespace {

// low * a
std::vector<double> apply(const SparseCodingProblem& p, const std::vector<double>& m, std::span<const double> a) {
  std::vector<double> out(p.dim, 0.0);
  for (std::size_t r = 0; r < p.dim; ++r)
    for (std::size_t c = 0; c < p.atoms; ++c) out[r] += m[r * p.atoms + c] * a[c];
  return out;
}

// low^T v
std::vector<double> apply_t(const SparseCodingProblem& p, std::span<const double> v) {
  std::vector<double> out(p.atoms, 0.0);
  for (std::size_t r = 0; r < p.dim; ++r)
    for (std::size_t c = 0; c < p.atoms; ++c) out[c] += p.low[r * p.atoms + c] * v[r];
  return out;
}

double norm2(std::span<const double> v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); }

}  // namespace

SparseCodingProblem SparseCodingProblem::create(std::vector<double> low, std::vector<double> high, std::size_t dim,
                                                std::size_t atoms, std::vector<double> signal, double lambda) {
  if (low.size() != dim * atoms || high.size() != dim * atoms || signal.size() != dim)
    throw ShapeError("sparse coding: dictionaries must be dim x atoms and the signal dim long");
  if (!(lambda >= 0.0)) throw Error("sparse coding: lambda must be nonnegative");
  for (std::size_t c = 0; c < atoms; ++c) {
    double n = 0;
    for (std::size_t r = 0; r < dim; ++r) n += low[r * atoms + c] * low[r * atoms + c];
    if (n == 0.0) throw Error("sparse coding: atom " + std::to_string(c) + " of the low dictionary is zero");
    n = std::sqrt(n);
    for (std::size_t r = 0; r < dim; ++r) low[r * atoms + c] /= n;
  }
  SparseCodingProblem p;
  p.dim = dim;
  p.atoms = atoms;
  p.low = std::move(low);
  p.high = std::move(high);
  p.signal = std::move(signal);
  p.lambda = lambda;
  return p;
}

double soft_threshold(double v, double t) { return std::copysign(std::max(std::fabs(v) - t, 0.0), v); }

std::vector<double> soft_threshold(std::span<const double> v, double t) {
  std::vector<double> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [t](double x) { return soft_threshold(x, t); });
  return out;
}

double gram_spectral_norm(const SparseCodingProblem& p, std::size_t iters) {
  std::vector<double> v(p.atoms, 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(p.atoms, 1))));
  // Deterministic non-symmetric start avoids an exact orthogonal start vector.
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= 1.0 + 0.01 * static_cast<double>(i % 7);
  double eig = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    auto w = apply_t(p, apply(p, p.low, v));
    const double n = norm2(w);
    if (n == 0.0) return 0.0;
    eig = std::inner_product(v.begin(), v.end(), w.begin(), 0.0) / std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / n;
  }
  return eig;
}

double lasso_objective(const SparseCodingProblem& p, std::span<const double> alpha) {
  auto r = apply(p, p.low, alpha);
  double sq = 0, l1 = 0;
  for (std::size_t i = 0; i < p.dim; ++i) sq += (r[i] - p.signal[i]) * (r[i] - p.signal[i]);
  for (double a : alpha) l1 += std::fabs(a);
  return sq + p.lambda * l1;
}

std::vector<double> lasso_solve(SparseCodingProblem& p, std::size_t iters, double step,
                                std::vector<double>* history) {
  if (step <= 0.0) {
    // 1% headroom for the power-iteration estimate.
    const double l = gram_spectral_norm(p);
    step = l > 0.0 ? 0.99 / l : 1.0;
  }
  std::vector<double> alpha(p.atoms, 0.0);
  double obj = lasso_objective(p, alpha);
  if (history) history->assign(1, obj);
  // The update is proximal gradient on half the objective, hence the halved threshold.
  const double thresh = step * p.lambda / 2.0;
  for (std::size_t it = 1; it <= iters; ++it) {
    auto r = apply(p, p.low, alpha);
    for (std::size_t i = 0; i < p.dim; ++i) r[i] -= p.signal[i];
    auto g = apply_t(p, r);
    for (std::size_t k = 0; k < p.atoms; ++k) alpha[k] = soft_threshold(alpha[k] - step * g[k], thresh);
    const double next = lasso_objective(p, alpha);
    if (!std::isfinite(next) || next > obj + 1e-12 * std::max(1.0, std::fabs(obj)))
      throw Error("lasso: objective increased at iteration " + std::to_string(it) + " (" + std::to_string(obj) +
                  " -> " + std::to_string(next) + "); step too large");
    obj = next;
    if (history) history->push_back(obj);
  }
  p.alpha = alpha;
  return alpha;
}

std::vector<double> reconstruct_hq(const SparseCodingProblem& p) {
  if (p.alpha.size() != p.atoms) throw ShapeError("reconstruct_hq: alpha has not been computed");
  return apply(p, p.high, p.alpha);
}

std::vector<AnalogyRow> analogy_report(std::size_t n_signals, const TokenDictionary& dict,
                                       const AnalogyOptions& options) {
  const std::size_t m = dict.size(), d = dict.dim();
  std::vector<double> atoms(d * m);  // [d x M], unit columns
  for (std::size_t i = 0; i < m; ++i) {
    double n = 0;
    for (std::size_t c = 0; c < d; ++c) n += double(dict.entries[i * d + c]) * dict.entries[i * d + c];
    n = std::max(std::sqrt(n), 1e-12);
    for (std::size_t c = 0; c < d; ++c) atoms[c * m + i] = dict.entries[i * d + c] / n;
  }
  Rng rng(options.seed);
  std::vector<AnalogyRow> rows;
  NoGradGuard guard;
  for (std::size_t s = 0; s < n_signals; ++s) {
    std::vector<double> y(d, 0.0);
    for (std::size_t k = 0; k < options.atoms_per_signal; ++k) {
      const std::size_t a = rng() % m;
      const double coef = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
      for (std::size_t c = 0; c < d; ++c) y[c] += coef * atoms[c * m + a];
    }
    const double ny = std::max(norm2(y), 1e-12);

    auto p = SparseCodingProblem::create(atoms, atoms, d, m, y, options.lambda);
    lasso_solve(p, options.iters);
    AnalogyRow row;
    row.signal_id = s;
    row.lasso_nnz = static_cast<std::size_t>(
        std::count_if(p.alpha.begin(), p.alpha.end(), [](double a) { return std::fabs(a) > 1e-6; }));
    auto rec = reconstruct_hq(p);
    for (std::size_t c = 0; c < d; ++c) rec[c] -= y[c];
    row.lasso_err = norm2(rec) / ny;

    std::vector<float> token(y.begin(), y.end());
    auto attn = tdca(Tensor::from({1, d}, token), dict).attn_map;
    std::vector<double> mix(d, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      if (attn[i] > 1.0f / static_cast<float>(m)) ++row.tdca_effective_nnz;
      for (std::size_t c = 0; c < d; ++c) mix[c] += attn[i] * atoms[c * m + i];
    }
    const double mm = std::inner_product(mix.begin(), mix.end(), mix.begin(), 0.0);
    const double gain = mm > 0 ? std::inner_product(mix.begin(), mix.end(), y.begin(), 0.0) / mm : 0.0;
    for (std::size_t c = 0; c < d; ++c) mix[c] = gain * mix[c] - y[c];
    row.tdca_err = norm2(mix) / ny;
    rows.push_back(row);
  }
  return rows;
}

void write_analogy_csv(std::ostream& os, const std::vector<AnalogyRow>& rows) {
  os << "signal_id,lasso_nnz,tdca_effective_nnz,lasso_err,tdca_err\n";
  for (const auto& r : rows)
    os << r.signal_id << ',' << r.lasso_nnz << ',' << r.tdca_effective_nnz << ',' << r.lasso_err << ','
       << r.tdca_err << '\n';
}

}  // namespace atd
