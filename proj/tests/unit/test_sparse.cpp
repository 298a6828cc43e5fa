#include <cmath>
#include <sstream>

#include "atd/sparse.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace atd;

namespace {

// Random orthonormal d x d basis by Gram-Schmidt.
std::vector<double> orthonormal(std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> cols;
  while (cols.size() < d) {
    std::vector<double> v(d);
    for (auto& e : v) e = std::normal_distribution<double>(0.0, 1.0)(rng);
    for (const auto& c : cols) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += v[i] * c[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * c[i];
    }
    double n = 0;
    for (double e : v) n += e * e;
    for (auto& e : v) e /= std::sqrt(n);
    cols.push_back(v);
  }
  std::vector<double> m(d * d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) m[r * d + c] = cols[c][r];
  return m;
}

std::vector<double> gaussian(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& e : v) e = std::normal_distribution<double>(0.0, 1.0)(rng);
  return v;
}

std::vector<double> mat_vec(const std::vector<double>& m, std::size_t rows, std::size_t cols,
                            const std::vector<double>& v) {
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += m[r * cols + c] * v[c];
  return out;
}

}  // namespace

TEST_CASE("soft_threshold") {
  Rng rng(30);
  CHECK(soft_threshold(2.0, 0.25) == 1.75);
  CHECK(soft_threshold(-2.0, 0.25) == -1.75);
  CHECK(soft_threshold(0.1, 0.25) == 0.0);
  for (int i = 0; i < 1000; ++i) {
    const double v = std::normal_distribution<double>(0.0, 2.0)(rng), t = std::fabs(v) * rng() / rng.max() * 2;
    const double r = soft_threshold(v, t);
    CHECK(std::fabs(r) == doctest::Approx(std::max(std::fabs(v) - t, 0.0)));
    CHECK((r == 0.0 || (r > 0) == (v > 0)));
  }
}

TEST_CASE("lasso_solve") {
  Rng rng(31);
  const std::size_t d = 6;
  SUBCASE("closed form on an orthonormal dictionary") {
    auto q = orthonormal(d, rng);
    std::vector<double> y(d);
    for (std::size_t r = 0; r < d; ++r) y[r] = 2.0 * q[r * d + 0];
    auto p = SparseCodingProblem::create(q, q, d, d, y, 0.5);
    auto a = lasso_solve(p, 200);
    CHECK(a[0] == doctest::Approx(1.75).epsilon(1e-9));
    for (std::size_t k = 1; k < d; ++k) CHECK(std::fabs(a[k]) < 1e-9);
  }
  SUBCASE("orthonormal solutions equal soft-thresholded correlations") {
    for (int trial = 0; trial < 20; ++trial) {
      auto q = orthonormal(d, rng);
      auto y = gaussian(d, rng);
      const double lambda = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
      auto p = SparseCodingProblem::create(q, q, d, d, y, lambda);
      auto a = lasso_solve(p, 100);
      for (std::size_t k = 0; k < d; ++k) {
        double corr = 0;
        for (std::size_t r = 0; r < d; ++r) corr += q[r * d + k] * y[r];
        CHECK(std::fabs(a[k] - soft_threshold(corr, lambda / 2)) < 1e-6);
      }
    }
  }
  SUBCASE("lambda zero recovers the code") {
    auto q = orthonormal(d, rng);
    auto code = gaussian(d, rng);
    auto p = SparseCodingProblem::create(q, q, d, d, mat_vec(q, d, d, code), 0.0);
    auto a = lasso_solve(p, 100);
    for (std::size_t k = 0; k < d; ++k) CHECK(std::fabs(a[k] - code[k]) < 1e-5);
  }
  SUBCASE("large lambda shrinks everything") {
    const std::size_t k = 12;
    auto low = gaussian(d * k, rng);
    auto y = gaussian(d, rng);
    auto p = SparseCodingProblem::create(low, low, d, k, y, 0.0);
    double peak = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double corr = 0;
      for (std::size_t r = 0; r < d; ++r) corr += p.low[r * k + c] * y[r];
      peak = std::max(peak, std::fabs(corr));
    }
    p.lambda = 2 * peak;
    for (double a : lasso_solve(p, 300)) CHECK(a == 0.0);
  }
  SUBCASE("overcomplete objective decreases monotonically") {
    const std::size_t k = 20;
    auto low = gaussian(d * k, rng);
    auto p = SparseCodingProblem::create(low, low, d, k, gaussian(d, rng), 0.3);
    double prev = lasso_objective(p, std::vector<double>(k, 0.0));
    for (std::size_t iters = 1; iters <= 50; ++iters) {
      auto q = p;
      const double obj = lasso_objective(q, lasso_solve(q, iters));
      CHECK(obj <= prev + 1e-12);
      prev = obj;
    }
  }
  SUBCASE("oversized step is reported with its iteration") {
    const std::size_t k = 20;
    auto low = gaussian(d * k, rng);
    auto p = SparseCodingProblem::create(low, low, d, k, gaussian(d, rng), 0.01);
    const double l = gram_spectral_norm(p);
    CHECK_THROWS_WITH_AS(lasso_solve(p, 100, 5.0 / l), doctest::Contains("at iteration"), Error);
  }
  SUBCASE("power iteration") {
    auto q = orthonormal(d, rng);
    auto p = SparseCodingProblem::create(q, q, d, d, gaussian(d, rng), 0.0);
    CHECK(gram_spectral_norm(p) == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("construction") {
    std::vector<double> low = {3, 0, 4, 2}, high = low;  // columns (3,4) and (0,2)
    auto p = SparseCodingProblem::create(low, high, 2, 2, {1, 1}, 0.0);
    CHECK(p.low[0] == doctest::Approx(0.6));
    CHECK(p.low[2] == doctest::Approx(0.8));
    CHECK(p.low[3] == doctest::Approx(1.0));
    CHECK(p.high[0] == 3);
    CHECK_THROWS_AS(SparseCodingProblem::create({0, 1, 0, 1}, high, 2, 2, {1, 1}, 0.0), Error);
    CHECK_THROWS_AS(SparseCodingProblem::create(low, high, 2, 2, {1, 1}, -1.0), Error);
    CHECK_THROWS_AS(SparseCodingProblem::create(low, high, 2, 2, {1}, 0.0), ShapeError);
  }
}

TEST_CASE("reconstruct_hq") {
  Rng rng(32);
  const std::size_t d = 5, k = 9;
  auto low = gaussian(d * k, rng), high = gaussian(d * k, rng);
  auto p = SparseCodingProblem::create(low, high, d, k, gaussian(d, rng), 0.1);
  p.alpha.assign(k, 0.0);
  p.alpha[0] = 1.0;
  auto col = reconstruct_hq(p);
  for (std::size_t r = 0; r < d; ++r) CHECK(col[r] == high[r * k]);
  p.alpha.assign(k, 0.0);
  for (double v : reconstruct_hq(p)) CHECK(v == 0.0);
  p.alpha = gaussian(k, rng);
  auto out = reconstruct_hq(p);
  for (std::size_t r = 0; r < d; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < k; ++c) acc += high[r * k + c] * p.alpha[c];
    CHECK(std::fabs(out[r] - acc) < 1e-6);
  }
  p.alpha.clear();
  CHECK_THROWS_AS(reconstruct_hq(p), ShapeError);
}

TEST_CASE("analogy_report") {
  Rng rng(33);
  const std::size_t m = 16, d = 8;
  auto dict = TokenDictionary::create(m, d, d, rng);
  for (auto& v : dict.entries.mutable_data()) v = std::normal_distribution<float>(0.0f, 1.0f)(rng);
  auto mean = [](const std::vector<AnalogyRow>& rows, auto field) {
    double s = 0;
    for (const auto& r : rows) s += static_cast<double>(r.*field);
    return s / rows.size();
  };
  SUBCASE("unregularized and unsharpened rows are dense") {
    dict.tau.mutable_data()[0] = 0.0f;  // tau' = 1
    AnalogyOptions opt;
    opt.lambda = 0.0;
    auto rows = analogy_report(20, dict, opt);
    REQUIRE(rows.size() == 20);
    CHECK(mean(rows, &AnalogyRow::lasso_nnz) >= d);
    CHECK(mean(rows, &AnalogyRow::tdca_effective_nnz) >= m / 4.0);
    CHECK(mean(rows, &AnalogyRow::lasso_err) < 1e-3);
  }
  SUBCASE("strong penalty and sharp attention both concentrate") {
    AnalogyOptions opt;
    opt.lambda = 0.0;
    dict.tau.mutable_data()[0] = 0.0f;
    auto dense = analogy_report(20, dict, opt);
    opt.lambda = 2.0;
    dict.tau.mutable_data()[0] = static_cast<float>(49.0 / std::log(double(m)));  // tau' = 50
    auto sparse = analogy_report(20, dict, opt);
    CHECK(mean(sparse, &AnalogyRow::lasso_nnz) < mean(dense, &AnalogyRow::lasso_nnz) / 2);
    CHECK(mean(sparse, &AnalogyRow::tdca_effective_nnz) < mean(dense, &AnalogyRow::tdca_effective_nnz) / 2);
  }
  SUBCASE("empty and csv") {
    CHECK(analogy_report(0, dict).empty());
    std::ostringstream os;
    write_analogy_csv(os, {AnalogyRow{3, 2, 5, 0.5, 0.25}});
    CHECK(os.str() == "signal_id,lasso_nnz,tdca_effective_nnz,lasso_err,tdca_err\n3,2,5,0.5,0.25\n");
  }
  SUBCASE("deterministic") {
    AnalogyOptions opt;
    opt.seed = 9;
    auto a = analogy_report(5, dict, opt), b = analogy_report(5, dict, opt);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(a[i].lasso_err == b[i].lasso_err);
      CHECK(a[i].tdca_err == b[i].tdca_err);
    }
  }
}
