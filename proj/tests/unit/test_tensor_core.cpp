#include <cmath>
#include <limits>
#include <numeric>

#include "atd/ops.hpp"
#include "atd/parallel.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace atd;
using atd::testing::bit_equal;
using atd::testing::expect_gradients;
using atd::testing::max_abs_diff;

namespace {

// Element-wise triple loop in double.
std::vector<float> matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      out[i * n + j] = static_cast<float>(acc);
    }
  return out;
}

// Six nested loops over (y, x, co, dy, dx, ci) with explicit zero padding.
std::vector<float> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const long h = x.dim(0), wd = x.dim(1), cin = x.dim(2), k = w.dim(0), cout = w.dim(3), p = k / 2;
  std::vector<float> out(h * wd * cout);
  for (long y = 0; y < h; ++y)
    for (long xx = 0; xx < wd; ++xx)
      for (long co = 0; co < cout; ++co) {
        double acc = b[co];
        for (long dy = 0; dy < k; ++dy)
          for (long dx = 0; dx < k; ++dx)
            for (long ci = 0; ci < cin; ++ci) {
              const long iy = y + dy - p, ix = xx + dx - p;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += static_cast<double>(x[(iy * wd + ix) * cin + ci]) * w[((dy * k + dx) * cin + ci) * cout + co];
            }
        out[(y * wd + xx) * cout + co] = static_cast<float>(acc);
      }
  return out;
}

std::vector<float> dwconv_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const long h = x.dim(0), wd = x.dim(1), c = x.dim(2), k = w.dim(0), p = k / 2;
  std::vector<float> out(h * wd * c);
  for (long y = 0; y < h; ++y)
    for (long xx = 0; xx < wd; ++xx)
      for (long ch = 0; ch < c; ++ch) {
        double acc = b[ch];
        for (long dy = 0; dy < k; ++dy)
          for (long dx = 0; dx < k; ++dx) {
            const long iy = y + dy - p, ix = xx + dx - p;
            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
            acc += static_cast<double>(x[(iy * wd + ix) * c + ch]) * w[(dy * k + dx) * c + ch];
          }
        out[(y * wd + xx) * c + ch] = static_cast<float>(acc);
      }
  return out;
}

}  // namespace

TEST_CASE("matmul") {
  SUBCASE("identity") {
    auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(bit_equal(matmul(eye, m), m));
  }
  SUBCASE("hand arithmetic") {
    auto a = Tensor::from({2, 2}, {1, 0, 0, 0});
    auto b = Tensor::from({2, 2}, {0, 1, 1, 0});
    CHECK(matmul(a, b).to_vector() == std::vector<float>{0, 1, 0, 0});
  }
  SUBCASE("random vs triple loop") {
    Rng rng(1);
    auto a = Tensor::uniform({3, 4}, -1, 1, rng);
    auto b = Tensor::uniform({4, 5}, -1, 1, rng);
    CHECK(max_abs_diff(matmul(a, b).data(), matmul_oracle(a, b)) < 1e-6);
  }
  SUBCASE("shape mismatch names both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3] x [4x2]"), ShapeError);
  }
}

TEST_CASE("softmax_rows") {
  auto s = softmax_rows(Tensor::from({1, 4}, {0, 0, 0, 0}));
  for (float v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
  auto t = softmax_rows(Tensor::from({1, 2}, {std::log(1.0f), std::log(3.0f)}));
  CHECK(t[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(t[1] == doctest::Approx(0.75).epsilon(1e-6));
  auto big = softmax_rows(Tensor::from({1, 2}, {1000, 0}));
  CHECK(big[0] == 1.0f);
  CHECK(big[1] == 0.0f);

  SUBCASE("rows sum to one for large-magnitude logits") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      auto x = Tensor::uniform({4, 17}, -1000, 1000, rng);
      auto y = softmax_rows(x);
      for (std::size_t r = 0; r < 4; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < 17; ++j) {
          CHECK(y[r * 17 + j] >= 0.0f);
          total += y[r * 17 + j];
        }
        CHECK(std::fabs(total - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("layer_norm") {
  auto ones = Tensor::full({4}, 1.0f);
  auto zeros = Tensor::zeros({4});
  auto flat = layer_norm(Tensor::full({1, 4}, 3.5f), ones, zeros);
  for (float v : flat.data()) CHECK(v == 0.0f);

  auto pair = layer_norm(Tensor::from({1, 2}, {1, 3}), Tensor::full({2}, 1.0f), Tensor::zeros({2}), 0.0f);
  CHECK(pair[0] == doctest::Approx(-1.0));
  CHECK(pair[1] == doctest::Approx(1.0));

  Rng rng(3);
  auto x = Tensor::randn({2, 8}, 3.0f, rng);
  auto y = layer_norm(x, Tensor::full({8}, 1.0f), Tensor::zeros({8}));
  for (std::size_t r = 0; r < 2; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mu += y[r * 8 + j];
    mu /= 8;
    for (std::size_t j = 0; j < 8; ++j) var += (y[r * 8 + j] - mu) * (y[r * 8 + j] - mu);
    var /= 8;
    CHECK(std::fabs(mu) < 1e-6);
    CHECK(std::fabs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("conv2d") {
  SUBCASE("1x1 identity kernel") {
    Rng rng(4);
    auto x = Tensor::uniform({5, 4, 3}, -1, 1, rng);
    std::vector<float> w(9, 0.0f);
    for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
    auto y = conv2d(x, Tensor::from({1, 1, 3, 3}, w), Tensor::zeros({3}));
    CHECK(bit_equal(y, x));
  }
  SUBCASE("impulse through all-ones 3x3") {
    auto x = Tensor::zeros({5, 5, 1});
    std::vector<float> v(25, 0.0f);
    v[2 * 5 + 2] = 1.0f;
    x = Tensor::from({5, 5, 1}, v);
    auto y = conv2d(x, Tensor::full({3, 3, 1, 1}, 1.0f), Tensor::zeros({1}));
    for (int yy = 0; yy < 5; ++yy)
      for (int xx = 0; xx < 5; ++xx) {
        const bool inside = yy >= 1 && yy <= 3 && xx >= 1 && xx <= 3;
        CHECK(y[yy * 5 + xx] == (inside ? 1.0f : 0.0f));
      }
  }
  SUBCASE("random vs loop oracle") {
    Rng rng(5);
    auto x = Tensor::uniform({6, 7, 3}, -1, 1, rng);
    auto w = Tensor::uniform({3, 3, 3, 4}, -1, 1, rng);
    auto b = Tensor::uniform({4}, -1, 1, rng);
    CHECK(max_abs_diff(conv2d(x, w, b).data(), conv_oracle(x, w, b)) < 1e-5);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({4, 4, 2}), Tensor::zeros({3, 3, 3, 1}), Tensor::zeros({1})), ShapeError);
  }
}

TEST_CASE("dwconv2d") {
  Rng rng(6);
  auto x = Tensor::uniform({4, 5, 3}, -1, 1, rng);
  CHECK(bit_equal(dwconv2d(x, Tensor::full({1, 1, 3}, 1.0f), Tensor::zeros({3})), x));

  std::vector<float> imp(5 * 5 * 2, 0.0f);
  imp[(2 * 5 + 2) * 2 + 0] = 1.0f;
  auto y = dwconv2d(Tensor::from({5, 5, 2}, imp), Tensor::uniform({3, 3, 2}, 0.5f, 1.0f, rng), Tensor::zeros({2}));
  for (std::size_t p = 0; p < 25; ++p) CHECK(y[p * 2 + 1] == 0.0f);

  auto w = Tensor::uniform({3, 3, 3}, -1, 1, rng);
  auto b = Tensor::uniform({3}, -1, 1, rng);
  CHECK(max_abs_diff(dwconv2d(x, w, b).data(), dwconv_oracle(x, w, b)) < 1e-5);
  CHECK_THROWS_AS(dwconv2d(x, Tensor::zeros({3, 3, 2}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("pixel_shuffle") {
  Rng rng(7);
  auto x = Tensor::uniform({3, 2, 4}, -1, 1, rng);
  CHECK(bit_equal(pixel_shuffle(x, 1), x));

  auto y = pixel_shuffle(Tensor::from({1, 1, 4}, {1, 2, 3, 4}), 2);
  CHECK(y.shape() == Shape{2, 2, 1});
  CHECK(y.to_vector() == std::vector<float>{1, 2, 3, 4});

  for (std::size_t r : {2u, 3u}) {
    auto z = Tensor::uniform({3, 4, 2 * r * r}, -1, 1, rng);
    CHECK(bit_equal(pixel_unshuffle(pixel_shuffle(z, r), r), z));
  }
  CHECK_THROWS_AS(pixel_shuffle(Tensor::zeros({2, 2, 6}), 2), ShapeError);
}

TEST_CASE("stable_argsort") {
  std::vector<int> k1{2, 0, 1};
  CHECK(stable_argsort(k1) == std::vector<std::size_t>{1, 2, 0});
  std::vector<int> same(6, 3);
  CHECK(stable_argsort(same) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});

  Rng rng(8);
  std::uniform_int_distribution<int> key(0, 5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> keys(1 + trial);
    for (auto& v : keys) v = key(rng);
    auto perm = stable_argsort(keys);
    auto sorted = keys;
    std::stable_sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(keys[perm[i]] == sorted[i]);
    for (std::size_t i = 1; i < perm.size(); ++i)
      if (keys[perm[i]] == keys[perm[i - 1]]) CHECK(perm[i] > perm[i - 1]);
    auto inv = inverse_permutation(perm);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(perm[inv[i]] == i);
  }
}

TEST_CASE("backward") {
  auto x = Tensor::from({3}, {1, -2, 3}, true);
  sum(x).backward();
  CHECK(x.to_vector() == std::vector<float>{1, -2, 3});
  for (float g : x.grad()) CHECK(g == 1.0f);

  x.zero_grad();
  sum(mul(x, x)).backward();
  CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{2, -4, 6});

  SUBCASE("fan-out accumulates") {
    auto y = Tensor::from({2}, {1, 2}, true);
    sum(add(y, add(y, y))).backward();
    for (float g : y.grad()) CHECK(g == 3.0f);
  }
  SUBCASE("leaves the graph does not depend on get zero") {
    auto a = Tensor::from({2}, {1, 2}, true);
    auto b = Tensor::from({2}, {3, 4}, true);
    auto l = sum(add(a, scale(b, 0.0f)));
    l.backward();
    for (float g : b.grad()) CHECK(g == 0.0f);
  }
  SUBCASE("non-scalar loss is rejected") {
    auto a = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(add(a, a).backward(), ShapeError);
  }
  SUBCASE("tape order puts parents first") {
    auto a = Tensor::from({2}, {1, 2}, true);
    auto l = sum(mul(add(a, a), a));
    Tape tape(l);
    CHECK(tape.nodes().front() == a.node().get());
    CHECK(tape.nodes().back() == l.node().get());
  }
}

TEST_CASE("non-finite values surface as errors") {
  auto x = Tensor::from({2}, {1e30f, 1.0f});
  CHECK_THROWS_AS(scale(x, 1e30f), NumericError);
}

TEST_CASE("finite-difference gradients of every op over random shapes") {
  Rng rng(11);
  std::uniform_int_distribution<std::size_t> ext(1, 5);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const std::size_t m = ext(rng), k = ext(rng), n = ext(rng), c = 1 + ext(rng);
    const std::uint64_t seed = 100 + trial;

    auto a = Tensor::uniform({m, k}, -1, 1, rng, true);
    auto b = Tensor::uniform({k, n}, -1, 1, rng, true);
    expect_gradients([&] { return matmul(a, b); }, {{"a", a}, {"b", b}}, seed);

    auto bias = Tensor::uniform({n}, -1, 1, rng, true);
    expect_gradients([&] { return linear(a, b, bias); }, {{"x", a}, {"w", b}, {"b", bias}}, seed);

    auto s = Tensor::uniform({m, c}, -2, 2, rng, true);
    expect_gradients([&] { return softmax_rows(s); }, {{"x", s}}, seed);
    expect_gradients([&] { return gelu(s); }, {{"x", s}}, seed);
    expect_gradients([&] { return l2_normalize_rows(s, 1e-8f); }, {{"x", s}}, seed);
    expect_gradients([&] { return transpose(s); }, {{"x", s}}, seed);

    // Two channels normalise to exactly +-1, leaving a vanishing input gradient.
    auto ln_in = Tensor::uniform({m, c + 1}, -2, 2, rng, true);
    auto gamma = Tensor::uniform({c + 1}, 0.5f, 1.5f, rng, true);
    auto beta = Tensor::uniform({c + 1}, -1, 1, rng, true);
    expect_gradients([&] { return layer_norm(ln_in, gamma, beta); },
                     {{"x", ln_in}, {"gamma", gamma}, {"beta", beta}}, seed);

    auto t = Tensor::uniform({1}, 0.5f, 2.0f, rng, true);
    expect_gradients([&] { return mul_scalar(s, t); }, {{"x", s}, {"s", t}}, seed);
    auto s2 = Tensor::uniform({m, c}, -2, 2, rng, true);
    expect_gradients([&] { return mul(s, s2); }, {{"a", s}, {"b", s2}}, seed);
    expect_gradients([&] { return concat_last(s, a); }, {{"a", s}, {"b", a}}, seed);
    expect_gradients([&] { return l1_loss(s, s2); }, {{"a", s}, {"b", s2}}, seed);
    expect_gradients([&] { return charbonnier_loss(s, s2); }, {{"a", s}, {"b", s2}}, seed);

    std::vector<std::size_t> idx(m + 2);
    for (auto& v : idx) v = rng() % m;
    expect_gradients([&] { return gather_rows(s, idx); }, {{"x", s}}, seed);

    const std::size_t h = 2 + ext(rng) % 4, w = 2 + ext(rng) % 4, cin = ext(rng) % 3 + 1, cout = ext(rng) % 3 + 1;
    auto img = Tensor::uniform({h, w, cin}, -1, 1, rng, true);
    auto kern = Tensor::uniform({3, 3, cin, cout}, -1, 1, rng, true);
    auto kb = Tensor::uniform({cout}, -1, 1, rng, true);
    expect_gradients([&] { return conv2d(img, kern, kb); }, {{"x", img}, {"w", kern}, {"b", kb}}, seed);
    auto dk = Tensor::uniform({3, 3, cin}, -1, 1, rng, true);
    auto db = Tensor::uniform({cin}, -1, 1, rng, true);
    expect_gradients([&] { return dwconv2d(img, dk, db); }, {{"x", img}, {"w", dk}, {"b", db}}, seed);
    expect_gradients([&] { return reflect_pad(img, h - 1, w - 1); }, {{"x", img}}, seed);
    auto ps = Tensor::uniform({h, w, 4 * cin}, -1, 1, rng, true);
    expect_gradients([&] { return pixel_shuffle(ps, 2); }, {{"x", ps}}, seed);

    const std::size_t heads = 1 + trial % 2, dh = 1 + ext(rng) % 3, d = heads * dh, nn = 3 + ext(rng);
    auto q = Tensor::uniform({nn, d}, -1, 1, rng, true);
    auto kk = Tensor::uniform({nn, d}, -1, 1, rng, true);
    auto v = Tensor::uniform({nn, d}, -1, 1, rng, true);
    std::vector<Range> groups{{0, 2}, {2, nn}};
    AttentionOptions opt;
    opt.heads = heads;
    expect_gradients([&] { return grouped_attention(q, kk, v, groups, opt); }, {{"q", q}, {"k", kk}, {"v", v}},
                     seed);
    std::vector<Range> even{{0, 2}, {2, 4}};
    auto q4 = Tensor::uniform({4, d}, -1, 1, rng, true);
    auto biast = Tensor::uniform({heads, 2, 2}, -1, 1, rng, true);
    AttentionOptions bopt;
    bopt.heads = heads;
    bopt.bias = biast;
    expect_gradients([&] { return grouped_attention(q4, q4, q4, even, bopt); }, {{"qkv", q4}, {"bias", biast}}, seed);
  }
}

TEST_CASE("determinism across runs and thread counts") {
  auto run = [] {
    Rng rng(42);
    auto x = Tensor::uniform({8, 8, 4}, -1, 1, rng);
    auto w = Tensor::uniform({3, 3, 4, 4}, -1, 1, rng);
    auto y = conv2d(x, w, Tensor::zeros({4}));
    auto q = reshape(y, {64, 4});
    std::vector<Range> groups{{0, 16}, {16, 32}, {32, 48}, {48, 64}};
    AttentionOptions opt;
    opt.heads = 2;
    return grouped_attention(q, q, q, groups, opt);
  };
  const int saved = num_threads();
  set_num_threads(1);
  auto a = run();
  set_num_threads(3);
  auto b = run();
  set_num_threads(saved);
  auto c = run();
  CHECK(bit_equal(a, b));
  CHECK(bit_equal(a, c));
}
