#include <cmath>
#include <filesystem>
#include <limits>

#include "atd/image.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace atd;

namespace {

Image random_image(std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  auto img = Image::zeros(h, w, c);
  for (auto& v : img.data) v = std::uniform_real_distribution<float>(0.0f, 1.0f)(rng);
  return img;
}

// Direct kernel sum over every source pixel, weights from the unclamped
// source position, contributions read at the clamped one.
double resize_oracle(const Image& src, std::size_t oh, std::size_t ow, std::size_t oy, std::size_t ox,
                     std::size_t c) {
  auto axis = [](std::size_t in, std::size_t out, std::size_t o) {
    const double s = static_cast<double>(out) / in, stretch = std::min(s, 1.0);
    const double centre = (o + 0.5) / s - 0.5;
    std::vector<std::pair<long, double>> taps;
    double total = 0;
    for (long t = -8; t < long(in) + 8; ++t) {
      const double wt = cubic_kernel((t - centre) * stretch);
      if (wt == 0.0) continue;
      taps.push_back({std::clamp<long>(t, 0, long(in) - 1), wt});
      total += wt;
    }
    for (auto& t : taps) t.second /= total;
    return taps;
  };
  double acc = 0;
  for (auto [y, wy] : axis(src.height, oh, oy))
    for (auto [x, wx] : axis(src.width, ow, ox)) acc += wy * wx * src.at(y, x, c);
  return acc;
}

double mse_two_pass(const Image& a, const Image& b) {
  double mean_sq = 0;
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.data.size(); ++i) diff.push_back(double(a.data[i]) - b.data[i]);
  for (double d : diff) mean_sq += d * d;
  return mean_sq / diff.size();
}

// Windowed statistics written out literally.
double ssim_oracle(const Image& a, const Image& b) {
  double g[11], gs = 0;
  for (int i = 0; i < 11; ++i) gs += (g[i] = std::exp(-((i - 5) * (i - 5)) / (2 * 1.5 * 1.5)));
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + 11 <= a.height; ++y)
    for (std::size_t x = 0; x + 11 <= a.width; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double w = g[i] * g[j] / (gs * gs), va = a.at(y + i, x + j, 0), vb = b.at(y + i, x + j, 0);
          ma += w * va, mb += w * vb, saa += w * va * va, sbb += w * vb * vb, sab += w * va * vb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

}  // namespace

TEST_CASE("bicubic_resize") {
  Rng rng(21);
  SUBCASE("scale 1 is the identity") {
    auto img = random_image(7, 9, 3, rng);
    auto out = bicubic_resize(img, 1.0);
    REQUIRE(out.same_shape(img));
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::fabs(out.data[i] - img.data[i]) < 1e-6);
  }
  SUBCASE("constant image stays constant") {
    auto img = Image::zeros(10, 6, 3);
    for (auto& v : img.data) v = 0.37f;
    for (double s : {0.5, 1.0 / 3.0, 2.0, 3.0}) {
      auto out = bicubic_resize(img, s);
      for (float v : out.data) CHECK(v == 0.37f);
    }
  }
  SUBCASE("4x4 ramp halved matches the kernel-sum oracle") {
    auto img = Image::zeros(4, 4, 1);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) img.at(y, x, 0) = (y * 4 + x) / 15.0f;
    auto out = bicubic_resize(img, 2, 2);
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) CHECK(std::fabs(out.at(y, x, 0) - resize_oracle(img, 2, 2, y, x, 0)) < 1e-5);
  }
  SUBCASE("arbitrary extents match the oracle") {
    auto img = random_image(9, 7, 3, rng);
    for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{18, 14}, {3, 5}, {27, 4}}) {
      auto out = bicubic_resize(img, oh, ow);
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            REQUIRE(std::fabs(out.at(y, x, c) - resize_oracle(img, oh, ow, y, x, c)) < 1e-5);
    }
  }
  SUBCASE("weights sum to one") {
    for (auto [in, out] : {std::pair<std::size_t, std::size_t>{32, 16}, {16, 32}, {10, 3}, {5, 15}, {1, 4}}) {
      auto taps = bicubic_taps(in, out);
      REQUIRE(taps.weights.size() == out);
      for (const auto& w : taps.weights) {
        double s = 0;
        for (double v : w) s += v;
        CHECK(std::fabs(s - 1.0) < 1e-6);
      }
    }
  }
  SUBCASE("kernel shape") {
    CHECK(cubic_kernel(0.0) == 1.0);
    CHECK(cubic_kernel(1.0) == 0.0);
    CHECK(cubic_kernel(2.0) == 0.0);
    CHECK(cubic_kernel(0.5) == doctest::Approx(0.5625));
    CHECK(cubic_kernel(-1.5) == doctest::Approx(-0.0625));
  }
  SUBCASE("degenerate extents") {
    auto img = random_image(4, 4, 3, rng);
    CHECK_THROWS_AS(bicubic_resize(img, 0, 4), Error);
    CHECK_THROWS_AS(bicubic_resize(img, 0.1), Error);
    CHECK_THROWS_AS(bicubic_resize(Image::zeros(0, 4, 3), 2, 2), Error);
  }
}

TEST_CASE("psnr") {
  Rng rng(22);
  SUBCASE("uniform error of 16 levels") {
    auto a = Image::zeros(8, 8, 3), b = Image::zeros(8, 8, 3);
    for (auto& v : b.data) v = 16.0f / 255.0f;
    CHECK(psnr(a, b, ChannelMode::kRgb) == doctest::Approx(20 * std::log10(255.0 / 16.0)).epsilon(1e-6));
    CHECK(psnr(a, b, ChannelMode::kRgb) == doctest::Approx(24.0484).epsilon(1e-5));
  }
  SUBCASE("identical images give infinity") {
    auto a = random_image(5, 5, 3, rng);
    CHECK(std::isinf(psnr(a, a)));
    CHECK(psnr_json(psnr(a, a)) == "\"inf\"");
    CHECK(psnr_json(30.25) == "30.250000");
  }
  SUBCASE("two-pass oracle and symmetry") {
    for (int trial = 0; trial < 10; ++trial) {
      auto a = random_image(12, 10, 3, rng), b = random_image(12, 10, 3, rng);
      CHECK(std::fabs(psnr(a, b, ChannelMode::kRgb) - 10 * std::log10(1.0 / mse_two_pass(a, b))) < 1e-6);
      CHECK(std::fabs(psnr(a, b, ChannelMode::kY) - 10 * std::log10(1.0 / mse_two_pass(to_y(a), to_y(b)))) < 1e-6);
      CHECK(psnr(a, b) == psnr(b, a));
      CHECK(psnr(a, b) >= 0.0);
    }
  }
  SUBCASE("luma conversion") {
    auto white = Image::zeros(1, 1, 3);
    for (auto& v : white.data) v = 1.0f;
    CHECK(to_y(white).data[0] == doctest::Approx(235.0 / 255.0).epsilon(1e-6));
    CHECK(to_y(Image::zeros(1, 1, 3)).data[0] == doctest::Approx(16.0 / 255.0).epsilon(1e-6));
    CHECK(to_y(white).channels == 1);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(psnr(Image::zeros(4, 4, 3), Image::zeros(4, 5, 3)), ShapeError);
  }
}

TEST_CASE("ssim") {
  Rng rng(23);
  SUBCASE("identical images") {
    auto a = random_image(16, 20, 3, rng);
    CHECK(std::fabs(ssim(a, a) - 1.0) < 1e-9);
    CHECK(std::fabs(ssim(a, a, ChannelMode::kRgb) - 1.0) < 1e-9);
  }
  SUBCASE("bounded above by one") {
    auto a = random_image(16, 16, 3, rng), neg = a;
    for (auto& v : neg.data) v = 1.0f - v;
    CHECK(ssim(a, neg, ChannelMode::kRgb) <= 1.0);
    CHECK(ssim(a, neg, ChannelMode::kRgb) < 0.0);
    auto b = random_image(16, 16, 3, rng);
    CHECK(ssim(a, b) <= 1.0);
  }
  SUBCASE("16x16 pair matches the formula oracle") {
    auto a = random_image(16, 16, 1, rng), b = a;
    for (auto& v : b.data) v = std::clamp(v + std::normal_distribution<float>(0.0f, 0.1f)(rng), 0.0f, 1.0f);
    CHECK(std::fabs(ssim(a, b) - ssim_oracle(a, b)) < 1e-6);
  }
  SUBCASE("too small") {
    CHECK_THROWS_AS(ssim(Image::zeros(10, 16, 1), Image::zeros(10, 16, 1)), Error);
    auto r = evaluate(Image::zeros(8, 8, 3), Image::zeros(8, 8, 3), ChannelMode::kY);
    CHECK(std::isnan(r.ssim));
    CHECK(std::isinf(r.psnr_db));
  }
}

TEST_CASE("evaluate and crop") {
  Rng rng(24);
  auto a = random_image(20, 20, 3, rng), b = a;
  b.at(0, 0, 0) = 1.0f - a.at(0, 0, 0);
  CHECK(std::isfinite(evaluate(a, b, ChannelMode::kRgb).psnr_db));
  CHECK(std::isinf(evaluate(a, b, ChannelMode::kRgb, 2).psnr_db));
  auto c = crop_border(a, 3);
  CHECK(c.height == 14);
  CHECK(c.at(0, 0, 1) == a.at(3, 3, 1));
  CHECK_THROWS_AS(crop_border(a, 10), Error);
}

TEST_CASE("png and tensor conversion") {
  Rng rng(25);
  const auto dir = std::filesystem::temp_directory_path() / "atd_test_png";
  std::filesystem::create_directories(dir);
  auto img = random_image(5, 7, 3, rng);
  img.data[0] = 1.5f;  // clamped on save
  write_png((dir / "a.png").string(), img);
  auto back = read_png((dir / "a.png").string());
  REQUIRE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const float expect = std::floor(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f + 0.5f) / 255.0f;
    CHECK(back.data[i] == doctest::Approx(expect).epsilon(1e-6));
  }
  auto gray = random_image(4, 4, 1, rng);
  write_png((dir / "g.png").string(), gray);
  CHECK(read_png((dir / "g.png").string()).channels == 1);
  CHECK_THROWS_AS(read_png((dir / "missing.png").string()), Error);

  auto t = image_to_tensor(img);
  CHECK(t.shape() == Shape{5, 7, 3});
  auto round = tensor_to_image(t);
  CHECK(round.data[0] == 1.0f);
  CHECK(round.data[1] == img.data[1]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic patch") {
  Rng r1(3), r2(3);
  auto a = synthetic_patch(32, r1), b = synthetic_patch(32, r2);
  CHECK(a.data == b.data);
  for (float v : a.data) CHECK((v >= 0.0f && v <= 1.0f));
}
