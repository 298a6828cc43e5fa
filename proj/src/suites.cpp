#include "atd/suites.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "atd/ops.hpp"
#include "atd/sparse.hpp"

namespace atd {

void randomize_parameters(const std::vector<NamedTensor>& params, Rng& rng) {
  for (const auto& p : params) {
    if (p.name.ends_with(".tau")) continue;
    Tensor t = p.tensor;
    const bool norm = p.name.find("norm") != std::string::npos;
    const std::size_t fan_in = t.rank() > 1 ? t.numel() / t.dim(t.rank() - 1) : 1;
    const float sd = t.rank() > 1 ? 1.0f / std::sqrt(static_cast<float>(fan_in)) : 0.1f;
    for (auto& v : t.mutable_data()) {
      if (norm) v += std::normal_distribution<float>(0.0f, 0.1f)(rng);
      else v = std::normal_distribution<float>(0.0f, sd)(rng);
    }
  }
}

double GradientSuiteReport::worst() const {
  const auto* w = worst_entry();
  return w ? w->result.rel_error : 0.0;
}

const SuiteEntry* GradientSuiteReport::worst_entry() const {
  const SuiteEntry* w = nullptr;
  for (const auto& e : entries)
    if (!w || e.result.rel_error > w->result.rel_error) w = &e;
  return w;
}

bool GradientSuiteReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const SuiteEntry& e) { return e.result.passed; }) &&
         shift_invariant_max < 1e-5;
}

namespace {

using Fn = std::function<Tensor()>;

std::function<Tensor()> projected(Fn fn, Rng& rng) {
  Tensor probe = [&] {
    NoGradGuard guard;
    return fn();
  }();
  Tensor weights = Tensor::uniform(probe.shape(), -1.0f, 1.0f, rng);
  return [fn = std::move(fn), weights] { return sum(mul(fn(), weights)); };
}

bool shift_invariant(const std::string& name) {
  return name.ends_with("key.bias") && name.find("tdca") == std::string::npos;
}

struct Runner {
  GradientSuiteReport& report;
  Rng& rng;
  GradCheckOptions options;

  void check(const std::string& op, Fn fn, const std::vector<NamedTensor>& inputs) {
    auto loss = projected(std::move(fn), rng);
    std::vector<NamedTensor> fd, zero;
    for (const auto& p : inputs) (shift_invariant(p.name) ? zero : fd).push_back(p);
    for (auto& r : check_gradients(loss, fd, options)) report.entries.push_back({op, std::move(r)});
    if (zero.empty()) return;
    for (const auto& p : inputs) Tensor(p.tensor).zero_grad();
    loss().backward();
    for (const auto& p : zero) {
      report.shift_invariant.push_back(op + ":" + p.name);
      if (!p.tensor.has_grad()) continue;
      for (float g : p.tensor.grad())
        report.shift_invariant_max = std::max<double>(report.shift_invariant_max, std::fabs(g));
    }
  }
};

Tensor rnd(Shape s, Rng& rng, float sd = 1.0f) { return Tensor::randn(std::move(s), sd, rng, true); }

void op_checks(Runner& run, Rng& rng) {
  {
    auto x = rnd({5, 4}, rng), w = rnd({4, 3}, rng), b = rnd({3}, rng);
    run.check("linear", [=] { return linear(x, w, b); }, {{"x", x}, {"weight", w}, {"bias", b}});
  }
  {
    auto a = rnd({3, 4}, rng), b = rnd({4, 5}, rng);
    run.check("matmul", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}});
  }
  {
    auto x = rnd({4, 3}, rng), s = rnd({1}, rng);
    run.check("mul_scalar", [=] { return mul_scalar(x, s); }, {{"x", x}, {"s", s}});
  }
  {
    auto x = rnd({6, 5}, rng);
    run.check("gelu", [=] { return gelu(x); }, {{"x", x}});
    run.check("softmax_rows", [=] { return softmax_rows(x); }, {{"x", x}});
    run.check("l2_normalize_rows", [=] { return l2_normalize_rows(x, 1e-8f); }, {{"x", x}});
  }
  {
    auto x = rnd({4, 6}, rng), g = rnd({6}, rng), b = rnd({6}, rng);
    run.check("layer_norm", [=] { return layer_norm(x, g, b); }, {{"x", x}, {"gamma", g}, {"beta", b}});
  }
  {
    auto q = rnd({5, 3}, rng), k = rnd({4, 3}, rng);
    run.check("cosine_similarity", [=] { return cosine_similarity(q, k); }, {{"q", q}, {"k", k}});
  }
  {
    auto x = rnd({5, 6, 2}, rng), w = rnd({3, 3, 2, 3}, rng, 0.3f), b = rnd({3}, rng);
    run.check("conv2d", [=] { return conv2d(x, w, b); }, {{"x", x}, {"weight", w}, {"bias", b}});
  }
  {
    auto x = rnd({5, 4, 3}, rng), w = rnd({3, 3, 3}, rng, 0.3f), b = rnd({3}, rng);
    run.check("dwconv2d", [=] { return dwconv2d(x, w, b); }, {{"x", x}, {"weight", w}, {"bias", b}});
  }
  {
    auto x = rnd({3, 2, 8}, rng);
    run.check("pixel_shuffle", [=] { return pixel_shuffle(x, 2); }, {{"x", x}});
    run.check("reflect_pad", [=] { return reflect_pad(x, 2, 1); }, {{"x", x}});
    run.check("crop", [=] { return crop(x, 2, 1); }, {{"x", x}});
  }
  {
    auto x = rnd({5, 3}, rng), y = rnd({5, 2}, rng);
    const std::vector<std::size_t> idx{4, 0, 0, 2};
    run.check("gather_rows", [=] { return gather_rows(x, idx); }, {{"x", x}});
    run.check("concat_last", [=] { return concat_last(x, y); }, {{"a", x}, {"b", y}});
  }
  {
    auto a = rnd({4, 3}, rng);
    // Offsets keep every difference clear of the kink at zero.
    std::vector<float> off(12);
    for (std::size_t i = 0; i < 12; ++i) off[i] = (i % 2 ? 1.0f : -1.0f) * (0.1f + 0.05f * static_cast<float>(i));
    auto b = add(Tensor::from({4, 3}, a.to_vector()), Tensor::from({4, 3}, off));
    run.check("l1_loss", [=] { return l1_loss(a, b); }, {{"a", a}});
    run.check("charbonnier_loss", [=] { return charbonnier_loss(a, b); }, {{"a", a}});
  }
  {
    auto q = rnd({8, 4}, rng), k = rnd({8, 4}, rng), v = rnd({8, 4}, rng), bias = rnd({2, 4, 4}, rng);
    const std::vector<Range> groups{{0, 4}, {4, 8}};
    std::vector<float> mask(32, 0.0f);
    mask[16 + 1] = mask[16 + 4] = -INFINITY;  // second group: tokens 0 and 1 blocked from each other
    run.check("grouped_attention",
              [=] {
                AttentionOptions o{2, bias, mask};
                return grouped_attention(q, k, v, groups, o);
              },
              {{"q", q}, {"k", k}, {"v", v}, {"bias", bias}});
  }
  {
    auto dict = TokenDictionary::create(6, 4, 3, rng);
    auto x = rnd({5, 4}, rng);
    std::vector<NamedTensor> ps{{"x", x}, {"entries", dict.entries}};
    dict.collect_projections(ps, "tdca");
    randomize_parameters(ps, rng);
    run.check("effective_scale", [=] { return effective_scale(dict); }, {{"tau", dict.tau}});
    run.check("tdca", [=] { return tdca(x, dict).enhanced; }, ps);
  }
  {
    auto p = AcmsaParams::create(4, 2, rng);
    auto x = rnd({9, 4}, rng);
    std::vector<NamedTensor> ps{{"x", x}};
    p.collect(ps, "acmsa");
    randomize_parameters(ps, rng);
    auto a = make_assignment({2, 0, 1, 2, 0, 0, 1, 2, 2}, 4);
    run.check("acmsa", [=] { return acmsa(x, a, p); }, ps);
  }
  {
    auto table = rnd({9, 2}, rng);
    run.check("relative_bias", [=] { return relative_bias(table, 2, 2); }, {{"table", table}});
    auto p = WindowParams::create(4, 2, 1, 2, rng);
    auto x = rnd({4, 4, 4}, rng);
    std::vector<NamedTensor> ps{{"x", x}};
    p.collect(ps, "window");
    randomize_parameters(ps, rng);
    run.check("swmsa", [=] { return swmsa(x, p); }, ps);
  }
  {
    auto p = CffnParams::create(4, true, rng);
    auto x = rnd({3, 4, 4}, rng), delta = rnd({3, 4, 4}, rng);
    std::vector<NamedTensor> ps{{"x", x}, {"delta", delta}};
    p.collect(ps, "ffn");
    randomize_parameters(ps, rng);
    run.check("cffn", [=] { return cffn(x, delta, p); }, ps);
    auto entries = rnd({5, 4}, rng);
    const std::vector<int> idx{4, 1, 1, 0};
    run.check("select_embedding", [=] { return select_embedding(entries, idx); }, {{"entries", entries}});
  }
}

}  // namespace

GradientSuiteReport run_gradient_suite(const ModelConfig& model_config, std::uint64_t seed, double tolerance,
                                       bool include_ops) {
  Rng rng(seed);
  GradientSuiteReport report;
  report.tolerance = tolerance;
  Runner run{report, rng, {}};
  run.options.tolerance = tolerance;
  run.options.seed = seed;
  if (include_ops) op_checks(run, rng);

  auto model = AtdModel::create(model_config, seed);
  const auto params = model.parameters();
  randomize_parameters(params, rng);
  const std::size_t side = model_config.window;
  auto img = Tensor::uniform({side, side, 3}, 0.0f, 1.0f, rng);
  auto trace = std::make_shared<ForwardTrace>();
  {
    NoGradGuard guard;
    forward_sr(img, model, trace.get());
  }
  trace->replay = true;
  // The composed network is smooth with routing fixed; at smaller steps float32
  // rounding through the deep stack dominates the difference quotient.
  run.options.step = 3e-2f;
  run.options.max_coords = 16;
  run.check("model", [model, img, trace] { return forward_sr(img, model, trace.get()); }, params);
  return report;
}

OracleSuiteReport run_oracle_suite(std::size_t problems, std::size_t iterations, std::uint64_t seed) {
  Rng rng(seed);
  OracleSuiteReport r;
  r.problems = problems;
  r.iterations = iterations;
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t d = 8;

  auto orthonormal = [&] {
    std::vector<std::vector<double>> cols;
    while (cols.size() < d) {
      std::vector<double> v(d);
      for (auto& e : v) e = gauss(rng);
      for (const auto& c : cols) {
        double dot = 0;
        for (std::size_t i = 0; i < d; ++i) dot += v[i] * c[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= dot * c[i];
      }
      double n = 0;
      for (double e : v) n += e * e;
      for (auto& e : v) e /= std::sqrt(n);
      cols.push_back(std::move(v));
    }
    std::vector<double> m(d * d);
    for (std::size_t row = 0; row < d; ++row)
      for (std::size_t c = 0; c < d; ++c) m[row * d + c] = cols[c][row];
    return m;
  };

  {
    auto q = orthonormal();
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = 2.0 * q[i * d];
    auto p = SparseCodingProblem::create(q, q, d, d, y, 0.5);
    auto a = lasso_solve(p, iterations);
    r.fixture_alpha = a[0];
    double rest = 0;
    for (std::size_t k = 1; k < d; ++k) rest = std::max(rest, std::fabs(a[k]));
    r.closed_form_max_err = std::max(std::fabs(a[0] - 1.75), rest);
  }
  for (std::size_t t = 0; t < problems; ++t) {
    auto q = orthonormal();
    std::vector<double> y(d);
    for (auto& e : y) e = gauss(rng);
    const double lambda = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    auto p = SparseCodingProblem::create(q, q, d, d, y, lambda);
    auto a = lasso_solve(p, iterations);
    for (std::size_t k = 0; k < d; ++k) {
      double corr = 0;
      for (std::size_t i = 0; i < d; ++i) corr += q[i * d + k] * y[i];
      r.closed_form_max_err = std::max(r.closed_form_max_err, std::fabs(a[k] - soft_threshold(corr, lambda / 2)));
    }
  }
  if (r.closed_form_max_err > 1e-6)
    r.failures.push_back("closed-form mismatch " + std::to_string(r.closed_form_max_err));

  for (std::size_t t = 0; t < problems; ++t) {
    const std::size_t atoms = 2 * d;
    std::vector<double> low(d * atoms), y(d);
    for (auto& e : low) e = gauss(rng);
    for (auto& e : y) e = gauss(rng);
    auto p = SparseCodingProblem::create(low, low, d, atoms, y, std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    std::vector<double> history;
    try {
      lasso_solve(p, iterations, 0.0, &history);
    } catch (const Error& e) {
      r.failures.push_back("problem " + std::to_string(t) + ": " + e.what());
    }
    for (std::size_t i = 1; i < history.size(); ++i)
      r.worst_increase = std::max(r.worst_increase, history[i] - history[i - 1]);
  }
  return r;
}

BenchRow bench_attention(std::size_t side, const ModelConfig& config, std::size_t repeats, std::uint64_t seed,
                         bool time_global) {
  Rng rng(seed);
  BenchRow row;
  row.side = side;
  row.tokens = side * side;
  const std::size_t n = row.tokens, d = config.channels;
  row.acmsa = attention_flops(n, config.group_size, d, config.heads);
  row.global = global_attention_flops(n, d, config.heads);
  auto params = AcmsaParams::create(d, config.heads, rng);
  auto x = Tensor::randn({n, d}, 1.0f, rng);
  std::vector<int> idx(n);
  for (auto& i : idx) i = static_cast<int>(rng() % config.dict_size);
  NoGradGuard guard;
  auto best_ms = [&](std::size_t group) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      auto y = acmsa(x, make_assignment(idx, group), params);
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
  };
  row.acmsa_ms = best_ms(config.group_size);
  row.global_ms = time_global ? best_ms(n) : std::numeric_limits<double>::quiet_NaN();
  return row;
}

}  // namespace atd
