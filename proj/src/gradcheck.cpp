#include "atd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace atd {

namespace {

std::vector<std::size_t> probe_indices(std::size_t n, const GradCheckOptions& opt, const std::string& name) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n <= opt.max_coords) return idx;
  Rng rng(opt.seed ^ std::hash<std::string>{}(name));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opt.max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<float> analytic_gradient(const std::function<Tensor()>& loss, Tensor& param) {
  param.zero_grad();
  Tensor l = loss();
  l.backward();
  auto g = param.grad();
  return {g.begin(), g.end()};
}

}  // namespace

GradCheckResult check_gradient(const std::function<Tensor()>& loss, Tensor param, const std::string& name,
                               const GradCheckOptions& options) {
  if (!param.requires_grad()) throw Error("check_gradient: '" + name + "' does not require grad");
  GradCheckResult result;
  result.name = name;
  const std::vector<float> analytic = analytic_gradient(loss, param);
  const auto probes = probe_indices(param.numel(), options, name);
  double base = 0.0;
  {
    NoGradGuard guard;
    base = loss().item();
  }
  // Differences below a few float32 ulps of the loss are unresolvable.
  result.noise_floor = 10.0 * std::numeric_limits<float>::epsilon() * std::max(std::fabs(base), 1.0) /
                       options.step * std::sqrt(static_cast<double>(probes.size()));
  double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
  auto values = param.mutable_data();
  for (std::size_t i : probes) {
    const float saved = values[i];
    double plus = 0.0, minus = 0.0;
    {
      NoGradGuard guard;
      values[i] = saved + options.step;
      plus = loss().item();
      values[i] = saved - options.step;
      minus = loss().item();
      values[i] = saved;
    }
    // Use the perturbation actually representable in float32.
    const double span = static_cast<double>(saved + options.step) - static_cast<double>(saved - options.step);
    const double numeric = (plus - minus) / span;
    const double a = analytic[i];
    diff_sq += (a - numeric) * (a - numeric);
    a_sq += a * a;
    n_sq += numeric * numeric;
  }
  const double denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), options.abs_floor, result.noise_floor});
  result.rel_error = std::sqrt(diff_sq) / denom;
  result.checked = probes.size();
  result.passed = result.rel_error < options.tolerance;
  return result;
}

std::vector<GradCheckResult> check_gradients(const std::function<Tensor()>& loss,
                                             const std::vector<NamedTensor>& params,
                                             const GradCheckOptions& options) {
  std::vector<GradCheckResult> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(check_gradient(loss, p.tensor, p.name, options));
  return out;
}

}  // namespace atd
