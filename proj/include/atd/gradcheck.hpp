#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "atd/tensor.hpp"

namespace atd {

struct GradCheckOptions {
  float step = 1e-3f;
  double tolerance = 1e-2;
  /// Coordinates probed per tensor; larger tensors are subsampled.
  std::size_t max_coords = 48;
  std::uint64_t seed = 0;
  /// Denominator floor so all-zero gradients compare as equal.
  double abs_floor = 1e-6;
};

struct GradCheckResult {
  std::string name;
  /// ||analytic - numeric|| / max(||analytic||, ||numeric||, floors) over probed coordinates.
  double rel_error = 0.0;
  /// Gradient norm that float32 central differences cannot resolve at this loss scale.
  double noise_floor = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Compares the reverse-mode gradient of `loss` w.r.t. `param` against
/// central finite differences. `loss` must rebuild the graph on every call
/// and be deterministic.
GradCheckResult check_gradient(const std::function<Tensor()>& loss, Tensor param, const std::string& name,
                               const GradCheckOptions& options = {});

std::vector<GradCheckResult> check_gradients(const std::function<Tensor()>& loss,
                                             const std::vector<NamedTensor>& params,
                                             const GradCheckOptions& options = {});

}  // namespace atd
