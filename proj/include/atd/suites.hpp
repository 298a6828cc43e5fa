#pragma once

// Self-checks shared by the CLI and the acceptance runner.

#include <string>
#include <vector>

#include "atd/categorize.hpp"
#include "atd/gradcheck.hpp"
#include "atd/model.hpp"

namespace atd {

/// Redraws every parameter at unit gain (N(0, 1/fan_in) weights, small
/// biases, norm scales near 1); temperatures are left alone.
void randomize_parameters(const std::vector<NamedTensor>& params, Rng& rng);

struct SuiteEntry {
  std::string op;  // "model" for the end-to-end check
  GradCheckResult result;
};

struct GradientSuiteReport {
  std::vector<SuiteEntry> entries;
  /// Dot-product key biases; softmax cancels them, so they are checked for a
  /// zero analytic gradient instead of by finite differences.
  std::vector<std::string> shift_invariant;
  double shift_invariant_max = 0.0;
  double tolerance = 0.0;

  double worst() const;
  const SuiteEntry* worst_entry() const;
  bool passed() const;
};

/// Finite-difference checks of every parameterized op, then of the whole
/// network for `model_config` on one window-sized input with routing replayed.
GradientSuiteReport run_gradient_suite(const ModelConfig& model_config, std::uint64_t seed,
                                       double tolerance = 2e-2, bool include_ops = true);

struct OracleSuiteReport {
  double fixture_alpha = 0.0;        // closed form 1.75
  double closed_form_max_err = 0.0;  // orthonormal problems vs soft threshold
  double worst_increase = 0.0;       // largest per-iteration objective rise
  std::size_t problems = 0;
  std::size_t iterations = 0;
  std::vector<std::string> failures;

  bool passed() const { return failures.empty(); }
};

OracleSuiteReport run_oracle_suite(std::size_t problems, std::size_t iterations, std::uint64_t seed);

struct BenchRow {
  std::size_t side = 0;
  std::size_t tokens = 0;
  AttentionFlops acmsa;
  AttentionFlops global;
  double acmsa_ms = 0.0;   // best of the repeats
  double global_ms = 0.0;  // NaN when not timed
};

/// AC-MSA on side x side random tokens with random categories over the
/// configured dictionary size, timed end to end (routing included).
BenchRow bench_attention(std::size_t side, const ModelConfig& config, std::size_t repeats, std::uint64_t seed,
                         bool time_global);

}  // namespace atd
