#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "atd/dictionary.hpp"

namespace atd {

/// Coupled-dictionary sparse coding in double precision. Matrices are
/// row-major [dim x atoms]; columns are atoms.
struct SparseCodingProblem {
  std::size_t dim = 0;
  std::size_t atoms = 0;
  std::vector<double> low;   // unit-norm columns
  std::vector<double> high;
  std::vector<double> signal;
  double lambda = 0.0;
  std::vector<double> alpha;  // filled by lasso_solve

  /// Normalizes the columns of `low`; throws on a zero column or negative lambda.
  static SparseCodingProblem create(std::vector<double> low, std::vector<double> high, std::size_t dim,
                                    std::size_t atoms, std::vector<double> signal, double lambda);
};

double soft_threshold(double v, double t);
std::vector<double> soft_threshold(std::span<const double> v, double t);

/// Largest eigenvalue of low^T low by power iteration.
double gram_spectral_norm(const SparseCodingProblem& p, std::size_t iters = 200);

/// ||low alpha - y||^2 + lambda ||alpha||_1
double lasso_objective(const SparseCodingProblem& p, std::span<const double> alpha);

/// ISTA from alpha = 0. A non-positive step selects 1 / L. Throws when the
/// objective rises, naming the iteration. Stores and returns alpha; `history`
/// receives the objective before the first and after every iteration.
std::vector<double> lasso_solve(SparseCodingProblem& p, std::size_t iters, double step = 0.0,
                                std::vector<double>* history = nullptr);

/// high * alpha
std::vector<double> reconstruct_hq(const SparseCodingProblem& p);

struct AnalogyOptions {
  double lambda = 0.1;
  std::size_t atoms_per_signal = 3;
  std::size_t iters = 500;
  std::uint64_t seed = 0;
};

struct AnalogyRow {
  std::size_t signal_id = 0;
  std::size_t lasso_nnz = 0;
  std::size_t tdca_effective_nnz = 0;  // attention weights above 1/M
  double lasso_err = 0.0;              // relative residual
  double tdca_err = 0.0;               // relative residual after the best scalar gain
};

/// Each signal is a positive mix of a few unit-normalized dictionary entries.
/// The lasso codes it over those entries; TDCA attends from it as a single token
/// and reconstructs from the same entries with its attention row.
std::vector<AnalogyRow> analogy_report(std::size_t n_signals, const TokenDictionary& dict,
                                       const AnalogyOptions& options = {});
/// signal_id,lasso_nnz,tdca_effective_nnz,lasso_err,tdca_err
void write_analogy_csv(std::ostream& os, const std::vector<AnalogyRow>& rows);

}  // namespace atd
