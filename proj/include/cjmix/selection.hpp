#pragma once

#include "cjmix/engine.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cjmix {

// tr[(H + R)^{-1} H]; exact below the dense limit, otherwise Hutchinson with
// Rademacher probes. A non-empty `basis` (orthonormal columns) restricts the
// probes to a subspace outside of which H vanishes.
double hat_trace_dense(const Eigen::MatrixXd& data, const Eigen::MatrixXd& ridge);
double hat_trace_stochastic(const Eigen::MatrixXd& data, const Eigen::MatrixXd& ridge, int probes = 64,
                            std::uint64_t seed = 0x5eed, const Eigen::MatrixXd& basis = Eigen::MatrixXd());

struct DfOptions {
  int dense_limit = 2000;
  int probes = 64;
  std::uint64_t seed = 0x5eed;
  int threads = 1;
};

// Effective number of parameters of a fitted state: near-zero groups are bound
// first, then tr of the hat matrix over [mu, eta] plus p_x (K - 1).
double degrees_of_freedom(const ModelState& s, const Problem& pr, const DfOptions& opts = {});

// -2 loglik + df ln(n_rows)
double bic(double log_likelihood, double df, int n_rows);

struct TuneEvaluation {
  double lambda = 0.0;
  double df = 0.0;
  double bic = 0.0;
  double log_likelihood = 0.0;
  bool converged = false;
};

struct TuneResult {
  std::vector<TuneEvaluation> evaluations;
  double best_lambda = 0.0;
  int best_index = -1;
  bool boundary = false;  // the minimizer sits at an end of the search interval
  std::vector<std::string> trace;
  std::optional<FitResult> best_fit;
};

struct TuneOptions {
  double lambda_lo = 1e-2;
  double lambda_hi = 1e2;
  int budget = 15;
  int grid_points = 5;
};

// Grid then golden-section search in log(lambda) for any objective.
// `objective` returns the evaluation for one lambda; only converged
// evaluations compete for the minimum unless none converged.
TuneResult search_lambda(const std::function<TuneEvaluation(double)>& objective, const TuneOptions& opts);

TuneResult tune_lambda(const Problem& pr, int K, double gamma, double sigma2_phi, const FitOptions& fit_opts,
                       const TuneOptions& opts = {});

}  // namespace cjmix
