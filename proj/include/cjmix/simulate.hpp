#pragma once

#include "cjmix/design.hpp"
#include "cjmix/engine.hpp"
#include "cjmix/estimands.hpp"
#include "cjmix/selection.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cjmix {

// Synthetic forced-choice experiment with main-effect-only truth.
struct SimDesign {
  int factors = 5;
  std::vector<int> levels{3, 3, 3, 3, 3};
  int clusters = 3;
  int respondents = 500;
  int tasks = 5;
  int moderator_count = 5;  // correlated normals; the intercept is added on top
  double moderator_rho = 0.25;
  // Seed 17 draws well-separated memberships: sorted mean probabilities about
  // (0.23, 0.28, 0.49), median largest membership probability about 0.90.
  std::uint64_t coef_seed = 17;
  std::uint64_t data_seed = 2;
  long long truth_mc_draws = 1'000'000;
  double mu = 0.0;

  // Filled by draw_true_coefficients / true_amces.
  std::vector<std::vector<std::vector<double>>> beta_true;  // [k][j][l]
  Eigen::MatrixXd phi_true;                                 // (1 + moderator_count) x K, column 0 zero
  struct Truth {
    int cluster = 0, factor = 0, level = 0;  // level vs level 0
    double value = 0.0;
    double mc_se = 0.0;
  };
  std::vector<Truth> amce_true;

  void validate() const;
};

// Per factor and cluster: u' unique values from N(0, 1/3); u' = 1 gives zeros,
// u' = 2 copies one of the two values into the third slot, then de-mean.
// phi_k ~ N(0, 2 I) for k >= 2.
void draw_true_coefficients(SimDesign& sd);

// Conjoint AMCEs of the truth against level 0, by Monte Carlo over profile pairs.
void true_amces(SimDesign& sd, int threads = 1);

struct SimData {
  Dataset data;
  std::vector<int> membership;
};

// Replicate r draws from its own stream seeded by (data_seed, r).
SimData generate_dataset(const SimDesign& sd, int replicate);

// perm[k] is the estimated label that plays true cluster k. Minimizes the
// absolute error between responsibilities and one-hot truth over all K!
// permutations; ties go to the lexicographically first.
std::vector<int> resolve_labels(const Eigen::MatrixXd& responsibilities, std::span<const int> membership);
double label_error(const Eigen::MatrixXd& responsibilities, std::span<const int> membership,
                   std::span<const int> perm);

struct ReplicateEstimates {
  std::vector<double> estimate;  // aligned with SimDesign::amce_true
  std::vector<double> se;
};

struct QuantityRecovery {
  double truth = 0.0;
  double mean_estimate = 0.0;
  double sd_estimate = 0.0;
  double mean_se = 0.0;
  double coverage95 = 0.0, coverage90 = 0.0;
  double post_coverage95 = 0.0, post_coverage90 = 0.0;  // among replicates with a non-zero estimate
  int nonzero = 0;
};

struct RecoveryReport {
  std::vector<double> replicate_correlation;
  double median_correlation = 0.0;
  double pooled_correlation = 0.0;
  std::vector<QuantityRecovery> quantities;
};

double correlation(std::span<const double> a, std::span<const double> b);

// Needs at least two replicates.
RecoveryReport score_recovery(std::span<const ReplicateEstimates> replicates, std::span<const double> truth);

struct ReplicateOptions {
  double lambda = 0.0;  // <= 0 selects lambda by BIC
  TuneOptions tune;
  double gamma = 1.0;
  double sigma2_phi = 0.25;
  ModelSpec model;
  FitOptions fit;
};

struct ReplicateResult {
  SimData sim;
  FitResult fit;
  std::optional<TuneResult> tuning;
  std::vector<int> permutation;
  ReplicateEstimates estimates;
};

// Generate, fit with K = sd.clusters, align labels and estimate the true AMCEs.
ReplicateResult run_replicate(const SimDesign& sd, int replicate, const ReplicateOptions& opts);

}  // namespace cjmix
