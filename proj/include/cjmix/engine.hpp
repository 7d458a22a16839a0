#pragma once

#include "cjmix/problem.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cjmix {

struct ModelState {
  double mu = 0.0;
  Eigen::MatrixXd beta;  // d x K, reduced coordinates
  Eigen::MatrixXd phi;   // p_x x K, column 0 is the baseline and stays zero
  double gamma = 1.0;
  double lambda = 1.0;
  double sigma2_phi = 0.25;

  Eigen::MatrixXd responsibilities;  // respondents x K
  Eigen::MatrixXd pg_weights;        // tasks x K
  Eigen::MatrixXd inv_tau2;          // G x K, zero for bound groups

  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> bound;  // G x K
  std::vector<Eigen::MatrixXd> free_basis;  // per cluster, d x d_k orthonormal

  int clusters() const { return static_cast<int>(beta.cols()); }
};

struct FitOptions {
  double tol_objective = 1e-8;
  double tol_param = 1e-6;
  int max_iterations = 2000;
  int phi_steps = 25;
  bool squarem = true;
  double cg_tolerance = 1e-8;
  int threads = 1;
  std::uint64_t seed = 0;
  bool allow_improper = false;
};

struct FitDiagnostics {
  std::vector<double> log_posterior_trail;  // one entry per accepted iteration, plus the start
  int iterations = 0;       // accepted iterations
  int em_evaluations = 0;   // applications of the two-cycle update
  std::string converged_by = "max_iterations";
  int squarem_steps_rejected = 0;
  std::vector<int> degenerate_clusters;
};

struct FusionReport {
  struct Event {
    int group = 0;
    int cluster = 0;
    int iteration = 0;
  };
  std::vector<Event> events;
  std::vector<int> induced_constraints;  // per cluster: d - d_k
};

struct FitResult {
  ModelState state;
  FitDiagnostics diagnostics;
  FusionReport fusion;
  double log_posterior = 0.0;
  double log_likelihood = 0.0;
  bool converged = false;
};

// ---- building blocks (exposed for tests and for the inference module) ----

double log1pexp(double x);
double sigmoid(double x);
// E(omega | psi) for omega ~ PG(1, psi); equals 1/4 at psi = 0.
double pg_mean(double psi);

ModelState make_state(const Problem& pr, int K, double lambda, double gamma, double sigma2_phi);
void set_free_bases(ModelState& s, const Problem& pr);

Eigen::MatrixXd linear_predictors(const ModelState& s, const Problem& pr);       // tasks x K
Eigen::MatrixXd log_cluster_probs(const Eigen::MatrixXd& phi, const Eigen::MatrixXd& moderators);
Eigen::VectorXd mean_cluster_probs(const Eigen::MatrixXd& log_pi, const Problem& pr);
Eigen::MatrixXd cluster_loglik(const Eigen::MatrixXd& psi, const Problem& pr);   // respondents x K
Eigen::VectorXd penalty_per_cluster(const ModelState& s, const Problem& pr);

double log_likelihood(const ModelState& s, const Problem& pr);
double observed_log_posterior(const ModelState& s, const Problem& pr);

Eigen::MatrixXd estep_responsibilities(const ModelState& s, const Problem& pr);
Eigen::MatrixXd estep_pg(const ModelState& s, const Problem& pr);
// Expected inverse scales for unbound groups. Groups whose norm is below the
// fusion threshold get 0 and are listed in `candidates` as (g, k).
Eigen::MatrixXd estep_tau(const ModelState& s, const Problem& pr,
                          std::vector<std::pair<int, int>>* candidates = nullptr);

// Q_beta at (mu, beta) using the caches stored in `at` (responsibilities,
// pg_weights, inv_tau2), constants dropped.
double q_beta(const ModelState& at, double mu, const Eigen::MatrixXd& beta, const Problem& pr);
// Normal equations of the (mu, beta) update over free coordinates
// [mu, eta_1, ..., eta_K], with beta_k = free_basis[k] * eta_k.
struct RidgeSystem {
  Eigen::MatrixXd data;   // weighted Gram matrix of the design
  Eigen::MatrixXd ridge;  // expected penalty precision
  Eigen::VectorXd rhs;
  std::vector<int> offset;  // eta_k starts at offset[k]; offset[K] is the total size
};
RidgeSystem ridge_system(const ModelState& s, const Problem& pr, int threads = 1);

// One generalized M-step for (mu, beta) from the stored caches.
void mstep_beta(ModelState& s, const Problem& pr, const FitOptions& opts);

double q_phi(const ModelState& s, const Eigen::MatrixXd& phi, const Problem& pr);
Eigen::MatrixXd q_phi_gradient(const ModelState& s, const Eigen::MatrixXd& phi, const Problem& pr);
// Improves Q_phi with up to opts.phi_steps Newton-type steps; s.responsibilities must be current.
void mstep_phi(ModelState& s, const Problem& pr, const FitOptions& opts);

// Binds near-zero groups when doing so does not lower the log posterior.
// Returns the accepted (g, k) pairs.
std::vector<std::pair<int, int>> try_bind(ModelState& s, const Problem& pr,
                                          const std::vector<std::pair<int, int>>& candidates);

// Both AECM cycles. Returns the groups bound during the update.
std::vector<std::pair<int, int>> aecm_update(ModelState& s, const Problem& pr, const FitOptions& opts);

ModelState initialize(const Problem& pr, int K, std::uint64_t seed, double lambda, double gamma,
                      double sigma2_phi, int threads = 1);

// Hard memberships from spectral clustering of the moderators (exposed for tests).
std::vector<int> spectral_clusters(const Eigen::MatrixXd& moderators, int K, std::uint64_t seed);

FitResult fit(const Problem& pr, int K, double lambda, double gamma, double sigma2_phi,
              const FitOptions& opts, const ModelState* warm_start = nullptr);

}  // namespace cjmix
