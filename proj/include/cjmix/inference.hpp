#pragma once

#include "cjmix/engine.hpp"

#include <Eigen/Dense>

#include <vector>

namespace cjmix {

// Free coordinates theta = [mu, eta_1, ..., eta_K, phi_2, ..., phi_K] with
// beta_k = free_basis[k] * eta_k and phi_l of length p_x.
struct FreeLayout {
  int clusters = 0;
  int moderator_dim = 0;
  std::vector<int> beta_offset;  // K + 1 entries
  int phi_offset = 0;
  int size = 0;

  int beta_dim(int k) const { return beta_offset[k + 1] - beta_offset[k]; }
  int phi_at(int l, int a) const { return phi_offset + (l - 1) * moderator_dim + a; }  // l >= 1
};

FreeLayout free_layout(const ModelState& s);
Eigen::VectorXd free_parameters(const ModelState& s, const FreeLayout& fl);
void set_free_parameters(ModelState& s, const FreeLayout& fl, const Eigen::VectorXd& theta);

// Groups with norm below the fusion threshold become hard constraints; beta is
// re-projected onto the resulting free subspace. No monotonicity check here.
ModelState bind_and_project(const ModelState& s, const Problem& pr);

// Observed log posterior with sqrt(q + eps) in place of sqrt(q) for unbound groups.
double smoothed_log_posterior(const ModelState& s, const Problem& pr, double eps = 1e-4);
Eigen::VectorXd smoothed_score(const ModelState& s, const Problem& pr, double eps = 1e-4);

// E[-H^c] - Var[S^c] plus the prior curvature, over free coordinates. Equals the
// negative Hessian of the smoothed log posterior.
Eigen::MatrixXd louis_information(const ModelState& s, const Problem& pr, double eps = 1e-4, int threads = 1);

struct CovarianceBundle {
  ModelState state;  // after bind_and_project; the free coordinates refer to it
  Eigen::MatrixXd information;
  Eigen::MatrixXd covariance;
  FreeLayout layout;
  double epsilon = 1e-4;
  bool pseudo_inverse = false;
  int null_directions = 0;
  double condition = 0.0;
  // Per cluster: raw coefficients = lifting[k] * eta_k. Rows below 1e-10 are
  // exact zeros and rows within 1e-10 of each other are exact copies.
  std::vector<Eigen::MatrixXd> lifting;
};

CovarianceBundle covariance_bundle(const ModelState& s, const Problem& pr, double eps = 1e-4, int threads = 1);

// sqrt(g' Sigma g), with g over the free coordinates.
double delta_method(const CovarianceBundle& cb, const Eigen::VectorXd& gradient);

std::vector<Eigen::MatrixXd> snapped_lifting(const ModelState& s, const Problem& pr);

}  // namespace cjmix
