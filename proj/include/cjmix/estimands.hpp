#pragma once

#include "cjmix/design.hpp"
#include "cjmix/inference.hpp"

#include <Eigen/Dense>

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cjmix {

enum class Marginalization { empirical, uniform };
const char* to_string(Marginalization m);

enum class Side { left, right };

// Levels of `partner` excluded together with some level of `factor`.
std::vector<int> excluded_partner_levels(std::span<const FactorSpec> specs, int factor, int partner);

// Rows whose profile avoids every partner level excluded for any level of the
// studied factors. Partners that are themselves studied are not filtered on.
// Throws InputError when nothing survives.
std::vector<int> apply_restrictions(std::span<const Profile> profiles, std::span<const FactorSpec> specs,
                                    std::span<const int> studied);
std::string restriction_description(std::span<const FactorSpec> specs, std::span<const int> studied);
// A profile that randomization could have produced.
bool admissible(const Profile& p, std::span<const FactorSpec> specs);

struct Estimate {
  double value = 0.0;
  double se = 0.0;
  int support = 0;     // rows or enumerated combinations averaged over
  std::string filter;  // "none" or the dropped partner levels
  Eigen::VectorXd gradient;  // over the free coordinates of the bundle
};

struct EffectRow {
  std::string quantity;  // amce | amie | marginal_mean | moderator
  int cluster = 0;
  std::string factor;
  std::string contrast;
  double estimate = 0.0;
  double se = 0.0;
  Marginalization mode = Marginalization::empirical;
  std::string filter;
};

struct EffectTable {
  std::vector<EffectRow> rows;
  std::vector<std::string> warnings;
};

struct InteractionRequest {
  int factor_a = 0, factor_b = 1;
  int level_a = 1, base_a = 0;
  int level_b = 1, base_b = 0;
};

struct EffectRequest {
  Marginalization mode = Marginalization::empirical;
  std::vector<int> baselines;  // per factor; empty means level 0 everywhere
  std::vector<InteractionRequest> interactions;
  bool marginal_means = true;  // forced choice only
  bool moderators = true;
};

struct ModeratorSummary {
  std::string name;
  double mean = 0.0;
  double q25 = 0.0, median = 0.0, q75 = 0.0;
};

struct ClusterProfile {
  int cluster = 0;
  double pi_bar = 0.0;               // task-weighted mean prior membership
  double mean_responsibility = 0.0;  // mean posterior membership
  std::vector<ModeratorSummary> moderators;
};

// Inverse-CDF quantile of a weighted sample: the smallest value whose
// cumulative normalized weight reaches q.
double weighted_quantile(std::span<const double> values, std::span<const double> weights, double q);

// Plug-in effects of a fitted model. Raw coefficients come from the snapped
// lifting of the bundle, so fused levels produce bitwise identical predictors
// and their contrasts are exactly zero with zero standard error.
class Effects {
 public:
  // `data` must be the dataset `pr` was built from, rows in the same order.
  Effects(CovarianceBundle cb, const Problem& pr, Dataset data, int threads = 1);

  int clusters() const { return static_cast<int>(clusters_.size()); }
  const Dataset& data() const { return data_; }

  Estimate amce(int j, int l, int l_prime, int k, Marginalization mode = Marginalization::empirical) const;
  Estimate amce_factorial(int j, int l, int l_prime, int k, Marginalization mode) const;
  // Average of the left- and right-profile effects, each against the observed opponents.
  Estimate amce_conjoint(int j, int l, int l_prime, int k, Marginalization mode = Marginalization::empirical) const;
  Estimate amce_side(int j, int l, int l_prime, int k, Side side, Marginalization mode) const;
  // ACE((l,q) vs (f,r)) minus both AMCEs, all over the same filtered rows.
  Estimate amie(int j, int s, std::pair<int, int> lf, std::pair<int, int> qr, int k,
                Marginalization mode = Marginalization::empirical) const;
  Estimate marginal_mean(int j, int l, int k, Marginalization mode = Marginalization::empirical) const;
  // Mean over respondents of pi_k(x with covariate = x1) - pi_k(x with covariate = x0).
  Estimate moderator_effect(int covariate, double x0, double x1, int k) const;
  // Default contrast points: min/max for 0/1 covariates, otherwise quartiles.
  std::pair<double, double> moderator_contrast(int covariate) const;

  Eigen::VectorXd raw_coefficients(int k) const;  // lifting[k] * eta_k

  EffectTable table(const EffectRequest& req) const;
  std::vector<ClusterProfile> cluster_profiles() const;

 private:
  struct Cluster {
    std::vector<int> canon;  // raw column -> canonical id, -1 for exact zeros
    Eigen::MatrixXd lift;    // canonical rows of the lifting
    Eigen::VectorXd coef;    // canonical raw coefficients
  };
  struct Accum;
  struct Support;

  Eigen::VectorXi counts(const Profile& p, int k) const;
  double predictor(const Eigen::VectorXi& n, int k) const;
  Support support(std::span<const int> studied, std::span<const int> set, Side side, Marginalization mode) const;
  void contrast(const Support& sup, int k, Side side, std::span<const std::pair<int, int>> set_a,
                std::span<const std::pair<int, int>> set_b, Accum& acc) const;
  Estimate finish(const Accum& acc, int k, int support, std::string filter) const;
  Estimate side_average(const Estimate& left, const Estimate& right) const;

  CovarianceBundle cb_;
  Dataset data_;
  Layout layout_;
  int threads_ = 1;
  Eigen::MatrixXd responsibilities_;
  Eigen::VectorXd pi_bar_;
  std::vector<Cluster> clusters_;
};

}  // namespace cjmix
