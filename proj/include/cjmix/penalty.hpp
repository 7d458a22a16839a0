#pragma once

#include "cjmix/design.hpp"

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

namespace cjmix {

// One fusion group: levels (level_a, level_b) of a factor. Copy groups only
// exist in the latent-overlapping expansion and carry the duplicated main effect.
struct PenaltyGroup {
  int factor = 0;
  int level_a = 0;
  int level_b = 0;
  bool copy = false;
};

struct PenaltySet {
  // Each reduced penalty matrix is root^T root; the root rows are the
  // difference vectors of the group expressed in reduced coordinates.
  std::vector<Eigen::MatrixXd> roots;
  std::vector<Eigen::MatrixXd> matrices;  // F~_g
  Eigen::VectorXd weights;                // xi_g, the same for every cluster
  std::vector<PenaltyGroup> groups;
  int rank_m = 0;
  bool proper = false;
  bool log_mode = false;
  double fusion_threshold = 1e-4;
  std::vector<std::string> warnings;

  int size() const { return static_cast<int>(matrices.size()); }
  int dim() const { return matrices.empty() ? 0 : static_cast<int>(matrices.front().cols()); }
};

std::vector<PenaltyGroup> fusion_groups(std::span<const FactorSpec> specs);

// Rows of raw difference vectors for one group: the main-effect difference
// first, then one row per level of every other factor (when interactions exist).
Eigen::MatrixXd difference_rows(const Layout& layout, const PenaltyGroup& g);

// F_g over raw coefficients.
Eigen::MatrixXd raw_penalty_matrix(const Layout& layout, const PenaltyGroup& g);

PenaltySet build_fusion_penalties(std::span<const FactorSpec> specs, const Layout& layout,
                                  const ConstraintMatrix& cm);

// Fills matrices from roots.
void finalize_matrices(PenaltySet& ps);

double group_norm(const Eigen::VectorXd& beta_reduced, const Eigen::MatrixXd& root);
double penalty_value(const Eigen::VectorXd& beta_reduced, const PenaltySet& ps);

struct Certificate {
  int rank_m = 0;
  bool proper = false;
};

// Rank of the vertically stacked F~_g with threshold 1e-8 * largest singular value.
Certificate propriety_certificate(const PenaltySet& ps, int reduced_dim);

// xi_g = ||columns of the group in the over-parameterized design||_F / sqrt(n).
// A group whose columns are all zero gets weight 1 and a warning.
Eigen::VectorXd standardization_weights(const Eigen::MatrixXd& expanded_design,
                                        const std::vector<std::vector<int>>& group_columns,
                                        std::vector<std::string>* warnings = nullptr);

// Difference operators of the over-parameterized model.
struct DifferenceMap {
  Eigen::MatrixXd d_main;  // one row per group
  Eigen::MatrixXd d_int;   // interaction differences, grouped
  std::vector<int> int_begin;  // group g owns d_int rows [int_begin[g], int_begin[g+1])
};

DifferenceMap difference_map(const Layout& layout, const std::vector<PenaltyGroup>& groups);

// Columns of T M~^+ for [delta_main, delta_int], M~ = [I; D_main; D_int].
Eigen::MatrixXd difference_design(const Eigen::MatrixXd& raw_design, const DifferenceMap& dm);

struct LogExpansion {
  DesignMatrix design;          // reduced, in the expanded parameterization
  PenaltySet penalties;         // 2G groups: joint groups, then copy groups
  ConstraintMatrix constraints; // expanded constraints and their null basis
  Eigen::MatrixXd lift;         // raw beta = lift * reduced
  Eigen::MatrixXd expanded_design;  // T_LOG before projection
};

// Latent overlapping groups. Throws InputError when the layout has no interactions.
LogExpansion expand_log(const DesignMatrix& raw_design, const PenaltySet& plain,
                        const Layout& layout, const ConstraintMatrix& cm);

}  // namespace cjmix
