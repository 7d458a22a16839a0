#pragma once

#include "cjmix/design.hpp"
#include "cjmix/penalty.hpp"

#include <Eigen/Dense>

#include <vector>

namespace cjmix {

struct ModelSpec {
  bool interactions = true;
  bool log_mode = true;  // ignored without interactions
  bool weights = true;   // standardization weights; all ones when false
  double fusion_threshold = 1e-4;
};

// A fitting problem in reduced, unconstrained coordinates.
struct Problem {
  DesignKind kind = DesignKind::factorial;
  Layout layout;
  Eigen::MatrixXd design;       // tasks x d
  Eigen::MatrixXd main_design;  // tasks x mains-only reduced dim (initialization); may be empty
  Eigen::VectorXd y;
  std::vector<int> row_start;   // respondents + 1 offsets into the task rows
  Eigen::MatrixXd moderators;   // respondents x p_x
  PenaltySet penalties;
  Eigen::MatrixXd lift;         // raw beta = lift * reduced beta

  int rows() const { return static_cast<int>(design.rows()); }
  int dim() const { return static_cast<int>(design.cols()); }
  int respondents() const { return static_cast<int>(moderators.rows()); }
  int moderator_dim() const { return static_cast<int>(moderators.cols()); }
  int tasks_of(int i) const { return row_start[i + 1] - row_start[i]; }
  // Task-count weights N_i / sum N_i used for the average membership probability.
  Eigen::VectorXd respondent_weights() const;
  void validate() const;
};

Problem build_problem(const Dataset& data, const ModelSpec& spec);

}  // namespace cjmix
