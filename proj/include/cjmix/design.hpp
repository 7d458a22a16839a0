#pragma once

#include <Eigen/Dense>

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cjmix {

// Excluded combinations between this factor and one partner factor.
struct Restriction {
  int partner = 0;
  std::vector<std::pair<int, int>> excluded;  // (own level, partner level)
};

struct FactorSpec {
  std::string name;
  std::vector<std::string> levels;
  bool ordered = false;  // penalize adjacent level pairs only
  std::vector<Restriction> restrictions;

  int n_levels() const { return static_cast<int>(levels.size()); }
  int level_index(std::string_view label) const;  // -1 when unknown
};

// Throws InputError on duplicate labels, L < 2, or dangling restrictions.
void validate_specs(std::span<const FactorSpec> specs);

// Makes restriction metadata symmetric: a pair excluded on j's side is also
// recorded on the partner's side.
std::vector<FactorSpec> symmetrize_restrictions(std::vector<FactorSpec> specs);

using Profile = std::vector<int>;  // one level index per factor

Profile parse_profile(std::span<const std::string> labels, std::span<const FactorSpec> specs);

// Raw column layout: main-effect blocks, then one block per factor pair
// (j < h) with cells ordered so that j's level varies fastest.
class Layout {
 public:
  Layout() = default;
  Layout(std::span<const FactorSpec> specs, bool interactions);

  int factors() const { return static_cast<int>(levels_.size()); }
  int levels(int j) const { return levels_[j]; }
  int columns() const { return columns_; }
  bool interactions() const { return interactions_; }
  int main_col(int j, int l) const { return main_offset_[j] + l; }
  // Column of the cell (T_j = lj, T_h = lh); order of (j, h) does not matter.
  int cell_col(int j, int lj, int h, int lh) const;
  int pair_offset(int j, int h) const;  // j < h

  void add_encoding(const Profile& p, double sign, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> row) const;
  Eigen::RowVectorXd encode(const Profile& p) const;

 private:
  std::vector<int> levels_;
  std::vector<int> main_offset_;
  std::vector<int> pair_offset_;  // j * J + h
  int columns_ = 0;
  bool interactions_ = true;
};

enum class DesignKind { factorial, forced_choice };

struct DesignMatrix {
  DesignKind kind = DesignKind::factorial;
  Eigen::MatrixXd rows;             // one row per task
  std::vector<int> respondent;      // row -> respondent index
  std::vector<int> task_counts;     // tasks per respondent
  bool reduced = false;
};

DesignMatrix encode_factorial(std::span<const Profile> profiles, std::span<const int> respondent,
                              const Layout& layout);
DesignMatrix encode_forced_choice(std::span<const Profile> left, std::span<const Profile> right,
                                  std::span<const int> respondent, const Layout& layout);

struct ConstraintMatrix {
  Eigen::MatrixXd c_transpose;  // constraints x raw coefficients
  Eigen::MatrixXd null_basis;   // orthonormal columns spanning null(c_transpose)

  // Left inverse of null_basis; equals its transpose because the basis is orthonormal.
  Eigen::MatrixXd projector() const { return null_basis.transpose(); }
  int raw_dim() const { return static_cast<int>(null_basis.rows()); }
  int reduced_dim() const { return static_cast<int>(null_basis.cols()); }
};

ConstraintMatrix constraints_from(Eigen::MatrixXd c_transpose);
ConstraintMatrix build_constraints(const Layout& layout);
DesignMatrix project_design(const DesignMatrix& design, const ConstraintMatrix& cm);
Eigen::VectorXd lift_coefficients(const Eigen::VectorXd& reduced, const ConstraintMatrix& cm);
Eigen::VectorXd reduce_coefficients(const Eigen::VectorXd& raw, const ConstraintMatrix& cm);

// Orthonormal basis of the null space of a symmetric PSD matrix (eigenvalues
// below rel_tol * largest are treated as zero).
Eigen::MatrixXd psd_null_basis(const Eigen::MatrixXd& s, double rel_tol = 1e-10);

// Everything the model needs about the raw experiment, rows grouped by respondent.
struct Dataset {
  std::vector<FactorSpec> factors;
  DesignKind kind = DesignKind::factorial;
  std::vector<Profile> left;   // the single profile in factorial designs
  std::vector<Profile> right;  // forced choice only
  Eigen::VectorXd y;
  std::vector<int> respondent;  // non-decreasing
  std::vector<std::string> respondent_ids;
  std::vector<std::string> task_ids;
  Eigen::MatrixXd moderators;  // respondents x p_x, first column is the intercept
  std::vector<std::string> moderator_names;

  int rows() const { return static_cast<int>(y.size()); }
  int respondents() const { return static_cast<int>(moderators.rows()); }
  std::vector<int> row_start() const;
  void validate() const;
};

DesignMatrix encode(const Dataset& data, const Layout& layout);

}  // namespace cjmix
