#include "cjmix/design.hpp"

#include "cjmix/errors.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <set>

namespace cjmix {

int FactorSpec::level_index(std::string_view label) const {
  for (int l = 0; l < n_levels(); ++l)
    if (levels[l] == label) return l;
  return -1;
}

void validate_specs(std::span<const FactorSpec> specs) {
  if (specs.empty()) throw InputError("no factors declared");
  std::set<std::string> names;
  for (const auto& f : specs) {
    if (!names.insert(f.name).second) throw InputError("duplicate factor name '" + f.name + "'");
    if (f.n_levels() < 2) throw InputError("factor '" + f.name + "' needs at least two levels");
    std::set<std::string> seen(f.levels.begin(), f.levels.end());
    if (seen.size() != f.levels.size())
      throw InputError("factor '" + f.name + "' has duplicate level labels");
    for (const auto& r : f.restrictions) {
      if (r.partner < 0 || r.partner >= static_cast<int>(specs.size()) ||
          specs[r.partner].name == f.name)
        throw InputError("factor '" + f.name + "' has an invalid restriction partner");
      for (auto [own, other] : r.excluded)
        if (own < 0 || own >= f.n_levels() || other < 0 || other >= specs[r.partner].n_levels())
          throw InputError("restriction on '" + f.name + "' references an unknown level");
    }
  }
}

std::vector<FactorSpec> symmetrize_restrictions(std::vector<FactorSpec> specs) {
  const int J = static_cast<int>(specs.size());
  std::vector<std::vector<std::set<std::pair<int, int>>>> pairs(
      J, std::vector<std::set<std::pair<int, int>>>(J));
  for (int j = 0; j < J; ++j)
    for (const auto& r : specs[j].restrictions)
      for (auto [a, b] : r.excluded) {
        pairs[j][r.partner].insert({a, b});
        pairs[r.partner][j].insert({b, a});
      }
  for (int j = 0; j < J; ++j) {
    specs[j].restrictions.clear();
    for (int h = 0; h < J; ++h)
      if (!pairs[j][h].empty())
        specs[j].restrictions.push_back({h, {pairs[j][h].begin(), pairs[j][h].end()}});
  }
  return specs;
}

Profile parse_profile(std::span<const std::string> labels, std::span<const FactorSpec> specs) {
  if (labels.size() != specs.size()) throw InputError("profile does not assign every factor");
  Profile p(specs.size());
  for (std::size_t j = 0; j < specs.size(); ++j) {
    p[j] = specs[j].level_index(labels[j]);
    if (p[j] < 0)
      throw InputError("unknown level '" + labels[j] + "' for factor '" + specs[j].name + "'");
  }
  return p;
}

Layout::Layout(std::span<const FactorSpec> specs, bool interactions) : interactions_(interactions) {
  const int J = static_cast<int>(specs.size());
  for (const auto& f : specs) {
    main_offset_.push_back(columns_);
    levels_.push_back(f.n_levels());
    columns_ += f.n_levels();
  }
  pair_offset_.assign(static_cast<std::size_t>(J) * J, -1);
  if (!interactions) return;
  for (int j = 0; j < J; ++j)
    for (int h = j + 1; h < J; ++h) {
      pair_offset_[j * J + h] = columns_;
      columns_ += levels_[j] * levels_[h];
    }
}

int Layout::pair_offset(int j, int h) const { return pair_offset_[j * factors() + h]; }

int Layout::cell_col(int j, int lj, int h, int lh) const {
  if (j > h) {
    std::swap(j, h);
    std::swap(lj, lh);
  }
  return pair_offset(j, h) + lj + levels_[j] * lh;
}

void Layout::add_encoding(const Profile& p, double sign, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> row) const {
  const int J = factors();
  for (int j = 0; j < J; ++j) row(main_col(j, p[j])) += sign;
  if (!interactions_) return;
  for (int j = 0; j < J; ++j)
    for (int h = j + 1; h < J; ++h) row(cell_col(j, p[j], h, p[h])) += sign;
}

Eigen::RowVectorXd Layout::encode(const Profile& p) const {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(columns_);
  add_encoding(p, 1.0, row);
  return row;
}

namespace {

void check_profile(const Profile& p, const Layout& layout) {
  if (static_cast<int>(p.size()) != layout.factors())
    throw InputError("profile has " + std::to_string(p.size()) + " factors, expected " +
                     std::to_string(layout.factors()));
  for (int j = 0; j < layout.factors(); ++j)
    if (p[j] < 0 || p[j] >= layout.levels(j))
      throw InputError("level index " + std::to_string(p[j]) + " out of range for factor " +
                       std::to_string(j));
}

std::vector<int> counts_of(std::span<const int> respondent) {
  std::vector<int> counts;
  for (int r : respondent) {
    if (r < 0) throw InputError("negative respondent index");
    if (r >= static_cast<int>(counts.size())) counts.resize(r + 1, 0);
    ++counts[r];
  }
  return counts;
}

}  // namespace

DesignMatrix encode_factorial(std::span<const Profile> profiles, std::span<const int> respondent,
                              const Layout& layout) {
  if (respondent.size() != profiles.size()) throw InputError("respondent index length mismatch");
  DesignMatrix d;
  d.kind = DesignKind::factorial;
  d.rows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(profiles.size()), layout.columns());
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    check_profile(profiles[i], layout);
    layout.add_encoding(profiles[i], 1.0, d.rows.row(static_cast<Eigen::Index>(i)));
  }
  d.respondent.assign(respondent.begin(), respondent.end());
  d.task_counts = counts_of(respondent);
  return d;
}

DesignMatrix encode_forced_choice(std::span<const Profile> left, std::span<const Profile> right,
                                  std::span<const int> respondent, const Layout& layout) {
  if (left.size() != right.size()) throw InputError("left and right profile counts differ");
  if (respondent.size() != left.size()) throw InputError("respondent index length mismatch");
  DesignMatrix d;
  d.kind = DesignKind::forced_choice;
  d.rows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(left.size()), layout.columns());
  for (std::size_t i = 0; i < left.size(); ++i) {
    check_profile(left[i], layout);
    check_profile(right[i], layout);
    auto row = d.rows.row(static_cast<Eigen::Index>(i));
    layout.add_encoding(left[i], 1.0, row);
    layout.add_encoding(right[i], -1.0, row);
  }
  d.respondent.assign(respondent.begin(), respondent.end());
  d.task_counts = counts_of(respondent);
  return d;
}

ConstraintMatrix constraints_from(Eigen::MatrixXd c_transpose) {
  ConstraintMatrix cm;
  const Eigen::Index p = c_transpose.cols();
  if (c_transpose.rows() == 0) {
    cm.c_transpose = std::move(c_transpose);
    cm.null_basis = Eigen::MatrixXd::Identity(p, p);
    return cm;
  }
  // Householder QR of C (p x r): the trailing p - rank columns of Q span null(C^T).
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(c_transpose.transpose());
  qr.setThreshold(1e-10);
  const Eigen::Index rank = qr.rank();
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(p, p);
  cm.null_basis = q.rightCols(p - rank);
  cm.c_transpose = std::move(c_transpose);
  return cm;
}

ConstraintMatrix build_constraints(const Layout& layout) {
  const int J = layout.factors();
  std::vector<Eigen::RowVectorXd> rows;
  auto blank = [&] { return Eigen::RowVectorXd::Zero(layout.columns()); };
  for (int j = 0; j < J; ++j) {
    Eigen::RowVectorXd r = blank();
    for (int l = 0; l < layout.levels(j); ++l) r(layout.main_col(j, l)) = 1.0;
    rows.push_back(std::move(r));
  }
  if (layout.interactions()) {
    for (int j = 0; j < J; ++j)
      for (int h = j + 1; h < J; ++h) {
        for (int lh = 0; lh < layout.levels(h); ++lh) {
          Eigen::RowVectorXd r = blank();
          for (int lj = 0; lj < layout.levels(j); ++lj) r(layout.cell_col(j, lj, h, lh)) = 1.0;
          rows.push_back(std::move(r));
        }
        for (int lj = 0; lj < layout.levels(j); ++lj) {
          Eigen::RowVectorXd r = blank();
          for (int lh = 0; lh < layout.levels(h); ++lh) r(layout.cell_col(j, lj, h, lh)) = 1.0;
          rows.push_back(std::move(r));
        }
      }
  }
  Eigen::MatrixXd ct(static_cast<Eigen::Index>(rows.size()), layout.columns());
  for (std::size_t i = 0; i < rows.size(); ++i) ct.row(static_cast<Eigen::Index>(i)) = rows[i];
  return constraints_from(std::move(ct));
}

DesignMatrix project_design(const DesignMatrix& design, const ConstraintMatrix& cm) {
  if (design.reduced) throw InputError("design is already in reduced coordinates");
  if (design.rows.cols() != cm.raw_dim())
    throw InputError("design has " + std::to_string(design.rows.cols()) +
                     " columns but constraints expect " + std::to_string(cm.raw_dim()));
  DesignMatrix out = design;
  out.rows = design.rows * cm.null_basis;
  out.reduced = true;
  return out;
}

Eigen::VectorXd lift_coefficients(const Eigen::VectorXd& reduced, const ConstraintMatrix& cm) {
  if (reduced.size() != cm.reduced_dim()) throw InputError("reduced coefficient length mismatch");
  return cm.null_basis * reduced;
}

Eigen::VectorXd reduce_coefficients(const Eigen::VectorXd& raw, const ConstraintMatrix& cm) {
  if (raw.size() != cm.raw_dim()) throw InputError("raw coefficient length mismatch");
  return cm.null_basis.transpose() * raw;
}

Eigen::MatrixXd psd_null_basis(const Eigen::MatrixXd& s, double rel_tol) {
  const Eigen::Index d = s.rows();
  if (d == 0) return Eigen::MatrixXd(0, 0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  const Eigen::VectorXd& ev = es.eigenvalues();  // ascending
  const double top = std::max(ev(d - 1), 0.0);
  Eigen::Index k = 0;
  while (k < d && ev(k) <= rel_tol * top) ++k;
  if (top == 0.0) k = d;
  return es.eigenvectors().leftCols(k);
}

std::vector<int> Dataset::row_start() const {
  std::vector<int> start(static_cast<std::size_t>(respondents()) + 1, 0);
  for (int r : respondent) ++start[static_cast<std::size_t>(r) + 1];
  for (std::size_t i = 1; i < start.size(); ++i) start[i] += start[i - 1];
  return start;
}

void Dataset::validate() const {
  validate_specs(factors);
  const auto n = static_cast<std::size_t>(rows());
  if (left.size() != n || respondent.size() != n) throw InputError("dataset columns differ in length");
  if (kind == DesignKind::forced_choice && right.size() != n)
    throw InputError("forced-choice dataset lacks right profiles");
  if (moderators.rows() == 0 || moderators.cols() == 0) throw InputError("no moderator rows");
  for (std::size_t i = 0; i < n; ++i) {
    if (respondent[i] < 0 || respondent[i] >= respondents())
      throw InputError("row " + std::to_string(i) + " references an unknown respondent");
    if (i > 0 && respondent[i] < respondent[i - 1])
      throw InputError("rows are not grouped by respondent");
    if (y(static_cast<Eigen::Index>(i)) != 0.0 && y(static_cast<Eigen::Index>(i)) != 1.0)
      throw InputError("outcome on row " + std::to_string(i) + " is not 0/1");
  }
  auto start = row_start();
  for (int i = 0; i < respondents(); ++i)
    if (start[i + 1] == start[i])
      throw InputError("respondent " + std::to_string(i) + " has no tasks");
}

DesignMatrix encode(const Dataset& data, const Layout& layout) {
  if (data.kind == DesignKind::forced_choice)
    return encode_forced_choice(data.left, data.right, data.respondent, layout);
  return encode_factorial(data.left, data.respondent, layout);
}

}  // namespace cjmix
