#include "cjmix/penalty.hpp"

#include "cjmix/errors.hpp"

#include <Eigen/SVD>

#include <cmath>

namespace cjmix {

std::vector<PenaltyGroup> fusion_groups(std::span<const FactorSpec> specs) {
  std::vector<PenaltyGroup> out;
  for (int j = 0; j < static_cast<int>(specs.size()); ++j) {
    const int L = specs[j].n_levels();
    if (specs[j].ordered) {
      for (int a = 0; a + 1 < L; ++a) out.push_back({j, a, a + 1, false});
    } else {
      for (int a = 0; a < L; ++a)
        for (int b = a + 1; b < L; ++b) out.push_back({j, a, b, false});
    }
  }
  return out;
}

Eigen::MatrixXd difference_rows(const Layout& layout, const PenaltyGroup& g) {
  const int J = layout.factors();
  int rows = 1;
  if (layout.interactions())
    for (int h = 0; h < J; ++h)
      if (h != g.factor) rows += layout.levels(h);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(rows, layout.columns());
  d(0, layout.main_col(g.factor, g.level_a)) = 1.0;
  d(0, layout.main_col(g.factor, g.level_b)) = -1.0;
  if (!layout.interactions()) return d;
  int r = 1;
  for (int h = 0; h < J; ++h) {
    if (h == g.factor) continue;
    for (int m = 0; m < layout.levels(h); ++m, ++r) {
      d(r, layout.cell_col(g.factor, g.level_a, h, m)) = 1.0;
      d(r, layout.cell_col(g.factor, g.level_b, h, m)) = -1.0;
    }
  }
  return d;
}

Eigen::MatrixXd raw_penalty_matrix(const Layout& layout, const PenaltyGroup& g) {
  const Eigen::MatrixXd d = difference_rows(layout, g);
  return d.transpose() * d;
}

void finalize_matrices(PenaltySet& ps) {
  ps.matrices.clear();
  ps.matrices.reserve(ps.roots.size());
  for (const auto& r : ps.roots) ps.matrices.push_back(r.transpose() * r);
}

Certificate propriety_certificate(const PenaltySet& ps, int reduced_dim) {
  Certificate c;
  if (ps.matrices.empty() || reduced_dim == 0) return c;
  Eigen::MatrixXd stacked(static_cast<Eigen::Index>(ps.matrices.size()) * reduced_dim, reduced_dim);
  for (std::size_t g = 0; g < ps.matrices.size(); ++g)
    stacked.middleRows(static_cast<Eigen::Index>(g) * reduced_dim, reduced_dim) = ps.matrices[g];
  Eigen::BDCSVD<Eigen::MatrixXd> svd(stacked);
  const Eigen::VectorXd& s = svd.singularValues();
  const double cut = 1e-8 * (s.size() ? s(0) : 0.0);
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > cut && s(i) > 0.0) ++c.rank_m;
  c.proper = c.rank_m == reduced_dim;
  return c;
}

PenaltySet build_fusion_penalties(std::span<const FactorSpec> specs, const Layout& layout,
                                  const ConstraintMatrix& cm) {
  PenaltySet ps;
  ps.groups = fusion_groups(specs);
  for (const auto& g : ps.groups) ps.roots.push_back(difference_rows(layout, g) * cm.null_basis);
  finalize_matrices(ps);
  ps.weights = Eigen::VectorXd::Ones(ps.size());
  const Certificate c = propriety_certificate(ps, cm.reduced_dim());
  ps.rank_m = c.rank_m;
  ps.proper = c.proper;
  return ps;
}

double group_norm(const Eigen::VectorXd& beta_reduced, const Eigen::MatrixXd& root) {
  return (root * beta_reduced).norm();
}

double penalty_value(const Eigen::VectorXd& beta_reduced, const PenaltySet& ps) {
  double total = 0.0;
  for (int g = 0; g < ps.size(); ++g)
    total += ps.weights(g) * group_norm(beta_reduced, ps.roots[g]);
  return total;
}

Eigen::VectorXd standardization_weights(const Eigen::MatrixXd& expanded_design,
                                        const std::vector<std::vector<int>>& group_columns,
                                        std::vector<std::string>* warnings) {
  const double n = static_cast<double>(expanded_design.rows());
  Eigen::VectorXd xi(static_cast<Eigen::Index>(group_columns.size()));
  for (std::size_t g = 0; g < group_columns.size(); ++g) {
    double ss = 0.0;
    for (int c : group_columns[g]) ss += expanded_design.col(c).squaredNorm();
    if (ss == 0.0 || n == 0.0) {
      xi(static_cast<Eigen::Index>(g)) = 1.0;
      if (warnings)
        warnings->push_back("penalty group " + std::to_string(g) +
                            " has all-zero design columns; weight set to 1");
    } else {
      xi(static_cast<Eigen::Index>(g)) = std::sqrt(ss / n);
    }
  }
  return xi;
}

DifferenceMap difference_map(const Layout& layout, const std::vector<PenaltyGroup>& groups) {
  DifferenceMap dm;
  const int G = static_cast<int>(groups.size());
  std::vector<Eigen::MatrixXd> rows;
  int n_int = 0;
  dm.int_begin.push_back(0);
  for (const auto& g : groups) {
    rows.push_back(difference_rows(layout, g));
    n_int += static_cast<int>(rows.back().rows()) - 1;
    dm.int_begin.push_back(n_int);
  }
  dm.d_main.resize(G, layout.columns());
  dm.d_int.resize(n_int, layout.columns());
  for (int g = 0; g < G; ++g) {
    dm.d_main.row(g) = rows[g].row(0);
    dm.d_int.middleRows(dm.int_begin[g], dm.int_begin[g + 1] - dm.int_begin[g]) =
        rows[g].bottomRows(rows[g].rows() - 1);
  }
  return dm;
}

namespace {

// (M~^T M~)^{-1} with M~ = [I; D_main; D_int].
Eigen::MatrixXd gram_inverse(const DifferenceMap& dm) {
  const Eigen::Index p = dm.d_main.cols();
  Eigen::MatrixXd gram = Eigen::MatrixXd::Identity(p, p);
  gram.noalias() += dm.d_main.transpose() * dm.d_main;
  gram.noalias() += dm.d_int.transpose() * dm.d_int;
  return gram.llt().solve(Eigen::MatrixXd::Identity(p, p));
}

}  // namespace

Eigen::MatrixXd difference_design(const Eigen::MatrixXd& raw_design, const DifferenceMap& dm) {
  const Eigen::MatrixXd tg = raw_design * gram_inverse(dm);
  Eigen::MatrixXd out(raw_design.rows(), dm.d_main.rows() + dm.d_int.rows());
  out.leftCols(dm.d_main.rows()) = tg * dm.d_main.transpose();
  out.rightCols(dm.d_int.rows()) = tg * dm.d_int.transpose();
  return out;
}

LogExpansion expand_log(const DesignMatrix& raw_design, const PenaltySet& plain,
                        const Layout& layout, const ConstraintMatrix& cm) {
  if (!layout.interactions())
    throw InputError("latent overlapping groups require a model with interactions");
  if (raw_design.reduced) throw InputError("expand_log expects a raw design");
  for (const auto& g : plain.groups)
    if (g.copy) throw InputError("expand_log expects plain fusion groups");

  const DifferenceMap dm = difference_map(layout, plain.groups);
  const Eigen::Index p = layout.columns();
  const Eigen::Index nm = dm.d_main.rows();
  const Eigen::Index ni = dm.d_int.rows();
  const Eigen::Index d = cm.reduced_dim();
  const Eigen::Index total = p + nm + ni + nm;
  const Eigen::Index off_main = p, off_int = p + nm, off_copy = p + nm + ni;

  LogExpansion out;

  // Accounting constraints [C^T 0 0 0; D_main -I 0 -I; D_int 0 -I 0].
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(cm.c_transpose.rows() + nm + ni, total);
  a.topLeftCorner(cm.c_transpose.rows(), p) = cm.c_transpose;
  const Eigen::Index r0 = cm.c_transpose.rows();
  a.block(r0, 0, nm, p) = dm.d_main;
  a.block(r0, off_main, nm, nm) = -Eigen::MatrixXd::Identity(nm, nm);
  a.block(r0, off_copy, nm, nm) = -Eigen::MatrixXd::Identity(nm, nm);
  a.block(r0 + nm, 0, ni, p) = dm.d_int;
  a.block(r0 + nm, off_int, ni, ni) = -Eigen::MatrixXd::Identity(ni, ni);

  // The constrained set is {(B u, D_main B u - c, D_int B u, c)}; orthonormalize
  // that explicit spanning set with a Householder QR.
  Eigen::MatrixXd span = Eigen::MatrixXd::Zero(total, d + nm);
  span.topLeftCorner(p, d) = cm.null_basis;
  span.block(off_main, 0, nm, d) = dm.d_main * cm.null_basis;
  span.block(off_main, d, nm, nm) = -Eigen::MatrixXd::Identity(nm, nm);
  span.block(off_int, 0, ni, d) = dm.d_int * cm.null_basis;
  span.block(off_copy, d, nm, nm) = Eigen::MatrixXd::Identity(nm, nm);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(span);
  Eigen::MatrixXd basis = qr.householderQ() * Eigen::MatrixXd::Identity(total, d + nm);
  out.constraints.c_transpose = std::move(a);
  out.constraints.null_basis = std::move(basis);
  const Eigen::MatrixXd& be = out.constraints.null_basis;

  // T_LOG = [T M~^+ | copy of the delta_main columns].
  const Eigen::MatrixXd tg = raw_design.rows * gram_inverse(dm);
  Eigen::MatrixXd tlog(raw_design.rows.rows(), total);
  tlog.leftCols(p) = tg;
  tlog.middleCols(off_main, nm) = tg * dm.d_main.transpose();
  tlog.middleCols(off_int, ni) = tg * dm.d_int.transpose();
  tlog.middleCols(off_copy, nm) = tlog.middleCols(off_main, nm);

  out.design = raw_design;
  out.design.rows = tlog * be;
  out.design.reduced = true;
  out.lift = be.topRows(p);

  PenaltySet& ps = out.penalties;
  ps.log_mode = true;
  ps.fusion_threshold = plain.fusion_threshold;
  std::vector<std::vector<int>> columns;
  const Eigen::Index G = nm;
  for (Eigen::Index g = 0; g < G; ++g) {
    std::vector<int> idx{static_cast<int>(off_main + g)};
    for (int r = dm.int_begin[g]; r < dm.int_begin[g + 1]; ++r)
      idx.push_back(static_cast<int>(off_int + r));
    Eigen::MatrixXd root(static_cast<Eigen::Index>(idx.size()), be.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) root.row(static_cast<Eigen::Index>(i)) = be.row(idx[i]);
    ps.roots.push_back(std::move(root));
    ps.groups.push_back(plain.groups[g]);
    columns.push_back(std::move(idx));
  }
  for (Eigen::Index g = 0; g < G; ++g) {
    const int c = static_cast<int>(off_copy + g);
    ps.roots.push_back(be.row(c));
    PenaltyGroup grp = plain.groups[g];
    grp.copy = true;
    ps.groups.push_back(grp);
    columns.push_back({c});
  }
  finalize_matrices(ps);
  ps.weights = standardization_weights(tlog, columns, &ps.warnings);
  const Certificate cert = propriety_certificate(ps, static_cast<int>(be.cols()));
  ps.rank_m = cert.rank_m;
  ps.proper = cert.proper;
  out.expanded_design = std::move(tlog);
  return out;
}

}  // namespace cjmix
