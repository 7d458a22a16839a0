#include "doctest.h"

#include "cjmix/errors.hpp"
#include "cjmix/penalty.hpp"
#include "cjmix/problem.hpp"
#include "support.hpp"

#include <Eigen/LU>

using namespace cjmix;
namespace ts = testing_support;

namespace {

int independent_rank(const PenaltySet& ps) {
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(ps.dim(), ps.dim());
  for (const auto& m : ps.matrices) sum += m;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(sum);
  lu.setThreshold(1e-9);
  return static_cast<int>(lu.rank());
}

}  // namespace

TEST_CASE("fusion groups: all pairs for nominal factors, adjacent pairs for ordered") {
  const auto specs = ts::factors({3, 4}, true);
  const auto g = fusion_groups(specs);
  CHECK(g.size() == 3 + 3);
  CHECK(g[3].level_a == 0);
  CHECK(g[3].level_b == 1);
  CHECK(g[5].level_a == 2);
  CHECK(g[5].level_b == 3);
}

TEST_CASE("group norm equals the norm of the raw main and cell differences") {
  const std::vector<int> L{3, 2, 2};
  const auto specs = ts::factors(L);
  const Layout lay(specs, true);
  const ConstraintMatrix cm = build_constraints(lay);
  const PenaltySet ps = build_fusion_penalties(specs, lay, cm);
  std::mt19937_64 rng(3);
  const Eigen::VectorXd b = Eigen::VectorXd::NullaryExpr(cm.reduced_dim(), [&] {
    return std::normal_distribution<double>(0, 1)(rng);
  });
  const Eigen::VectorXd raw = cm.null_basis * b;
  for (int g = 0; g < ps.size(); ++g) {
    const PenaltyGroup& grp = ps.groups[g];
    const int j = grp.factor;
    double ss = std::pow(raw(lay.main_col(j, grp.level_a)) - raw(lay.main_col(j, grp.level_b)), 2);
    for (int h = 0; h < 3; ++h) {
      if (h == j) continue;
      for (int m = 0; m < L[h]; ++m)
        ss += std::pow(raw(lay.cell_col(j, grp.level_a, h, m)) - raw(lay.cell_col(j, grp.level_b, h, m)), 2);
    }
    CHECK(group_norm(b, ps.roots[g]) == doctest::Approx(std::sqrt(ss)).epsilon(1e-12));
    CHECK(b.dot(ps.matrices[g] * b) == doctest::Approx(ss).epsilon(1e-10));
  }
}

TEST_CASE("plain fusion penalties are proper") {
  for (bool inter : {false, true}) {
    const auto specs = ts::factors({2, 3, 3});
    const Layout lay(specs, inter);
    const ConstraintMatrix cm = build_constraints(lay);
    const PenaltySet ps = build_fusion_penalties(specs, lay, cm);
    CHECK(ps.rank_m == independent_rank(ps));
    CHECK(ps.rank_m == cm.reduced_dim());
    CHECK(ps.proper);
  }
}

TEST_CASE("a penalty that misses a direction is flagged improper") {
  PenaltySet ps;
  Eigen::MatrixXd root(1, 2);
  root << 1.0, 0.0;
  ps.roots.push_back(root);
  finalize_matrices(ps);
  const Certificate c = propriety_certificate(ps, 2);
  CHECK(c.rank_m == 1);
  CHECK_FALSE(c.proper);
}

TEST_CASE("standardization weights on a hand-built design") {
  Eigen::MatrixXd x(2, 3);
  x << 1, 0, 0, 1, 2, 0;
  std::vector<std::string> warnings;
  const Eigen::VectorXd w = standardization_weights(x, {{0}, {0, 1}, {2}}, &warnings);
  CHECK(w(0) == doctest::Approx(1.0));
  CHECK(w(1) == doctest::Approx(std::sqrt(3.0)));
  CHECK(w(2) == 1.0);
  CHECK(warnings.size() == 1);
}

TEST_CASE("overlapping expansion preserves predictions and satisfies its constraints") {
  const std::vector<int> L{3, 2, 3};
  std::mt19937_64 rng(11);
  std::vector<ts::Truth> truth{ts::random_truth(L, 1.0, 0.3, rng)};
  const Dataset data = ts::forced_choice_data(L, truth, std::vector<int>(20, 0), 6, rng);
  const Layout lay(data.factors, true);
  const ConstraintMatrix cm = build_constraints(lay);
  const DesignMatrix raw = encode(data, lay);
  const PenaltySet plain = build_fusion_penalties(data.factors, lay, cm);
  const LogExpansion ex = expand_log(raw, plain, lay, cm);
  const int G = plain.size();
  CHECK(ex.penalties.size() == 2 * G);
  CHECK(ex.penalties.proper);
  CHECK(ex.penalties.rank_m == independent_rank(ex.penalties));
  CHECK(ex.penalties.rank_m == ex.constraints.reduced_dim());

  const Eigen::VectorXd b = Eigen::VectorXd::NullaryExpr(ex.constraints.reduced_dim(), [&] {
    return std::normal_distribution<double>(0, 1)(rng);
  });
  const Eigen::VectorXd theta = ex.constraints.null_basis * b;
  CHECK((ex.constraints.c_transpose * theta).cwiseAbs().maxCoeff() < 1e-10);
  // T_LOG theta = T beta for any admissible theta
  const Eigen::VectorXd beta = ex.lift * b;
  CHECK((raw.rows * beta - ex.design.rows * b).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((cm.c_transpose * beta).cwiseAbs().maxCoeff() < 1e-10);

  // joint group g reads delta_main(g) and the interaction differences of g
  const DifferenceMap dm = difference_map(lay, plain.groups);
  const Eigen::Index p = lay.columns(), nm = dm.d_main.rows(), ni = dm.d_int.rows();
  for (int g = 0; g < G; ++g) {
    double ss = std::pow(theta(p + g), 2);
    for (int r = dm.int_begin[g]; r < dm.int_begin[g + 1]; ++r) ss += std::pow(theta(p + nm + r), 2);
    CHECK(group_norm(b, ex.penalties.roots[g]) == doctest::Approx(std::sqrt(ss)).epsilon(1e-10));
    CHECK(group_norm(b, ex.penalties.roots[G + g]) == doctest::Approx(std::abs(theta(p + nm + ni + g))).epsilon(1e-10));
    // the interaction differences equal the raw cell differences
    for (int r = dm.int_begin[g]; r < dm.int_begin[g + 1]; ++r)
      CHECK(theta(p + nm + r) == doctest::Approx(dm.d_int.row(r).dot(beta)).epsilon(1e-10));
  }

  const Layout mains(data.factors, false);
  CHECK_THROWS_AS(expand_log(encode(data, mains), build_fusion_penalties(data.factors, mains, build_constraints(mains)),
                             mains, build_constraints(mains)),
                  InputError);
}

TEST_CASE("problem assembly keeps weights positive and matches dimensions") {
  const std::vector<int> L{2, 3};
  std::mt19937_64 rng(5);
  std::vector<ts::Truth> truth{ts::random_truth(L, 1.0, 0.3, rng)};
  const Dataset data = ts::forced_choice_data(L, truth, std::vector<int>(15, 0), 5, rng);
  for (bool log : {false, true}) {
    ModelSpec spec;
    spec.log_mode = log;
    const Problem pr = build_problem(data, spec);
    CHECK(pr.penalties.weights.minCoeff() > 0.0);
    CHECK(pr.lift.cols() == pr.dim());
    CHECK(pr.main_design.rows() == pr.rows());
    CHECK(pr.penalties.proper);
  }
  ModelSpec off;
  off.weights = false;
  CHECK(build_problem(data, off).penalties.weights.isOnes());
}
