#include "doctest.h"

#include "cjmix/errors.hpp"
#include "cjmix/estimands.hpp"
#include "support.hpp"

#include <cmath>
#include <functional>

using namespace cjmix;
namespace ts = testing_support;

namespace {

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

std::vector<cjmix::Profile> all_profiles(const std::vector<int>& levels) {
  std::vector<cjmix::Profile> out{{}};
  for (int L : levels) {
    std::vector<cjmix::Profile> next;
    for (const auto& p : out)
      for (int l = 0; l < L; ++l) {
        auto q = p;
        q.push_back(l);
        next.push_back(q);
      }
    out = next;
  }
  return out;
}

void fill_rows(Dataset& d, int rows, int moderators) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 1.0);
  d.moderators.resize(rows, moderators);
  std::vector<double> yv;
  for (int r = 0; r < rows; ++r) {
    d.respondent.push_back(r);
    d.respondent_ids.push_back("r" + std::to_string(r));
    d.task_ids.push_back("1");
    d.moderators(r, 0) = 1.0;
    for (int c = 1; c < moderators; ++c) d.moderators(r, c) = nd(rng);
    yv.push_back(r % 2);
  }
  d.y = Eigen::Map<Eigen::VectorXd>(yv.data(), rows);
  d.moderator_names.push_back("(intercept)");
  for (int c = 1; c < moderators; ++c) d.moderator_names.push_back("x" + std::to_string(c));
}

// Every profile `reps` times, one task per respondent.
Dataset factorial_all(const std::vector<int>& levels, int reps, int moderators = 1) {
  Dataset d;
  d.factors = ts::factors(levels);
  d.kind = DesignKind::factorial;
  for (int r = 0; r < reps; ++r)
    for (const auto& p : all_profiles(levels)) d.left.push_back(p);
  fill_rows(d, static_cast<int>(d.left.size()), moderators);
  return d;
}

// Every ordered pair of profiles once.
Dataset pairs_all(const std::vector<int>& levels, int moderators = 1) {
  Dataset d;
  d.factors = ts::factors(levels);
  d.kind = DesignKind::forced_choice;
  const auto ps = all_profiles(levels);
  for (const auto& a : ps)
    for (const auto& b : ps) {
      d.left.push_back(a);
      d.right.push_back(b);
    }
  fill_rows(d, static_cast<int>(d.left.size()), moderators);
  return d;
}

Eigen::VectorXd raw_vector(const Layout& lay, const ts::Truth& t) {
  Eigen::VectorXd raw = Eigen::VectorXd::Zero(lay.columns());
  for (int j = 0; j < lay.factors(); ++j)
    for (int l = 0; l < lay.levels(j); ++l) raw(lay.main_col(j, l)) = t.main[j][l];
  if (lay.interactions())
    for (int j = 0; j < lay.factors(); ++j)
      for (int h = j + 1; h < lay.factors(); ++h)
        for (int a = 0; a < lay.levels(j); ++a)
          for (int b = 0; b < lay.levels(h); ++b) raw(lay.cell_col(j, a, h, b)) = t.cell[j][h](a, b);
  return raw;
}

ModelState hand_state(const Problem& pr, const std::vector<ts::Truth>& truths, double mu) {
  const int K = static_cast<int>(truths.size());
  ModelState s = make_state(pr, K, 1.0, 1.0, 0.25);
  s.mu = mu;
  // the reduced basis may be overcomplete (LOG copies), so take the minimum-norm preimage
  const auto cod = pr.lift.completeOrthogonalDecomposition();
  for (int k = 0; k < K; ++k) {
    const Eigen::VectorXd raw = raw_vector(pr.layout, truths[k]);
    s.beta.col(k) = cod.solve(raw);
    REQUIRE((pr.lift * s.beta.col(k) - raw).norm() < 1e-12);
  }
  return s;
}

Effects effects_for(const Dataset& d, const std::vector<ts::Truth>& truths, double mu, bool interactions = true,
                    const Eigen::MatrixXd& phi = Eigen::MatrixXd()) {
  ModelSpec spec;
  spec.interactions = interactions;
  const Problem pr = build_problem(d, spec);
  ModelState s = hand_state(pr, truths, mu);
  if (phi.size()) s.phi = phi;
  return Effects(covariance_bundle(s, pr), pr, d);
}

cjmix::Profile with(cjmix::Profile p, int j, int l) {
  p[j] = l;
  return p;
}

// Enumeration oracles over a list of profiles (factorial) or pairs (conjoint).
double amce_oracle(const ts::Truth& t, double mu, const std::vector<cjmix::Profile>& ps, int j, int l, int lp) {
  double s = 0.0;
  for (const auto& p : ps) s += logistic(mu + ts::utility(t, with(p, j, l))) - logistic(mu + ts::utility(t, with(p, j, lp)));
  return s / ps.size();
}

double ace_oracle(const ts::Truth& t, double mu, const std::vector<cjmix::Profile>& ps, int j, int l, int f, int s_,
                  int q, int r) {
  double s = 0.0;
  for (const auto& p : ps)
    s += logistic(mu + ts::utility(t, with(with(p, j, l), s_, q))) - logistic(mu + ts::utility(t, with(with(p, j, f), s_, r)));
  return s / ps.size();
}

double conjoint_oracle(const ts::Truth& t, double mu, const Dataset& d, int j, int l, int lp) {
  double left = 0.0, right = 0.0;
  const int n = d.rows();
  for (int b = 0; b < n; ++b) {
    const double ur = ts::utility(t, d.right[b]), ul = ts::utility(t, d.left[b]);
    left += logistic(mu + ts::utility(t, with(d.left[b], j, l)) - ur) -
            logistic(mu + ts::utility(t, with(d.left[b], j, lp)) - ur);
    right += (1.0 - logistic(mu + ul - ts::utility(t, with(d.right[b], j, l)))) -
             (1.0 - logistic(mu + ul - ts::utility(t, with(d.right[b], j, lp))));
  }
  return 0.5 * (left / n + right / n);
}

}  // namespace

TEST_CASE("factorial AMCE and AMIE match enumeration on a balanced binary toy") {
  const std::vector<int> L{2, 2, 2};
  std::mt19937_64 rng(1);
  const ts::Truth t = ts::random_truth(L, 1.0, 0.5, rng);
  const double mu = 0.3;
  const Dataset d = factorial_all(L, 2);
  const Effects fx = effects_for(d, {t}, mu);
  const auto ps = all_profiles(L);
  for (int j = 0; j < 3; ++j) {
    const double oracle = amce_oracle(t, mu, ps, j, 1, 0);
    CHECK(std::abs(fx.amce(j, 1, 0, 0).value - oracle) < 1e-10);
    CHECK(std::abs(fx.amce(j, 1, 0, 0, Marginalization::uniform).value - oracle) < 1e-10);
  }
  const double ace = ace_oracle(t, mu, ps, 0, 1, 0, 2, 1, 0);
  const double amie_oracle = ace - amce_oracle(t, mu, ps, 0, 1, 0) - amce_oracle(t, mu, ps, 2, 1, 0);
  CHECK(std::abs(fx.amie(0, 2, {1, 0}, {1, 0}, 0).value - amie_oracle) < 1e-10);
  CHECK(std::abs(fx.amie(0, 2, {1, 0}, {1, 0}, 0, Marginalization::uniform).value - amie_oracle) < 1e-10);
}

TEST_CASE("uniform marginalization enumerates combinations even on an unbalanced sample") {
  const std::vector<int> L{3, 2, 2};
  std::mt19937_64 rng(2);
  const ts::Truth t = ts::random_truth(L, 1.0, 0.6, rng);
  Dataset d = factorial_all(L, 1);
  // duplicate a few profiles so the empirical distribution is skewed
  Dataset skew;
  skew.factors = d.factors;
  skew.kind = d.kind;
  skew.left = d.left;
  for (int r = 0; r < 5; ++r) skew.left.push_back(d.left[r]);
  fill_rows(skew, static_cast<int>(skew.left.size()), 1);
  const Effects fx = effects_for(skew, {t}, -0.2);
  const auto ps = all_profiles(L);
  const double uniform = amce_oracle(t, -0.2, ps, 0, 2, 1);
  const double empirical = amce_oracle(t, -0.2, skew.left, 0, 2, 1);
  CHECK(std::abs(fx.amce(0, 2, 1, 0, Marginalization::uniform).value - uniform) < 1e-10);
  CHECK(std::abs(fx.amce(0, 2, 1, 0).value - empirical) < 1e-10);
  CHECK(std::abs(uniform - empirical) > 1e-6);
}

TEST_CASE("mains-only model: AMCE does not depend on the marginalization when there is one factor") {
  const std::vector<int> L{4};
  std::mt19937_64 rng(3);
  ts::Truth t = ts::random_truth(L, 1.0, 0.0, rng);
  Dataset d;
  d.factors = ts::factors(L);
  d.kind = DesignKind::factorial;
  d.left = all_profiles(L);
  d.left.push_back({2});
  d.left.push_back({2});
  fill_rows(d, static_cast<int>(d.left.size()), 1);
  const Effects fx = effects_for(d, {t}, 0.1, false);
  for (int l = 0; l < 4; ++l)
    CHECK(fx.amce(0, l, 0, 0).value == fx.amce(0, l, 0, 0, Marginalization::uniform).value);
}

TEST_CASE("conjoint AMCE matches pair enumeration; left and right agree when mu = 0") {
  const std::vector<int> L{3, 2};
  std::mt19937_64 rng(4);
  const ts::Truth t = ts::random_truth(L, 1.0, 0.5, rng);
  const Dataset d = pairs_all(L);
  {
    const Effects fx = effects_for(d, {t}, 0.4);
    for (int l = 0; l < 3; ++l)
      for (int lp = 0; lp < 3; ++lp)
        CHECK(std::abs(fx.amce(0, l, lp, 0).value - conjoint_oracle(t, 0.4, d, 0, l, lp)) < 1e-12);
    CHECK(std::abs(fx.amce(1, 1, 0, 0).value - conjoint_oracle(t, 0.4, d, 1, 1, 0)) < 1e-12);
    // uniform over all pairs equals the empirical mean on the full pair set
    CHECK(std::abs(fx.amce(0, 2, 0, 0, Marginalization::uniform).value - fx.amce(0, 2, 0, 0).value) < 1e-12);
  }
  const Effects sym = effects_for(d, {t}, 0.0);
  const Estimate left = sym.amce_side(0, 2, 0, 0, Side::left, Marginalization::empirical);
  const Estimate right = sym.amce_side(0, 2, 0, 0, Side::right, Marginalization::empirical);
  CHECK(std::abs(left.value - right.value) < 1e-12);
  CHECK(std::abs(sym.amce(0, 2, 0, 0).value - left.value) < 1e-12);
}

TEST_CASE("contrast identities: baseline, anti-symmetry, AMIE sign") {
  const std::vector<int> L{3, 3, 2};
  std::mt19937_64 rng(5);
  const ts::Truth t = ts::random_truth(L, 1.0, 0.5, rng);
  Dataset d = ts::forced_choice_data(L, {t}, std::vector<int>(30, 0), 4, rng);
  const Effects fx = effects_for(d, {t}, 0.2);
  for (int j = 0; j < 3; ++j)
    for (int l = 0; l < L[j]; ++l) {
      const Estimate same = fx.amce(j, l, l, 0);
      CHECK(same.value == 0.0);
      CHECK(same.se == 0.0);
      for (int lp = 0; lp < L[j]; ++lp) {
        const Estimate a = fx.amce(j, l, lp, 0), b = fx.amce(j, lp, l, 0);
        CHECK(a.value == -b.value);
        CHECK(a.se == b.se);
        CHECK(std::abs(a.value) <= 1.0);
      }
    }
  const Estimate a = fx.amie(0, 1, {2, 0}, {1, 0}, 0);
  const Estimate b = fx.amie(0, 1, {0, 2}, {0, 1}, 0);
  CHECK(a.value == -b.value);
  CHECK_THROWS_AS(fx.amie(1, 1, {1, 0}, {1, 0}, 0), InputError);
}

TEST_CASE("AMIE vanishes when one factor has no effect at all") {
  const std::vector<int> L{2, 3, 2};
  std::mt19937_64 rng(6);
  ts::Truth t = ts::random_truth(L, 1.0, 0.5, rng);
  for (auto& v : t.main[2]) v = 0.0;
  t.cell[0][2].setZero();
  t.cell[1][2].setZero();
  const Effects fx = effects_for(factorial_all(L, 1), {t}, 0.1);
  CHECK(std::abs(fx.amie(0, 2, {1, 0}, {1, 0}, 0).value) < 1e-10);
  CHECK(std::abs(fx.amie(1, 2, {2, 0}, {0, 1}, 0).value) < 1e-10);
}

TEST_CASE("J = 2 interaction cell: AMIE equals enumeration from potential outcomes") {
  const std::vector<int> L{2, 2};
  ts::Truth t;
  t.main = {{0.4, -0.4}, {-0.25, 0.25}};
  t.cell.assign(2, std::vector<Eigen::MatrixXd>(2));
  t.cell[0][1] = (Eigen::MatrixXd(2, 2) << 0.7, -0.7, -0.7, 0.7).finished();
  const double mu = -0.1;
  const Effects fx = effects_for(factorial_all(L, 1), {t}, mu);
  auto y = [&](int a, int b) { return logistic(mu + t.main[0][a] + t.main[1][b] + t.cell[0][1](a, b)); };
  const double ace = y(1, 1) - y(0, 0);
  const double d0 = 0.5 * ((y(1, 0) - y(0, 0)) + (y(1, 1) - y(0, 1)));
  const double d1 = 0.5 * ((y(0, 1) - y(0, 0)) + (y(1, 1) - y(1, 0)));
  CHECK(std::abs(fx.amie(0, 1, {1, 0}, {1, 0}, 0).value - (ace - d0 - d1)) < 1e-12);
}

TEST_CASE("restriction filter drops partner levels excluded for any level of the studied factor") {
  // education (5 levels) x profession (4 levels); the last profession needs education >= 2
  std::vector<FactorSpec> specs = ts::factors({5, 4});
  specs[0].name = "education";
  specs[1].name = "profession";
  specs[1].restrictions.push_back({0, {{3, 0}, {3, 1}}});
  const auto ps = all_profiles({5, 4});
  const int prof[] = {1}, edu[] = {0};

  CHECK(excluded_partner_levels(specs, 1, 0) == std::vector<int>{0, 1});
  CHECK(excluded_partner_levels(specs, 0, 1) == std::vector<int>{3});
  const auto rows = apply_restrictions(ps, specs, prof);
  // every profession contrast drops low education, including contrasts among allowed professions
  CHECK(rows.size() == 3 * 4);
  for (int r : rows) CHECK(ps[r][0] >= 2);
  const auto rows_e = apply_restrictions(ps, specs, edu);
  CHECK(rows_e.size() == 5 * 3);
  for (int r : rows_e) CHECK(ps[r][1] != 3);
  CHECK(restriction_description(specs, prof) == "drop education in {l0,l1}");

  // no restrictions: identity; an extra restriction never adds rows
  const auto plain = ts::factors({5, 4});
  CHECK(apply_restrictions(ps, plain, prof).size() == ps.size());
  auto more = specs;
  more[1].restrictions.push_back({0, {{2, 4}}});
  CHECK(apply_restrictions(ps, more, prof).size() <= rows.size());
  // everything excluded
  auto all = plain;
  all[1].restrictions.push_back({0, {{0, 0}, {0, 1}, {0, 2}, {0, 3}, {0, 4}}});
  CHECK_THROWS_AS(apply_restrictions(ps, all, prof), InputError);

  CHECK(admissible({2, 3}, specs));
  CHECK_FALSE(admissible({1, 3}, specs));
}

TEST_CASE("conjoint restriction filtering is side specific") {
  const std::vector<int> L{3, 3};
  std::mt19937_64 rng(7);
  const ts::Truth t = ts::random_truth(L, 1.0, 0.4, rng);
  Dataset d = pairs_all(L);
  d.factors[1].restrictions.push_back({0, {{2, 0}}});  // level 2 of factor 1 never with level 0 of factor 0
  // keep only admissible pairs, as randomization would
  Dataset r;
  r.factors = d.factors;
  r.kind = d.kind;
  for (int b = 0; b < d.rows(); ++b)
    if (admissible(d.left[b], d.factors) && admissible(d.right[b], d.factors)) {
      r.left.push_back(d.left[b]);
      r.right.push_back(d.right[b]);
    }
  fill_rows(r, static_cast<int>(r.left.size()), 1);
  const Effects fx = effects_for(r, {t}, 0.3);
  const Estimate right = fx.amce_side(1, 1, 0, 0, Side::right, Marginalization::empirical);
  const Estimate left = fx.amce_side(1, 1, 0, 0, Side::left, Marginalization::empirical);
  int right_ok = 0, left_ok = 0;
  double rs = 0.0, ls = 0.0;
  for (int b = 0; b < r.rows(); ++b) {
    if (r.right[b][0] != 0) {
      ++right_ok;
      const double ul = ts::utility(t, r.left[b]);
      rs += (1 - logistic(0.3 + ul - ts::utility(t, with(r.right[b], 1, 1)))) -
            (1 - logistic(0.3 + ul - ts::utility(t, with(r.right[b], 1, 0))));
    }
    if (r.left[b][0] != 0) {
      ++left_ok;
      const double ur = ts::utility(t, r.right[b]);
      ls += logistic(0.3 + ts::utility(t, with(r.left[b], 1, 1)) - ur) -
            logistic(0.3 + ts::utility(t, with(r.left[b], 1, 0)) - ur);
    }
  }
  CHECK(right.support == right_ok);
  CHECK(left.support == left_ok);
  CHECK(std::abs(right.value - rs / right_ok) < 1e-12);
  CHECK(std::abs(left.value - ls / left_ok) < 1e-12);
  CHECK(std::abs(fx.amce(1, 1, 0, 0).value - 0.5 * (rs / right_ok + ls / left_ok)) < 1e-12);
}

TEST_CASE("uniform marginalization with restrictions that empty the support is an error") {
  const std::vector<int> L{2, 2};
  Dataset d = factorial_all(L, 1);
  d.factors[1].restrictions.push_back({0, {{0, 0}, {0, 1}}});
  std::mt19937_64 rng(8);
  const Effects fx = effects_for(d, {ts::random_truth(L, 1.0, 0.3, rng)}, 0.0);
  CHECK_THROWS_AS(fx.amce(1, 1, 0, 0, Marginalization::uniform), InputError);
}

TEST_CASE("marginal means: null model, relation to AMCE, average over levels") {
  const std::vector<int> L{3, 2};
  const Dataset d = pairs_all(L);
  ts::Truth zero;
  zero.main = {{0, 0, 0}, {0, 0}};
  zero.cell.assign(2, std::vector<Eigen::MatrixXd>(2));
  zero.cell[0][1] = Eigen::MatrixXd::Zero(3, 2);
  const Effects null = effects_for(d, {zero}, 0.0);
  CHECK(null.marginal_mean(0, 1, 0).value == 0.5);

  std::mt19937_64 rng(9);
  const ts::Truth t = ts::random_truth(L, 1.0, 0.5, rng);
  const Effects fx = effects_for(d, {t}, 0.5);
  for (int l = 0; l < 3; ++l)
    for (int lp = 0; lp < 3; ++lp)
      CHECK(std::abs(fx.marginal_mean(0, l, 0).value - fx.marginal_mean(0, lp, 0).value -
                     fx.amce(0, l, lp, 0).value) < 1e-12);
  const Effects sym = effects_for(d, {t}, 0.0);
  double avg = 0.0;
  for (int l = 0; l < 3; ++l) {
    const double mm = sym.marginal_mean(0, l, 0).value;
    CHECK(mm >= 0.0);
    CHECK(mm <= 1.0);
    avg += mm / 3;
  }
  CHECK(std::abs(avg - 0.5) < 1e-12);
}

TEST_CASE("moderator effects: sign, sum over clusters, zero contrast") {
  const std::vector<int> L{2, 2};
  std::mt19937_64 rng(10);
  const ts::Truth t0 = ts::random_truth(L, 1.0, 0.3, rng), t1 = ts::random_truth(L, 1.0, 0.3, rng);
  const Dataset d = factorial_all(L, 10, 3);
  for (double c : {1.3, -0.8}) {
    Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(3, 2);
    phi(1, 1) = c;
    const Effects fx = effects_for(d, {t0, t1}, 0.0, true, phi);
    const Estimate e1 = fx.moderator_effect(1, -1.0, 1.0, 1);
    const Estimate e0 = fx.moderator_effect(1, -1.0, 1.0, 0);
    CHECK((e1.value > 0) == (c > 0));
    CHECK(std::abs(e0.value + e1.value) < 1e-12);
    CHECK(fx.moderator_effect(2, 0.4, 0.4, 1).value == 0.0);
    CHECK(fx.moderator_effect(2, 0.4, 0.4, 1).se == 0.0);
    // moderator 2 has no effect on membership
    CHECK(std::abs(fx.moderator_effect(2, -1.0, 1.0, 1).value) < 1e-15);
  }
  const Effects fx = effects_for(d, {t0, t1}, 0.0);
  CHECK_THROWS_AS(fx.moderator_effect(0, 0.0, 1.0, 0), InputError);
}

TEST_CASE("moderator contrast points and constant covariates") {
  const std::vector<int> L{2, 2};
  Dataset d = factorial_all(L, 5, 4);
  for (int r = 0; r < d.rows(); ++r) {
    d.moderators(r, 2) = r % 3 == 0 ? 1.0 : 0.0;
    d.moderators(r, 3) = 2.5;
  }
  for (int r = 0; r < d.rows(); ++r) d.moderators(r, 1) = r + 1;  // 1..20
  std::mt19937_64 rng(12);
  const Effects fx = effects_for(d, {ts::random_truth(L, 1.0, 0.3, rng), ts::random_truth(L, 1.0, 0.3, rng)}, 0.0);
  CHECK(fx.moderator_contrast(1) == std::pair<double, double>{5.0, 15.0});
  CHECK(fx.moderator_contrast(2) == std::pair<double, double>{0.0, 1.0});
  EffectRequest req;
  const EffectTable tab = fx.table(req);
  REQUIRE(tab.warnings.size() == 1);
  CHECK(tab.warnings[0].find("x3") != std::string::npos);
  int constant_rows = 0;
  for (const auto& row : tab.rows)
    if (row.quantity == "moderator" && row.factor == "x3") {
      CHECK(row.estimate == 0.0);
      ++constant_rows;
    }
  CHECK(constant_rows == 2);
}

TEST_CASE("analytic gradients match finite differences of the plug-in estimates") {
  const std::vector<int> L{3, 2, 2};
  std::mt19937_64 rng(13);
  const ts::Truth t0 = ts::random_truth(L, 1.0, 0.4, rng), t1 = ts::random_truth(L, 1.0, 0.4, rng);
  Dataset d = ts::forced_choice_data(L, {t0, t1}, std::vector<int>{0, 1, 0, 1, 0, 1, 0, 1}, 5, rng, 2);
  ModelSpec spec;
  const Problem pr = build_problem(d, spec);
  ModelState s = hand_state(pr, {t0, t1}, 0.2);
  s.phi(0, 1) = 0.3;
  s.phi(1, 1) = -0.7;
  s.phi(2, 1) = 0.4;
  const CovarianceBundle cb = covariance_bundle(s, pr);
  const Eigen::VectorXd theta = free_parameters(cb.state, cb.layout);
  auto at = [&](const Eigen::VectorXd& th) {
    CovarianceBundle c = cb;
    set_free_parameters(c.state, c.layout, th);
    return Effects(c, pr, d);
  };
  const Effects base(cb, pr, d);
  using Fn = std::function<Estimate(const Effects&)>;
  const std::vector<Fn> quantities{
      [](const Effects& e) { return e.amce(0, 2, 0, 1); },
      [](const Effects& e) { return e.amie(0, 2, {1, 0}, {1, 0}, 0); },
      [](const Effects& e) { return e.marginal_mean(0, 1, 1); },
      [](const Effects& e) { return e.amce(1, 1, 0, 0, Marginalization::uniform); },
      [](const Effects& e) { return e.moderator_effect(1, -0.5, 0.8, 1); },
  };
  const double h = 1e-6;
  for (const Fn& q : quantities) {
    const Eigen::VectorXd g = q(base).gradient;
    REQUIRE(g.size() == theta.size());
    for (Eigen::Index a = 0; a < theta.size(); ++a) {
      Eigen::VectorXd p = theta, m = theta;
      p(a) += h;
      m(a) -= h;
      const double fd = (q(at(p)).value - q(at(m)).value) / (2 * h);
      CHECK(g(a) == doctest::Approx(fd).epsilon(1e-6).scale(1e-3));
    }
    CHECK(q(base).se == doctest::Approx(std::sqrt(g.dot(cb.covariance * g))));
  }
}

TEST_CASE("fused levels give exactly zero contrasts with zero standard error") {
  const std::vector<int> L{3, 2, 2};
  std::mt19937_64 rng(14);
  ts::Truth t = ts::random_truth(L, 1.2, 0.2, rng);
  t.main[2] = {0.0, 0.0};
  t.cell[0][2].setZero();
  t.cell[1][2].setZero();
  Dataset d = ts::forced_choice_data(L, {t}, std::vector<int>(60, 0), 6, rng);
  ModelSpec spec;
  const Problem pr = build_problem(d, spec);
  FitOptions opts;
  const FitResult fr = fit(pr, 1, 40.0, 1.0, 0.25, opts);
  const CovarianceBundle cb = covariance_bundle(fr.state, pr);
  const Effects fx(cb, pr, d);
  const Eigen::VectorXd raw = fx.raw_coefficients(0);
  int fused = 0;
  for (int j = 0; j < 3; ++j)
    for (int l = 0; l < L[j]; ++l)
      for (int lp = l + 1; lp < L[j]; ++lp) {
        const Estimate e = fx.amce(j, l, lp, 0);
        if (raw(pr.layout.main_col(j, l)) != raw(pr.layout.main_col(j, lp))) continue;
        bool cells_equal = true;
        for (int h = 0; h < 3; ++h)
          if (h != j)
            for (int m = 0; m < L[h]; ++m)
              cells_equal &= raw(pr.layout.cell_col(j, l, h, m)) == raw(pr.layout.cell_col(j, lp, h, m));
        if (!cells_equal) continue;
        CHECK(e.value == 0.0);
        CHECK(e.se == 0.0);
        ++fused;
      }
  CHECK(fused > 0);
}

TEST_CASE("weighted quantiles and cluster profiles") {
  const std::vector<double> v{3, 1, 4, 1, 5, 9, 2, 6};
  const std::vector<double> ones(v.size(), 1.0);
  CHECK(weighted_quantile(v, ones, 0.5) == 3.0);
  CHECK(weighted_quantile(v, ones, 0.25) == 1.0);
  CHECK(weighted_quantile(v, ones, 1.0) == 9.0);
  // uniform weights of any size equal the unweighted quantile
  const std::vector<double> third(v.size(), 1.0 / 3.0);
  for (double q : {0.1, 0.25, 0.5, 0.75, 0.9}) CHECK(weighted_quantile(v, third, q) == weighted_quantile(v, ones, q));
  // hard memberships equal the subgroup quantile
  const std::vector<double> hard{1, 0, 1, 0, 1, 0, 1, 0};
  const std::vector<double> sub{3, 4, 5, 2};
  const std::vector<double> sub_ones(4, 1.0);
  for (double q : {0.25, 0.5, 0.75}) CHECK(weighted_quantile(v, hard, q) == weighted_quantile(sub, sub_ones, q));

  const std::vector<int> L{2, 2};
  std::mt19937_64 rng(15);
  const Dataset d = factorial_all(L, 5, 2);
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(2, 2);
  phi(1, 1) = 0.8;
  const Effects fx = effects_for(d, {ts::random_truth(L, 1, 0.3, rng), ts::random_truth(L, 1, 0.3, rng)}, 0.0, true, phi);
  const auto prof = fx.cluster_profiles();
  REQUIRE(prof.size() == 2);
  CHECK(prof[0].pi_bar + prof[1].pi_bar == doctest::Approx(1.0));
  CHECK(prof[0].mean_responsibility + prof[1].mean_responsibility == doctest::Approx(1.0));
  REQUIRE(prof[0].moderators.size() == 1);
  CHECK(prof[0].moderators[0].q25 <= prof[0].moderators[0].median);
  CHECK(prof[0].moderators[0].median <= prof[0].moderators[0].q75);
}

TEST_CASE("K = 1 mains-only fit on a balanced factorial reproduces the difference in means") {
  const std::vector<int> L{3};
  Dataset d;
  d.factors = ts::factors(L);
  d.kind = DesignKind::factorial;
  // success counts per level out of 40
  const int succ[] = {12, 25, 31};
  std::vector<double> yv;
  for (int l = 0; l < 3; ++l)
    for (int r = 0; r < 40; ++r) {
      d.left.push_back({l});
      yv.push_back(r < succ[l] ? 1.0 : 0.0);
    }
  fill_rows(d, static_cast<int>(d.left.size()), 1);
  d.y = Eigen::Map<Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));
  ModelSpec spec;
  spec.interactions = false;
  const Problem pr = build_problem(d, spec);
  FitOptions opts;
  opts.tol_objective = 1e-14;
  opts.tol_param = 1e-11;
  opts.max_iterations = 20000;
  const FitResult fr = fit(pr, 1, 1e-8, 1.0, 0.25, opts);
  const Effects fx(covariance_bundle(fr.state, pr), pr, d);
  for (int l = 1; l < 3; ++l)
    CHECK(std::abs(fx.amce(0, l, 0, 0).value - (succ[l] - succ[0]) / 40.0) < 1e-6);
}
