#include "doctest.h"

#include "cjmix/errors.hpp"
#include "cjmix/selection.hpp"
#include "support.hpp"

#include <cmath>

using namespace cjmix;
namespace ts = testing_support;

namespace {

Problem toy(int K, int N, int tasks, std::uint64_t seed) {
  const std::vector<int> L{3, 3, 2};
  std::mt19937_64 rng(seed);
  std::vector<ts::Truth> truths;
  for (int k = 0; k < K; ++k) truths.push_back(ts::random_truth(L, 1.0, 0.3, rng));
  std::vector<int> member(N);
  for (int i = 0; i < N; ++i) member[i] = i % K;
  return build_problem(ts::forced_choice_data(L, truths, member, tasks, rng), ModelSpec{});
}

}  // namespace

TEST_CASE("BIC arithmetic") {
  CHECK(bic(0.0, 7.0, 100) == doctest::Approx(7.0 * std::log(100.0)));
  CHECK(bic(-50.0, 4.0, 80) - bic(-50.0, 3.0, 80) == doctest::Approx(std::log(80.0)));
  // duplicating the data doubles the deviance and uses ln(2n)
  CHECK(bic(-100.0, 5.0, 200) == doctest::Approx(200.0 + 5.0 * std::log(200.0)));
}

TEST_CASE("degrees of freedom at the extremes of lambda") {
  const Problem pr = toy(1, 60, 8, 1);
  FitOptions opts;
  const FitResult small = fit(pr, 1, 1e-6, 1.0, 0.25, opts);
  // the overlapping expansion adds directions the data cannot see; the
  // identified dimension is that of the plain constrained model
  const int identified = build_constraints(pr.layout).reduced_dim();
  CHECK(std::abs(degrees_of_freedom(small.state, pr) - (identified + 1.0)) < 0.5);
  const FitResult big = fit(pr, 1, 1e6, 1.0, 0.25, opts);
  CHECK(std::abs(degrees_of_freedom(big.state, pr) - 1.0) < 0.5);

  const Problem two = toy(2, 60, 8, 2);
  const FitResult huge = fit(two, 2, 1e6, 1.0, 0.25, opts);
  CHECK(std::abs(degrees_of_freedom(huge.state, two) - (1.0 + two.moderator_dim())) < 0.5);
}

TEST_CASE("dense and stochastic traces agree at a moderate lambda") {
  const Problem pr = toy(2, 80, 8, 3);
  FitOptions opts;
  const FitResult r = fit(pr, 2, 3.0, 1.0, 0.25, opts);
  DfOptions dense, stoch;
  stoch.dense_limit = 0;
  const double a = degrees_of_freedom(r.state, pr, dense);
  const double b = degrees_of_freedom(r.state, pr, stoch);
  CHECK(std::abs(a - b) / a < 0.01);
}

TEST_CASE("df does not depend on task order within respondents") {
  const Problem pr = toy(1, 30, 6, 4);
  FitOptions opts;
  const FitResult r = fit(pr, 1, 2.0, 1.0, 0.25, opts);
  Problem rev = pr;
  for (int i = 0; i < pr.respondents(); ++i)
    for (int t = pr.row_start[i], u = pr.row_start[i + 1] - 1; t < pr.row_start[i + 1]; ++t, --u) {
      rev.design.row(t) = pr.design.row(u);
      rev.y(t) = pr.y(u);
    }
  CHECK(degrees_of_freedom(r.state, rev) == doctest::Approx(degrees_of_freedom(r.state, pr)).epsilon(1e-9));
}

TEST_CASE("search: V-shaped objective, budget contract, boundary flag") {
  const double truth = std::log(3.7);
  auto vshape = [&](double lam) {
    TuneEvaluation e;
    e.lambda = lam;
    e.bic = std::abs(std::log(lam) - truth);
    e.df = 1.0;
    e.converged = true;
    return e;
  };
  TuneOptions o;
  o.lambda_lo = 1e-2;
  o.lambda_hi = 1e2;
  const TuneResult r = search_lambda(vshape, o);
  CHECK(r.evaluations.size() == 15);
  const double width = (std::log(1e2) - std::log(1e-2)) / 4;
  CHECK(std::abs(std::log(r.best_lambda) - truth) <= width);
  for (const auto& e : r.evaluations) CHECK(r.evaluations[r.best_index].bic <= e.bic);
  // a dense sweep confirms the refinement beats the coarse grid
  CHECK(std::abs(std::log(r.best_lambda) - truth) < std::abs(std::log(1.0) - truth));

  o.budget = 5;
  CHECK(search_lambda(vshape, o).evaluations.size() == 5);

  o.budget = 15;
  auto decreasing = [](double lam) {
    TuneEvaluation e;
    e.lambda = lam;
    e.bic = -std::log(lam);
    e.df = 1.0;
    e.converged = true;
    return e;
  };
  const TuneResult d = search_lambda(decreasing, o);
  CHECK(d.best_lambda == doctest::Approx(1e2));
  CHECK(d.boundary);

  o.budget = 4;
  CHECK_THROWS_AS(search_lambda(vshape, o), InputError);
  o.budget = 5;
  auto never = [](double lam) {
    TuneEvaluation e;
    e.lambda = lam;
    return e;
  };
  CHECK_THROWS_AS(search_lambda(never, o), NumericalError);
}

TEST_CASE("tuning on a toy problem returns its recorded BIC minimizer") {
  const Problem pr = toy(1, 40, 6, 5);
  FitOptions fo;
  TuneOptions o;
  o.budget = 7;
  const TuneResult r = tune_lambda(pr, 1, 1.0, 0.25, fo, o);
  CHECK(r.evaluations.size() == 7);
  REQUIRE(r.best_fit.has_value());
  CHECK(r.best_fit->state.lambda == r.best_lambda);
  for (const auto& e : r.evaluations)
    if (e.converged) CHECK(r.evaluations[r.best_index].bic <= e.bic);
}
