#pragma once

// Small synthetic experiments for unit tests. Everything here is generated
// directly from level indices, independent of the library's encoders.

#include "cjmix/design.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace testing_support {

inline std::vector<cjmix::FactorSpec> factors(const std::vector<int>& levels, bool ordered_last = false) {
  std::vector<cjmix::FactorSpec> out;
  for (std::size_t j = 0; j < levels.size(); ++j) {
    cjmix::FactorSpec f;
    f.name = "f" + std::to_string(j);
    for (int l = 0; l < levels[j]; ++l) f.levels.push_back("l" + std::to_string(l));
    f.ordered = ordered_last && j + 1 == levels.size();
    out.push_back(std::move(f));
  }
  return out;
}

// Per-cluster raw effects: main effects per factor and level, plus pairwise
// interaction tables, all de-meaned so they satisfy the sum-to-zero rules.
struct Truth {
  std::vector<std::vector<double>> main;               // [j][l]
  std::vector<std::vector<Eigen::MatrixXd>> cell;      // [j][h] for j < h, L_j x L_h
};

inline Truth random_truth(const std::vector<int>& levels, double main_sd, double int_sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const int J = static_cast<int>(levels.size());
  Truth t;
  t.main.resize(J);
  t.cell.assign(J, std::vector<Eigen::MatrixXd>(J));
  for (int j = 0; j < J; ++j) {
    double s = 0.0;
    for (int l = 0; l < levels[j]; ++l) {
      t.main[j].push_back(main_sd * nd(rng));
      s += t.main[j].back();
    }
    for (auto& v : t.main[j]) v -= s / levels[j];
  }
  for (int j = 0; j < J; ++j)
    for (int h = j + 1; h < J; ++h) {
      Eigen::MatrixXd m(levels[j], levels[h]);
      for (int a = 0; a < levels[j]; ++a)
        for (int b = 0; b < levels[h]; ++b) m(a, b) = int_sd * nd(rng);
      // double centering
      m.rowwise() -= m.colwise().mean();
      m.colwise() -= m.rowwise().mean();
      t.cell[j][h] = m;
    }
  return t;
}

inline double utility(const Truth& t, const std::vector<int>& prof) {
  const int J = static_cast<int>(prof.size());
  double u = 0.0;
  for (int j = 0; j < J; ++j) u += t.main[j][prof[j]];
  for (int j = 0; j < J; ++j)
    for (int h = j + 1; h < J; ++h)
      if (t.cell[j][h].size()) u += t.cell[j][h](prof[j], prof[h]);
  return u;
}

// Forced-choice data: N respondents in clusters given by `member`, `tasks` pairs each.
inline cjmix::Dataset forced_choice_data(const std::vector<int>& levels, const std::vector<Truth>& truths,
                                         const std::vector<int>& member, int tasks, std::mt19937_64& rng,
                                         int extra_moderators = 1) {
  cjmix::Dataset d;
  d.factors = factors(levels);
  d.kind = cjmix::DesignKind::forced_choice;
  const int N = static_cast<int>(member.size());
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  d.moderators.resize(N, 1 + extra_moderators);
  std::vector<double> yv;
  for (int i = 0; i < N; ++i) {
    d.moderators(i, 0) = 1.0;
    for (int c = 0; c < extra_moderators; ++c) d.moderators(i, 1 + c) = nd(rng) + (c == 0 ? 1.5 * member[i] : 0.0);
    d.respondent_ids.push_back("r" + std::to_string(i));
    for (int t = 0; t < tasks; ++t) {
      std::vector<int> a, b;
      for (int L : levels) {
        a.push_back(std::uniform_int_distribution<int>(0, L - 1)(rng));
        b.push_back(std::uniform_int_distribution<int>(0, L - 1)(rng));
      }
      const double v = utility(truths[member[i]], a) - utility(truths[member[i]], b);
      yv.push_back(ud(rng) < 1.0 / (1.0 + std::exp(-v)) ? 1.0 : 0.0);
      d.left.push_back(a);
      d.right.push_back(b);
      d.respondent.push_back(i);
      d.task_ids.push_back(std::to_string(t));
    }
  }
  d.y = Eigen::Map<Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));
  for (int c = 0; c <= extra_moderators; ++c) d.moderator_names.push_back(c == 0 ? "(intercept)" : "x" + std::to_string(c));
  return d;
}

}  // namespace testing_support
