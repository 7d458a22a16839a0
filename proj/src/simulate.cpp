#include "cjmix/simulate.hpp"

#include "cjmix/errors.hpp"
#include "cjmix/inference.hpp"
#include "cjmix/selection.hpp"
#include "parallel.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/random/bernoulli_distribution.hpp>
#include <boost/random/discrete_distribution.hpp>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/seed_seq.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cjmix {

namespace {

using Engine = boost::random::mt19937_64;

Engine stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  boost::random::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                              static_cast<std::uint32_t>(b)};
  return Engine(seq);
}

double logistic(double v) { return sigmoid(v); }

double utility(const std::vector<std::vector<double>>& beta, const Profile& p) {
  double u = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) u += beta[j][p[j]];
  return u;
}

}  // namespace

void SimDesign::validate() const {
  if (factors < 1 || static_cast<int>(levels.size()) != factors) throw InputError("simulation: one level count per factor");
  for (int L : levels)
    if (L < 2) throw InputError("simulation: every factor needs at least two levels");
  if (clusters < 1 || clusters > 8) throw InputError("simulation: clusters must be in 1..8");
  if (respondents < clusters) throw InputError("simulation: fewer respondents than clusters");
  if (tasks < 1) throw InputError("simulation: tasks must be positive");
  if (moderator_count < 0) throw InputError("simulation: negative moderator count");
  if (!(std::abs(moderator_rho) < 1.0)) throw InputError("simulation: moderator correlation must lie in (-1, 1)");
  if (truth_mc_draws < 1) throw InputError("simulation: truth_mc_draws must be positive");
}

void draw_true_coefficients(SimDesign& sd) {
  sd.validate();
  Engine rng = stream(sd.coef_seed, 0);
  boost::random::normal_distribution<double> beta_draw(0.0, std::sqrt(1.0 / 3.0));
  sd.beta_true.assign(sd.clusters, {});
  for (int k = 0; k < sd.clusters; ++k) {
    for (int j = 0; j < sd.factors; ++j) {
      const int L = sd.levels[j];
      const int unique = boost::random::uniform_int_distribution<int>(1, std::min(3, L))(rng);
      std::vector<double> b(L, 0.0);
      if (unique > 1) {
        for (int u = 0; u < unique; ++u) b[u] = beta_draw(rng);
        for (int u = unique; u < L; ++u) b[u] = b[boost::random::uniform_int_distribution<int>(0, unique - 1)(rng)];
        const double mean = std::accumulate(b.begin(), b.end(), 0.0) / L;
        for (double& v : b) v -= mean;
      }
      sd.beta_true[k].push_back(std::move(b));
    }
  }
  boost::random::normal_distribution<double> phi_draw(0.0, std::sqrt(2.0));
  sd.phi_true = Eigen::MatrixXd::Zero(1 + sd.moderator_count, sd.clusters);
  for (int k = 1; k < sd.clusters; ++k)
    for (int a = 0; a <= sd.moderator_count; ++a) sd.phi_true(a, k) = phi_draw(rng);
}

void true_amces(SimDesign& sd, int threads) {
  if (sd.beta_true.empty()) draw_true_coefficients(sd);
  std::vector<SimDesign::Truth> out;
  for (int k = 0; k < sd.clusters; ++k)
    for (int j = 0; j < sd.factors; ++j)
      for (int l = 1; l < sd.levels[j]; ++l) out.push_back({k, j, l, 0.0, 0.0});
  const int Q = static_cast<int>(out.size());

  constexpr int chunk = 50'000;
  const long long draws = sd.truth_mc_draws;
  const int chunks = static_cast<int>((draws + chunk - 1) / chunk);
  std::vector<Eigen::ArrayXd> sum(chunks, Eigen::ArrayXd::Zero(Q)), sumsq(chunks, Eigen::ArrayXd::Zero(Q));
  detail::for_each_chunk(chunks, 1, threads, [&](int c, int, int) {
    Engine rng = stream(sd.coef_seed, 1, static_cast<std::uint64_t>(c));
    const long long begin = static_cast<long long>(c) * chunk;
    const long long end = std::min(draws, begin + chunk);
    Profile left(sd.factors), right(sd.factors);
    for (long long d = begin; d < end; ++d) {
      for (int j = 0; j < sd.factors; ++j) {
        left[j] = boost::random::uniform_int_distribution<int>(0, sd.levels[j] - 1)(rng);
        right[j] = boost::random::uniform_int_distribution<int>(0, sd.levels[j] - 1)(rng);
      }
      int q = 0;
      for (int k = 0; k < sd.clusters; ++k) {
        const auto& b = sd.beta_true[k];
        const double vl = utility(b, left), vr = utility(b, right);
        for (int j = 0; j < sd.factors; ++j) {
          const double l_rest = vl - b[j][left[j]], r_rest = vr - b[j][right[j]];
          const double l0 = logistic(sd.mu + l_rest + b[j][0] - vr);
          const double r0 = logistic(sd.mu + vl - (r_rest + b[j][0]));
          for (int l = 1; l < sd.levels[j]; ++l, ++q) {
            const double left_effect = logistic(sd.mu + l_rest + b[j][l] - vr) - l0;
            const double right_effect = r0 - logistic(sd.mu + vl - (r_rest + b[j][l]));
            const double x = 0.5 * (left_effect + right_effect);
            sum[c](q) += x;
            sumsq[c](q) += x * x;
          }
        }
      }
    }
  });
  Eigen::ArrayXd s = Eigen::ArrayXd::Zero(Q), s2 = Eigen::ArrayXd::Zero(Q);
  for (int c = 0; c < chunks; ++c) {
    s += sum[c];
    s2 += sumsq[c];
  }
  const double n = static_cast<double>(draws);
  for (int q = 0; q < Q; ++q) {
    out[q].value = s(q) / n;
    const double var = std::max(0.0, s2(q) / n - out[q].value * out[q].value);
    out[q].mc_se = std::sqrt(var / n);
  }
  sd.amce_true = std::move(out);
}

SimData generate_dataset(const SimDesign& sd, int replicate) {
  sd.validate();
  if (sd.beta_true.empty()) throw InputError("simulation: true coefficients have not been drawn");
  Engine rng = stream(sd.data_seed, 2, static_cast<std::uint64_t>(replicate));
  const int p = sd.moderator_count;
  Eigen::MatrixXd sigma(p, p);
  for (int a = 0; a < p; ++a)
    for (int b = 0; b < p; ++b) sigma(a, b) = std::pow(sd.moderator_rho, std::abs(a - b));
  const Eigen::MatrixXd chol = p > 0 ? Eigen::MatrixXd(sigma.llt().matrixL()) : Eigen::MatrixXd();
  boost::random::normal_distribution<double> z(0.0, 1.0);

  SimData out;
  Dataset& d = out.data;
  d.kind = DesignKind::forced_choice;
  for (int j = 0; j < sd.factors; ++j) {
    FactorSpec f;
    f.name = "F" + std::to_string(j + 1);
    for (int l = 0; l < sd.levels[j]; ++l) f.levels.push_back("L" + std::to_string(l + 1));
    d.factors.push_back(std::move(f));
  }
  d.moderators.resize(sd.respondents, 1 + p);
  d.moderator_names.push_back("(intercept)");
  for (int a = 0; a < p; ++a) d.moderator_names.push_back("x" + std::to_string(a + 1));
  std::vector<double> y;
  const int width = static_cast<int>(std::to_string(sd.respondents).size());
  for (int i = 0; i < sd.respondents; ++i) {
    Eigen::VectorXd raw(p);
    for (int a = 0; a < p; ++a) raw(a) = z(rng);
    d.moderators(i, 0) = 1.0;
    if (p > 0) d.moderators.row(i).tail(p) = (chol * raw).transpose();
    Eigen::RowVectorXd eta = d.moderators.row(i) * sd.phi_true;
    eta.array() -= eta.maxCoeff();
    const Eigen::RowVectorXd pi = eta.array().exp() / eta.array().exp().sum();
    std::vector<double> w(pi.data(), pi.data() + pi.size());
    const int member = boost::random::discrete_distribution<int>(w.begin(), w.end())(rng);
    out.membership.push_back(member);

    std::string id = std::to_string(i + 1);
    d.respondent_ids.push_back("r" + std::string(width - id.size(), '0') + id);
    for (int t = 0; t < sd.tasks; ++t) {
      Profile left(sd.factors), right(sd.factors);
      for (int j = 0; j < sd.factors; ++j) {
        left[j] = boost::random::uniform_int_distribution<int>(0, sd.levels[j] - 1)(rng);
        right[j] = boost::random::uniform_int_distribution<int>(0, sd.levels[j] - 1)(rng);
      }
      const auto& b = sd.beta_true[member];
      const double pr = logistic(sd.mu + utility(b, left) - utility(b, right));
      y.push_back(boost::random::bernoulli_distribution<double>(pr)(rng) ? 1.0 : 0.0);
      d.left.push_back(std::move(left));
      d.right.push_back(std::move(right));
      d.respondent.push_back(i);
      d.task_ids.push_back(std::to_string(t + 1));
    }
  }
  d.y = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  return out;
}

double label_error(const Eigen::MatrixXd& responsibilities, std::span<const int> membership,
                   std::span<const int> perm) {
  double err = 0.0;
  const Eigen::Index K = responsibilities.cols();
  for (Eigen::Index i = 0; i < responsibilities.rows(); ++i)
    for (Eigen::Index k = 0; k < K; ++k)
      err += std::abs(responsibilities(i, perm[k]) - (membership[i] == k ? 1.0 : 0.0));
  return err;
}

std::vector<int> resolve_labels(const Eigen::MatrixXd& responsibilities, std::span<const int> membership) {
  const int K = static_cast<int>(responsibilities.cols());
  if (K > 8) throw InputError("label resolution enumerates K! permutations; K must be at most 8");
  if (static_cast<Eigen::Index>(membership.size()) != responsibilities.rows())
    throw InputError("membership and responsibilities disagree on the number of respondents");
  std::vector<int> perm(K), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_err = std::numeric_limits<double>::infinity();
  do {
    const double e = label_error(responsibilities, membership, perm);
    if (e < best_err) {
      best_err = e;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double correlation(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  if (n != b.size() || n < 2) throw InputError("correlation needs two equal-length samples of size >= 2");
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

RecoveryReport score_recovery(std::span<const ReplicateEstimates> replicates, std::span<const double> truth) {
  const int R = static_cast<int>(replicates.size());
  if (R < 2) throw InputError("recovery scoring needs at least two replicates");
  const std::size_t Q = truth.size();
  for (const auto& r : replicates)
    if (r.estimate.size() != Q || r.se.size() != Q) throw InputError("replicate estimates do not match the truth");
  const boost::math::normal standard;
  const double z95 = boost::math::quantile(standard, 0.975), z90 = boost::math::quantile(standard, 0.95);

  RecoveryReport rep;
  std::vector<double> all_est, all_truth;
  for (const auto& r : replicates) {
    rep.replicate_correlation.push_back(correlation(r.estimate, truth));
    all_est.insert(all_est.end(), r.estimate.begin(), r.estimate.end());
    all_truth.insert(all_truth.end(), truth.begin(), truth.end());
  }
  std::vector<double> sorted = rep.replicate_correlation;
  std::sort(sorted.begin(), sorted.end());
  rep.median_correlation = R % 2 ? sorted[R / 2] : 0.5 * (sorted[R / 2 - 1] + sorted[R / 2]);
  rep.pooled_correlation = correlation(all_est, all_truth);

  for (std::size_t q = 0; q < Q; ++q) {
    QuantityRecovery qr;
    qr.truth = truth[q];
    int c95 = 0, c90 = 0, p95 = 0, p90 = 0;
    for (const auto& r : replicates) {
      const double e = r.estimate[q], se = r.se[q], err = std::abs(e - truth[q]);
      qr.mean_estimate += e / R;
      qr.mean_se += se / R;
      const bool in95 = err <= z95 * se, in90 = err <= z90 * se;
      c95 += in95;
      c90 += in90;
      if (e != 0.0) {
        ++qr.nonzero;
        p95 += in95;
        p90 += in90;
      }
    }
    double ss = 0.0;
    for (const auto& r : replicates) ss += (r.estimate[q] - qr.mean_estimate) * (r.estimate[q] - qr.mean_estimate);
    qr.sd_estimate = std::sqrt(ss / (R - 1));
    qr.coverage95 = static_cast<double>(c95) / R;
    qr.coverage90 = static_cast<double>(c90) / R;
    const double nz = qr.nonzero;
    qr.post_coverage95 = nz > 0 ? p95 / nz : std::numeric_limits<double>::quiet_NaN();
    qr.post_coverage90 = nz > 0 ? p90 / nz : std::numeric_limits<double>::quiet_NaN();
    rep.quantities.push_back(qr);
  }
  return rep;
}

ReplicateResult run_replicate(const SimDesign& sd, int replicate, const ReplicateOptions& opts) {
  if (sd.amce_true.empty()) throw InputError("simulation: true AMCEs have not been computed");
  ReplicateResult res;
  res.sim = generate_dataset(sd, replicate);
  const Problem pr = build_problem(res.sim.data, opts.model);
  if (opts.lambda > 0.0) {
    res.fit = fit(pr, sd.clusters, opts.lambda, opts.gamma, opts.sigma2_phi, opts.fit);
  } else {
    TuneResult tr = tune_lambda(pr, sd.clusters, opts.gamma, opts.sigma2_phi, opts.fit, opts.tune);
    res.fit = std::move(*tr.best_fit);
    tr.best_fit.reset();
    res.tuning = std::move(tr);
  }
  const CovarianceBundle cb = covariance_bundle(res.fit.state, pr, 1e-4, opts.fit.threads);
  res.permutation = resolve_labels(estep_responsibilities(cb.state, pr), res.sim.membership);
  const Effects fx(cb, pr, res.sim.data, opts.fit.threads);
  for (const auto& t : sd.amce_true) {
    const Estimate e = fx.amce(t.factor, t.level, 0, res.permutation[t.cluster]);
    res.estimates.estimate.push_back(e.value);
    res.estimates.se.push_back(e.se);
  }
  return res;
}

}  // namespace cjmix
