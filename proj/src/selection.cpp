#include "cjmix/selection.hpp"

#include "cjmix/errors.hpp"
#include "cjmix/inference.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace cjmix {

double hat_trace_dense(const Eigen::MatrixXd& data, const Eigen::MatrixXd& ridge) {
  const Eigen::MatrixXd total = data + ridge;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(total);
  if (ldlt.info() != Eigen::Success) throw NumericalError("hat matrix system could not be factorized");
  return ldlt.solve(data).trace();
}

double hat_trace_stochastic(const Eigen::MatrixXd& data, const Eigen::MatrixXd& ridge, int probes,
                            std::uint64_t seed, const Eigen::MatrixXd& basis) {
  const Eigen::MatrixXd total = data + ridge;
  Eigen::ConjugateGradient<Eigen::MatrixXd, Eigen::Lower | Eigen::Upper> cg(total);
  cg.setTolerance(1e-10);
  const bool deflate = basis.size() > 0;
  const Eigen::Index n = deflate ? basis.cols() : data.rows();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  double acc = 0.0;
  Eigen::VectorXd z(n);
  for (int p = 0; p < probes; ++p) {
    for (Eigen::Index i = 0; i < n; ++i) z(i) = coin(rng) ? 1.0 : -1.0;
    if (deflate) {
      const Eigen::VectorXd v = basis * z;
      acc += v.dot(cg.solve(data * v));
    } else {
      acc += z.dot(cg.solve(data * z));
    }
  }
  return acc / probes;
}

namespace {

// Orthonormal basis of the coordinates the design can see: mu plus, per
// cluster, the row space of lift * free_basis. The hat matrix vanishes on the
// complement, so probing only this subspace leaves the trace unchanged.
Eigen::MatrixXd identified_basis(const ModelState& s, const Problem& pr, const RidgeSystem& sys) {
  const Eigen::Index D = sys.data.rows();
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(D, D);
  v(0, 0) = 1.0;
  Eigen::Index col = 1;
  for (int k = 0; k < s.clusters(); ++k) {
    const Eigen::MatrixXd lq = pr.lift * s.free_basis[k];
    if (lq.cols() == 0) continue;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(lq, Eigen::ComputeFullV);
    const Eigen::VectorXd& sv = svd.singularValues();
    Eigen::Index r = 0;
    while (r < sv.size() && sv(r) > 1e-10 * sv(0)) ++r;
    v.block(sys.offset[k], col, lq.cols(), r) = svd.matrixV().leftCols(r);
    col += r;
  }
  v.conservativeResize(D, col);
  return v;
}

}  // namespace

double degrees_of_freedom(const ModelState& s, const Problem& pr, const DfOptions& opts) {
  const ModelState b = bind_and_project(s, pr);
  ModelState c = b;
  c.responsibilities = estep_responsibilities(c, pr);
  c.pg_weights = estep_pg(c, pr);
  c.inv_tau2 = estep_tau(c, pr, nullptr);
  const RidgeSystem sys = ridge_system(c, pr, opts.threads);
  const double tr = sys.data.rows() <= opts.dense_limit
                        ? hat_trace_dense(sys.data, sys.ridge)
                        : hat_trace_stochastic(sys.data, sys.ridge, opts.probes, opts.seed,
                                               identified_basis(c, pr, sys));
  return tr + static_cast<double>(pr.moderator_dim()) * (s.clusters() - 1);
}

double bic(double log_likelihood, double df, int n_rows) {
  return -2.0 * log_likelihood + df * std::log(static_cast<double>(n_rows));
}

TuneResult search_lambda(const std::function<TuneEvaluation(double)>& objective, const TuneOptions& opts) {
  if (!(opts.lambda_lo > 0.0) || !(opts.lambda_hi > opts.lambda_lo))
    throw InputError("lambda bounds must satisfy 0 < lo < hi");
  if (opts.budget < opts.grid_points || opts.grid_points < 2)
    throw InputError("tuning budget must cover the coarse grid (at least " + std::to_string(opts.grid_points) + ")");

  TuneResult res;
  const double a0 = std::log(opts.lambda_lo), b0 = std::log(opts.lambda_hi);
  std::map<double, int> seen;  // log lambda -> evaluation index
  auto eval = [&](double loglam, const std::string& why) {
    if (auto it = seen.find(loglam); it != seen.end()) return res.evaluations[it->second].bic;
    TuneEvaluation e = objective(std::exp(loglam));
    res.evaluations.push_back(e);
    seen[loglam] = static_cast<int>(res.evaluations.size()) - 1;
    std::ostringstream os;
    os << why << " lambda=" << e.lambda << " bic=" << e.bic << " df=" << e.df << (e.converged ? "" : " (not converged)");
    res.trace.push_back(os.str());
    return e.converged ? e.bic : std::numeric_limits<double>::infinity();
  };

  const int G = opts.grid_points;
  std::vector<double> grid(G);
  for (int i = 0; i < G; ++i) grid[i] = a0 + (b0 - a0) * i / (G - 1);
  std::vector<double> fgrid(G);
  for (int i = 0; i < G; ++i) fgrid[i] = eval(grid[i], "grid");
  const int inc = static_cast<int>(std::min_element(fgrid.begin(), fgrid.end()) - fgrid.begin());

  double lo = grid[std::max(0, inc - 1)], hi = grid[std::min(G - 1, inc + 1)];
  res.trace.push_back("bracket [" + std::to_string(std::exp(lo)) + ", " + std::to_string(std::exp(hi)) + "]");
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - ratio * (hi - lo), d = lo + ratio * (hi - lo);
  double fc = 0.0, fd = 0.0;
  bool have_c = false, have_d = false;
  while (static_cast<int>(res.evaluations.size()) < opts.budget) {
    if (!have_c) {
      fc = eval(c, "golden");
      have_c = true;
      continue;
    }
    if (!have_d) {
      fd = eval(d, "golden");
      have_d = true;
      continue;
    }
    if (fc <= fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - ratio * (hi - lo);
      have_c = false;
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + ratio * (hi - lo);
      have_d = false;
    }
  }

  // Minimum over converged evaluations; fall back to all if none converged.
  bool any_converged = false;
  for (const auto& e : res.evaluations) any_converged |= e.converged;
  if (!any_converged) {
    std::ostringstream os;
    os << "no lambda evaluation converged (" << res.evaluations.size() << " fits)";
    throw NumericalError(os.str());
  }
  for (int i = 0; i < static_cast<int>(res.evaluations.size()); ++i) {
    const auto& e = res.evaluations[i];
    if (!e.converged) continue;
    if (res.best_index < 0 || e.bic < res.evaluations[res.best_index].bic) res.best_index = i;
  }
  res.best_lambda = res.evaluations[res.best_index].lambda;
  const double lb = std::log(res.best_lambda);
  res.boundary = std::abs(lb - a0) < 1e-12 || std::abs(lb - b0) < 1e-12;
  if (res.boundary) res.trace.push_back("minimizer at the boundary of the search interval");
  return res;
}

TuneResult tune_lambda(const Problem& pr, int K, double gamma, double sigma2_phi, const FitOptions& fit_opts,
                       const TuneOptions& opts) {
  std::vector<std::pair<double, FitResult>> fits;
  DfOptions dfo;
  dfo.threads = fit_opts.threads;
  auto objective = [&](double lambda) {
    const ModelState* warm = nullptr;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [lam, fr] : fits) {
      const double dist = std::abs(std::log(lam) - std::log(lambda));
      if (dist < best) {
        best = dist;
        warm = &fr.state;
      }
    }
    // A warm start can inherit a poor mode from a distant lambda; keep whichever
    // of the warm and cold fits reaches the higher log posterior.
    FitResult fr = fit(pr, K, lambda, gamma, sigma2_phi, fit_opts);
    if (warm) {
      FitResult fw = fit(pr, K, lambda, gamma, sigma2_phi, fit_opts, warm);
      if (fw.log_posterior > fr.log_posterior) fr = std::move(fw);
    }
    TuneEvaluation e;
    e.lambda = lambda;
    e.df = degrees_of_freedom(fr.state, pr, dfo);
    e.log_likelihood = fr.log_likelihood;
    e.bic = bic(fr.log_likelihood, e.df, pr.rows());
    e.converged = fr.converged;
    fits.emplace_back(lambda, std::move(fr));
    return e;
  };
  TuneResult res = search_lambda(objective, opts);
  for (auto& [lam, fr] : fits)
    if (lam == res.best_lambda) {
      res.best_fit = std::move(fr);
      break;
    }
  return res;
}

}  // namespace cjmix
