#include "cjmix/engine.hpp"

#include "cjmix/errors.hpp"
#include "parallel.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>

namespace cjmix {

namespace {

// At most 64 row chunks; the size depends on n only.
int row_chunk(int n) { return std::max(256, (n + 63) / 64); }

double row_logsumexp(const Eigen::Ref<const Eigen::RowVectorXd>& a) {
  const double m = a.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((a.array() - m).exp().sum());
}

Eigen::MatrixXd sigma_phi(int K) {
  const int q = K - 1;
  Eigen::MatrixXd s = Eigen::MatrixXd::Constant(q, q, -1.0 / K);
  s.diagonal().setConstant((K - 1.0) / K);
  return s;
}

double log_prior_phi(const Eigen::MatrixXd& phi, double sigma2) {
  const int K = static_cast<int>(phi.cols());
  if (K <= 1) return 0.0;
  const Eigen::MatrixXd v = phi.rightCols(K - 1);
  return -0.5 * sigma2 * (v * sigma_phi(K)).cwiseProduct(v).sum();
}

double effective_rate(double lambda, double pibar, double gamma) {
  return gamma == 0.0 ? lambda : lambda * std::pow(pibar, gamma);
}

Eigen::VectorXd pack(const ModelState& s) {
  const int K = s.clusters();
  const Eigen::Index nb = s.beta.size();
  const Eigen::Index nphi = s.phi.rows() * (K - 1);
  Eigen::VectorXd v(1 + nb + nphi);
  v(0) = s.mu;
  v.segment(1, nb) = Eigen::Map<const Eigen::VectorXd>(s.beta.data(), nb);
  if (nphi > 0)
    v.tail(nphi) = Eigen::Map<const Eigen::VectorXd>(s.phi.rightCols(K - 1).eval().data(), nphi);
  return v;
}

void unpack(const Eigen::VectorXd& v, ModelState& s) {
  const int K = s.clusters();
  const Eigen::Index nb = s.beta.size();
  const Eigen::Index px = s.phi.rows();
  s.mu = v(0);
  s.beta = Eigen::Map<const Eigen::MatrixXd>(v.data() + 1, s.beta.rows(), K);
  if (K > 1) s.phi.rightCols(K - 1) = Eigen::Map<const Eigen::MatrixXd>(v.data() + 1 + nb, px, K - 1);
}

void project_beta(ModelState& s) {
  for (int k = 0; k < s.clusters(); ++k) {
    const Eigen::MatrixXd& q = s.free_basis[k];
    if (q.cols() == q.rows()) continue;
    s.beta.col(k) = q * (q.transpose() * s.beta.col(k));
  }
}

// Jacobi-preconditioned conjugate gradients on an SPD system, warm-started at x.
void pcg(const Eigen::MatrixXd& h, const Eigen::VectorXd& b, Eigen::VectorXd& x, double tol) {
  const Eigen::Index n = b.size();
  Eigen::VectorXd dinv = h.diagonal();
  for (Eigen::Index i = 0; i < n; ++i) dinv(i) = dinv(i) > 0.0 ? 1.0 / dinv(i) : 1.0;
  Eigen::VectorXd r = b - h * x;
  const double bnorm = std::max(b.norm(), 1e-300);
  Eigen::VectorXd z = dinv.cwiseProduct(r);
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  const int max_iter = std::max<int>(100, 10 * static_cast<int>(n));
  for (int it = 0; it < max_iter && r.norm() > tol * bnorm; ++it) {
    const Eigen::VectorXd hp = h * p;
    const double php = p.dot(hp);
    if (!(php > 0.0))
      throw NumericalError(
          "ridge system is singular; the fusion prior is improper for this design "
          "(check the propriety certificate)");
    const double alpha = rz / php;
    x.noalias() += alpha * p;
    r.noalias() -= alpha * hp;
    z = dinv.cwiseProduct(r);
    const double rz_next = r.dot(z);
    p = z + (rz_next / rz) * p;
    rz = rz_next;
  }
}

}  // namespace

double log1pexp(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double pg_mean(double psi) {
  const double a = std::abs(psi);
  if (a < 1e-3) {
    const double x2 = psi * psi;
    return 0.25 - x2 / 48.0 + x2 * x2 / 480.0 - 17.0 * x2 * x2 * x2 / 80640.0;
  }
  return std::tanh(0.5 * a) / (2.0 * a);
}

ModelState make_state(const Problem& pr, int K, double lambda, double gamma, double sigma2_phi) {
  ModelState s;
  s.beta = Eigen::MatrixXd::Zero(pr.dim(), K);
  s.phi = Eigen::MatrixXd::Zero(pr.moderator_dim(), K);
  s.lambda = lambda;
  s.gamma = gamma;
  s.sigma2_phi = sigma2_phi;
  s.responsibilities = Eigen::MatrixXd::Constant(pr.respondents(), K, 1.0 / K);
  s.pg_weights = Eigen::MatrixXd::Constant(pr.rows(), K, 0.25);
  s.inv_tau2 = Eigen::MatrixXd::Zero(pr.penalties.size(), K);
  s.bound = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(pr.penalties.size(), K, false);
  s.free_basis.assign(K, Eigen::MatrixXd::Identity(pr.dim(), pr.dim()));
  return s;
}

void set_free_bases(ModelState& s, const Problem& pr) {
  const int d = pr.dim();
  s.free_basis.resize(s.clusters());
  for (int k = 0; k < s.clusters(); ++k) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, d);
    bool any = false;
    for (int g = 0; g < pr.penalties.size(); ++g)
      if (s.bound(g, k)) {
        acc += pr.penalties.matrices[g];
        any = true;
      }
    s.free_basis[k] = any ? psd_null_basis(acc) : Eigen::MatrixXd::Identity(d, d);
  }
}

Eigen::MatrixXd linear_predictors(const ModelState& s, const Problem& pr) {
  Eigen::MatrixXd psi = pr.design * s.beta;
  psi.array() += s.mu;
  return psi;
}

Eigen::MatrixXd log_cluster_probs(const Eigen::MatrixXd& phi, const Eigen::MatrixXd& moderators) {
  Eigen::MatrixXd a = moderators * phi;
  for (Eigen::Index i = 0; i < a.rows(); ++i) a.row(i).array() -= row_logsumexp(a.row(i));
  return a;
}

Eigen::VectorXd mean_cluster_probs(const Eigen::MatrixXd& log_pi, const Problem& pr) {
  return log_pi.array().exp().matrix().transpose() * pr.respondent_weights();
}

Eigen::MatrixXd cluster_loglik(const Eigen::MatrixXd& psi, const Problem& pr) {
  const int N = pr.respondents();
  const Eigen::Index K = psi.cols();
  Eigen::MatrixXd ll = Eigen::MatrixXd::Zero(N, K);
  for (int i = 0; i < N; ++i)
    for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t)
      for (Eigen::Index k = 0; k < K; ++k) {
        const double v = psi(t, k);
        if (!std::isfinite(v))
          throw NumericalError("non-finite linear predictor on task row " + std::to_string(t));
        ll(i, k) += pr.y(t) * v - log1pexp(v);
      }
  return ll;
}

Eigen::VectorXd penalty_per_cluster(const ModelState& s, const Problem& pr) {
  const int K = s.clusters();
  Eigen::VectorXd p = Eigen::VectorXd::Zero(K);
  for (int k = 0; k < K; ++k)
    for (int g = 0; g < pr.penalties.size(); ++g)
      if (!s.bound(g, k))
        p(k) += pr.penalties.weights(g) * group_norm(s.beta.col(k), pr.penalties.roots[g]);
  return p;
}

double log_likelihood(const ModelState& s, const Problem& pr) {
  const Eigen::MatrixXd a = log_cluster_probs(s.phi, pr.moderators) + cluster_loglik(linear_predictors(s, pr), pr);
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) total += row_logsumexp(a.row(i));
  return total;
}

double observed_log_posterior(const ModelState& s, const Problem& pr) {
  const Eigen::MatrixXd log_pi = log_cluster_probs(s.phi, pr.moderators);
  const Eigen::MatrixXd a = log_pi + cluster_loglik(linear_predictors(s, pr), pr);
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) total += row_logsumexp(a.row(i));
  const Eigen::VectorXd pibar = mean_cluster_probs(log_pi, pr);
  const Eigen::VectorXd pen = penalty_per_cluster(s, pr);
  const double m = pr.penalties.rank_m;
  for (int k = 0; k < s.clusters(); ++k) {
    const double rate = effective_rate(s.lambda, pibar(k), s.gamma);
    total += m * std::log(rate) - rate * pen(k);
  }
  return total + log_prior_phi(s.phi, s.sigma2_phi);
}

Eigen::MatrixXd estep_responsibilities(const ModelState& s, const Problem& pr) {
  Eigen::MatrixXd a = log_cluster_probs(s.phi, pr.moderators) + cluster_loglik(linear_predictors(s, pr), pr);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double lse = row_logsumexp(a.row(i));
    a.row(i) = (a.row(i).array() - lse).exp().matrix();
    a.row(i) /= a.row(i).sum();
  }
  return a;
}

Eigen::MatrixXd estep_pg(const ModelState& s, const Problem& pr) {
  return linear_predictors(s, pr).unaryExpr([](double v) { return pg_mean(v); });
}

Eigen::MatrixXd estep_tau(const ModelState& s, const Problem& pr,
                          std::vector<std::pair<int, int>>* candidates) {
  const int K = s.clusters(), G = pr.penalties.size();
  const Eigen::VectorXd pibar = mean_cluster_probs(log_cluster_probs(s.phi, pr.moderators), pr);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(G, K);
  for (int k = 0; k < K; ++k) {
    const double rate = effective_rate(s.lambda, pibar(k), s.gamma);
    for (int g = 0; g < G; ++g) {
      if (s.bound(g, k)) continue;
      const double norm = group_norm(s.beta.col(k), pr.penalties.roots[g]);
      if (candidates && norm < pr.penalties.fusion_threshold) {
        candidates->emplace_back(g, k);
        continue;
      }
      out(g, k) = rate * pr.penalties.weights(g) / std::max(norm, DBL_MIN);
    }
  }
  return out;
}

double q_beta(const ModelState& at, double mu, const Eigen::MatrixXd& beta, const Problem& pr) {
  const int K = at.clusters();
  Eigen::MatrixXd psi = pr.design * beta;
  psi.array() += mu;
  double q = 0.0;
  for (int i = 0; i < pr.respondents(); ++i)
    for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t)
      for (int k = 0; k < K; ++k) {
        const double v = psi(t, k);
        q += at.responsibilities(i, k) * ((pr.y(t) - 0.5) * v - 0.5 * at.pg_weights(t, k) * v * v);
      }
  for (int k = 0; k < K; ++k)
    for (int g = 0; g < pr.penalties.size(); ++g)
      if (at.inv_tau2(g, k) != 0.0)
        q -= 0.5 * at.inv_tau2(g, k) * (pr.penalties.roots[g] * beta.col(k)).squaredNorm();
  return q;
}

RidgeSystem ridge_system(const ModelState& s, const Problem& pr, int threads) {
  const int K = s.clusters(), d = pr.dim(), n = pr.rows();
  std::vector<int> resp_of(n);
  for (int i = 0; i < pr.respondents(); ++i)
    for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t) resp_of[t] = i;

  // Row-chunked sufficient statistics, reduced in chunk order.
  struct Partial {
    double h00 = 0.0, b0 = 0.0;
    std::vector<Eigen::MatrixXd> s;
    std::vector<Eigen::VectorXd> h0, b;
  };
  const int chunk = row_chunk(n);
  std::vector<Partial> parts(detail::chunk_count(n, chunk));
  detail::for_each_chunk(n, chunk, threads, [&](int c, int begin, int end) {
    Partial& p = parts[c];
    const int len = end - begin;
    const auto tc = pr.design.middleRows(begin, len);
    for (int k = 0; k < K; ++k) {
      Eigen::VectorXd w(len), u(len);
      for (int t = begin; t < end; ++t) {
        const double r = s.responsibilities(resp_of[t], k);
        w(t - begin) = r * s.pg_weights(t, k);
        u(t - begin) = r * (pr.y(t) - 0.5);
      }
      p.h00 += w.sum();
      p.b0 += u.sum();
      p.h0.push_back(tc.transpose() * w);
      p.b.push_back(tc.transpose() * u);
      p.s.push_back(tc.transpose() * w.asDiagonal() * tc);
    }
  });

  double h00 = 0.0, b0 = 0.0;
  std::vector<Eigen::MatrixXd> sk(K, Eigen::MatrixXd::Zero(d, d));
  std::vector<Eigen::VectorXd> h0k(K, Eigen::VectorXd::Zero(d)), bk(K, Eigen::VectorXd::Zero(d));
  for (const auto& p : parts) {
    h00 += p.h00;
    b0 += p.b0;
    for (int k = 0; k < K; ++k) {
      sk[k] += p.s[k];
      h0k[k] += p.h0[k];
      bk[k] += p.b[k];
    }
  }

  RidgeSystem sys;
  sys.offset.assign(K + 1, 1);
  for (int k = 0; k < K; ++k) sys.offset[k + 1] = sys.offset[k] + static_cast<int>(s.free_basis[k].cols());
  const int dim = sys.offset[K];
  sys.data = Eigen::MatrixXd::Zero(dim, dim);
  sys.ridge = Eigen::MatrixXd::Zero(dim, dim);
  sys.rhs.resize(dim);
  sys.data(0, 0) = h00;
  sys.rhs(0) = b0;
  for (int k = 0; k < K; ++k) {
    const Eigen::MatrixXd& q = s.free_basis[k];
    const int dk = static_cast<int>(q.cols()), o = sys.offset[k];
    if (dk == 0) continue;
    Eigen::MatrixXd pen = Eigen::MatrixXd::Zero(d, d);
    for (int g = 0; g < pr.penalties.size(); ++g)
      if (s.inv_tau2(g, k) != 0.0) pen += s.inv_tau2(g, k) * pr.penalties.matrices[g];
    const bool full = dk == d;
    sys.data.block(o, o, dk, dk) = full ? sk[k] : Eigen::MatrixXd(q.transpose() * sk[k] * q);
    sys.ridge.block(o, o, dk, dk) = full ? pen : Eigen::MatrixXd(q.transpose() * pen * q);
    const Eigen::VectorXd cross = full ? h0k[k] : Eigen::VectorXd(q.transpose() * h0k[k]);
    sys.data.block(0, o, 1, dk) = cross.transpose();
    sys.data.block(o, 0, dk, 1) = cross;
    sys.rhs.segment(o, dk) = full ? bk[k] : Eigen::VectorXd(q.transpose() * bk[k]);
  }
  return sys;
}

void mstep_beta(ModelState& s, const Problem& pr, const FitOptions& opts) {
  const int K = s.clusters(), d = pr.dim();
  const RidgeSystem sys = ridge_system(s, pr, opts.threads);
  Eigen::VectorXd x(sys.rhs.size());
  x(0) = s.mu;
  for (int k = 0; k < K; ++k) {
    const Eigen::MatrixXd& q = s.free_basis[k];
    const int dk = static_cast<int>(q.cols());
    if (dk == 0) continue;
    x.segment(sys.offset[k], dk) =
        dk == d ? Eigen::VectorXd(s.beta.col(k)) : Eigen::VectorXd(q.transpose() * s.beta.col(k));
  }
  pcg(sys.data + sys.ridge, sys.rhs, x, opts.cg_tolerance);
  s.mu = x(0);
  for (int k = 0; k < K; ++k) {
    const Eigen::MatrixXd& q = s.free_basis[k];
    const int dk = static_cast<int>(q.cols());
    if (dk == 0) {
      s.beta.col(k).setZero();
    } else if (dk == d) {
      s.beta.col(k) = x.segment(sys.offset[k], dk);
    } else {
      s.beta.col(k) = q * x.segment(sys.offset[k], dk);
    }
  }
}

namespace {

struct PhiTerms {
  Eigen::MatrixXd pi;     // respondents x K
  Eigen::VectorXd pibar;  // K
  double value = 0.0;
};

PhiTerms phi_terms(const ModelState& s, const Eigen::MatrixXd& phi, const Problem& pr,
                   const Eigen::VectorXd& pen) {
  PhiTerms t;
  const Eigen::MatrixXd log_pi = log_cluster_probs(phi, pr.moderators);
  t.pi = log_pi.array().exp();
  t.pibar = t.pi.transpose() * pr.respondent_weights();
  double v = (s.responsibilities.array() * log_pi.array()).sum();
  const double m = pr.penalties.rank_m;
  for (int k = 0; k < s.clusters(); ++k) {
    if (s.gamma != 0.0) v += m * s.gamma * std::log(t.pibar(k));
    v -= effective_rate(s.lambda, t.pibar(k), s.gamma) * pen(k);
  }
  t.value = v + log_prior_phi(phi, s.sigma2_phi);
  return t;
}

Eigen::MatrixXd phi_gradient(const ModelState& s, const Eigen::MatrixXd& phi, const Problem& pr,
                             const PhiTerms& t, const Eigen::VectorXd& pen) {
  const int K = s.clusters();
  const Eigen::MatrixXd& X = pr.moderators;
  Eigen::VectorXd c = Eigen::VectorXd::Zero(K);
  if (s.gamma != 0.0)
    for (int k = 0; k < K; ++k)
      c(k) = pr.penalties.rank_m * s.gamma / t.pibar(k) -
             s.lambda * s.gamma * std::pow(t.pibar(k), s.gamma - 1.0) * pen(k);
  const Eigen::VectorXd w = pr.respondent_weights();
  const Eigen::VectorXd cbar = t.pi * c;
  Eigen::MatrixXd coef = s.responsibilities - t.pi;  // respondents x K
  for (int k = 0; k < K; ++k)
    coef.col(k).array() += w.array() * t.pi.col(k).array() * (c(k) - cbar.array());
  Eigen::MatrixXd g = X.transpose() * coef;  // p_x x K
  g.rightCols(K - 1) -= s.sigma2_phi * phi.rightCols(K - 1) * sigma_phi(K);
  g.col(0).setZero();
  return g;
}

}  // namespace

double q_phi(const ModelState& s, const Eigen::MatrixXd& phi, const Problem& pr) {
  return phi_terms(s, phi, pr, penalty_per_cluster(s, pr)).value;
}

Eigen::MatrixXd q_phi_gradient(const ModelState& s, const Eigen::MatrixXd& phi, const Problem& pr) {
  const Eigen::VectorXd pen = penalty_per_cluster(s, pr);
  return phi_gradient(s, phi, pr, phi_terms(s, phi, pr, pen), pen);
}

void mstep_phi(ModelState& s, const Problem& pr, const FitOptions& opts) {
  const int K = s.clusters();
  if (K <= 1) return;
  const int px = pr.moderator_dim(), q = K - 1, dim = px * q;
  const Eigen::VectorXd pen = penalty_per_cluster(s, pr);
  const Eigen::MatrixXd& X = pr.moderators;
  const Eigen::MatrixXd sig = sigma_phi(K);
  PhiTerms cur = phi_terms(s, s.phi, pr, pen);
  for (int step = 0; step < opts.phi_steps; ++step) {
    const Eigen::MatrixXd g = phi_gradient(s, s.phi, pr, cur, pen);
    if (!g.allFinite()) break;
    // Metric: negative Hessian of the multinomial log likelihood plus the prior.
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(dim, dim);
    for (int l = 0; l < q; ++l)
      for (int m = l; m < q; ++m) {
        Eigen::VectorXd w(X.rows());
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
          const double pl = cur.pi(i, l + 1), pm = cur.pi(i, m + 1);
          w(i) = (l == m ? pl : 0.0) - pl * pm;
        }
        Eigen::MatrixXd blk = X.transpose() * w.asDiagonal() * X;
        blk.diagonal().array() += s.sigma2_phi * sig(l, m);
        a.block(l * px, m * px, px, px) = blk;
        if (m != l) a.block(m * px, l * px, px, px) = blk.transpose();
      }
    Eigen::VectorXd gv(dim);
    for (int l = 0; l < q; ++l) gv.segment(l * px, px) = g.col(l + 1);
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    Eigen::VectorXd delta = llt.info() == Eigen::Success ? Eigen::VectorXd(llt.solve(gv)) : gv;
    const double slope = gv.dot(delta);
    if (!(slope > 1e-14)) break;
    double t = 1.0;
    bool accepted = false;
    PhiTerms next;
    Eigen::MatrixXd trial = s.phi;
    for (int half = 0; half < 40; ++half, t *= 0.5) {
      trial = s.phi;
      for (int l = 0; l < q; ++l) trial.col(l + 1) += t * delta.segment(l * px, px);
      next = phi_terms(s, trial, pr, pen);
      if (std::isfinite(next.value) && next.value >= cur.value + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    const double gain = next.value - cur.value;
    s.phi = trial;
    cur = std::move(next);
    if (gain < 1e-13 * (1.0 + std::abs(cur.value))) break;
  }
}

std::vector<std::pair<int, int>> try_bind(ModelState& s, const Problem& pr,
                                          const std::vector<std::pair<int, int>>& candidates) {
  std::vector<std::pair<int, int>> accepted;
  if (candidates.empty()) return accepted;
  double base = observed_log_posterior(s, pr);
  auto attempt = [&](const std::vector<std::pair<int, int>>& batch) {
    ModelState t = s;
    for (auto [g, k] : batch) t.bound(g, k) = true;
    set_free_bases(t, pr);
    project_beta(t);
    const double obj = observed_log_posterior(t, pr);
    if (std::isfinite(obj) && obj >= base - 1e-13 * std::max(1.0, std::abs(base))) {
      s = std::move(t);
      base = obj;
      return true;
    }
    return false;
  };
  if (attempt(candidates)) return candidates;
  for (const auto& c : candidates)
    if (attempt({c})) accepted.push_back(c);
  return accepted;
}

std::vector<std::pair<int, int>> aecm_update(ModelState& s, const Problem& pr, const FitOptions& opts) {
  // Cycle 1: memberships, Polya-Gamma weights and inverse scales; ridge update of (mu, beta).
  std::vector<std::pair<int, int>> candidates;
  estep_tau(s, pr, &candidates);
  auto bound = try_bind(s, pr, candidates);
  s.responsibilities = estep_responsibilities(s, pr);
  s.pg_weights = estep_pg(s, pr);
  s.inv_tau2 = estep_tau(s, pr, nullptr);
  mstep_beta(s, pr, opts);
  // Cycle 2: memberships again with the new beta, then phi.
  s.responsibilities = estep_responsibilities(s, pr);
  mstep_phi(s, pr, opts);
  return bound;
}

FitResult fit(const Problem& pr, int K, double lambda, double gamma, double sigma2_phi,
              const FitOptions& opts, const ModelState* warm_start) {
  pr.validate();
  if (K < 1) throw InputError("number of clusters must be at least 1");
  if (K > pr.respondents()) throw InputError("more clusters than respondents");
  if (!(lambda > 0.0)) throw InputError("lambda must be positive");
  if (!pr.penalties.proper && !opts.allow_improper)
    throw ImproperPriorError("fusion prior is improper: stacked penalty rank " +
                             std::to_string(pr.penalties.rank_m) + " < dimension " +
                             std::to_string(pr.dim()));

  FitResult res;
  ModelState s;
  if (warm_start && warm_start->clusters() == K) {
    s = make_state(pr, K, lambda, gamma, sigma2_phi);
    s.mu = warm_start->mu;
    s.beta = warm_start->beta;
    s.phi = warm_start->phi;
  } else {
    s = initialize(pr, K, opts.seed, lambda, gamma, sigma2_phi, opts.threads);
  }

  auto record = [&](const std::vector<std::pair<int, int>>& events, int iteration) {
    for (auto [g, k] : events) res.fusion.events.push_back({g, k, iteration});
  };

  double obj = observed_log_posterior(s, pr);
  res.diagnostics.log_posterior_trail.push_back(obj);
  for (int it = 0; it < opts.max_iterations; ++it) {
    const Eigen::VectorXd before = pack(s);
    double obj_new = 0.0;
    if (opts.squarem) {
      ModelState s1 = s;
      const auto b1 = aecm_update(s1, pr, opts);
      ModelState s2 = s1;
      const auto b2 = aecm_update(s2, pr, opts);
      res.diagnostics.em_evaluations += 2;
      obj_new = observed_log_posterior(s2, pr);
      record(b1, it);
      record(b2, it);
      ModelState chosen = std::move(s2);
      if (b1.empty() && b2.empty()) {
        const Eigen::VectorXd t1 = pack(s1);
        const Eigen::VectorXd r = t1 - before;
        const Eigen::VectorXd v = pack(chosen) - t1 - r;
        const double vn = v.norm();
        if (vn > 0.0) {
          const double alpha = std::min(-r.norm() / vn, -1.0);
          if (alpha < -1.0) {
            ModelState s3 = chosen;
            unpack(before - 2.0 * alpha * r + alpha * alpha * v, s3);
            project_beta(s3);
            bool ok = pack(s3).allFinite();
            std::vector<std::pair<int, int>> b3;
            double obj3 = -std::numeric_limits<double>::infinity();
            if (ok) {
              try {
                b3 = aecm_update(s3, pr, opts);
                ++res.diagnostics.em_evaluations;
                obj3 = observed_log_posterior(s3, pr);
              } catch (const NumericalError&) {
                ok = false;
              }
            }
            if (ok && std::isfinite(obj3) && obj3 >= obj_new) {
              chosen = std::move(s3);
              obj_new = obj3;
              record(b3, it);
            } else {
              ++res.diagnostics.squarem_steps_rejected;
            }
          }
        }
      }
      s = std::move(chosen);
    } else {
      record(aecm_update(s, pr, opts), it);
      ++res.diagnostics.em_evaluations;
      obj_new = observed_log_posterior(s, pr);
    }
    res.diagnostics.log_posterior_trail.push_back(obj_new);
    ++res.diagnostics.iterations;
    const double change = obj_new - obj;
    obj = obj_new;
    if (change < opts.tol_objective) {
      res.diagnostics.converged_by = "objective";
      res.converged = true;
      break;
    }
    if ((pack(s) - before).lpNorm<Eigen::Infinity>() < opts.tol_param) {
      res.diagnostics.converged_by = "parameters";
      res.converged = true;
      break;
    }
  }

  s.responsibilities = estep_responsibilities(s, pr);
  s.pg_weights = estep_pg(s, pr);
  s.inv_tau2 = estep_tau(s, pr, nullptr);
  for (int k = 0; k < K; ++k) {
    if (s.responsibilities.col(k).maxCoeff() < 1e-6) res.diagnostics.degenerate_clusters.push_back(k);
    res.fusion.induced_constraints.push_back(pr.dim() - static_cast<int>(s.free_basis[k].cols()));
  }
  res.log_posterior = observed_log_posterior(s, pr);
  res.log_likelihood = log_likelihood(s, pr);
  res.state = std::move(s);
  return res;
}

}  // namespace cjmix
