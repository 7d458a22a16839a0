#include "cjmix/inference.hpp"

#include "cjmix/errors.hpp"
#include "parallel.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>

namespace cjmix {

namespace {

Eigen::MatrixXd sigma_phi(int K) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Constant(K - 1, K - 1, -1.0 / K);
  s.diagonal().setConstant((K - 1.0) / K);
  return s;
}

// Smoothed penalty of one cluster with its gradient and Hessian in reduced beta space.
struct SmoothPenalty {
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

SmoothPenalty smooth_penalty(const ModelState& s, const Problem& pr, int k, double eps, bool with_hess) {
  const int d = pr.dim();
  SmoothPenalty sp;
  sp.grad = Eigen::VectorXd::Zero(d);
  if (with_hess) sp.hess = Eigen::MatrixXd::Zero(d, d);
  const Eigen::VectorXd b = s.beta.col(k);
  for (int g = 0; g < pr.penalties.size(); ++g) {
    if (s.bound(g, k)) continue;
    const Eigen::MatrixXd& root = pr.penalties.roots[g];
    const double xi = pr.penalties.weights(g);
    const Eigen::VectorXd rb = root * b;
    const double q = rb.squaredNorm() + eps;
    const double sq = std::sqrt(q);
    const Eigen::VectorXd fb = root.transpose() * rb;
    sp.value += xi * sq;
    sp.grad += (xi / sq) * fb;
    if (with_hess) {
      sp.hess += (xi / sq) * pr.penalties.matrices[g];
      sp.hess.noalias() -= (xi / (q * sq)) * fb * fb.transpose();
    }
  }
  return sp;
}

double rate_of(double lambda, double pibar, double gamma) {
  return gamma == 0.0 ? lambda : lambda * std::pow(pibar, gamma);
}

}  // namespace

FreeLayout free_layout(const ModelState& s) {
  FreeLayout fl;
  fl.clusters = s.clusters();
  fl.moderator_dim = static_cast<int>(s.phi.rows());
  fl.beta_offset.assign(fl.clusters + 1, 1);
  for (int k = 0; k < fl.clusters; ++k)
    fl.beta_offset[k + 1] = fl.beta_offset[k] + static_cast<int>(s.free_basis[k].cols());
  fl.phi_offset = fl.beta_offset.back();
  fl.size = fl.phi_offset + fl.moderator_dim * (fl.clusters - 1);
  return fl;
}

Eigen::VectorXd free_parameters(const ModelState& s, const FreeLayout& fl) {
  Eigen::VectorXd t(fl.size);
  t(0) = s.mu;
  for (int k = 0; k < fl.clusters; ++k)
    t.segment(fl.beta_offset[k], fl.beta_dim(k)) = s.free_basis[k].transpose() * s.beta.col(k);
  for (int l = 1; l < fl.clusters; ++l) t.segment(fl.phi_at(l, 0), fl.moderator_dim) = s.phi.col(l);
  return t;
}

void set_free_parameters(ModelState& s, const FreeLayout& fl, const Eigen::VectorXd& t) {
  s.mu = t(0);
  for (int k = 0; k < fl.clusters; ++k)
    s.beta.col(k) = s.free_basis[k] * t.segment(fl.beta_offset[k], fl.beta_dim(k));
  for (int l = 1; l < fl.clusters; ++l) s.phi.col(l) = t.segment(fl.phi_at(l, 0), fl.moderator_dim);
}

ModelState bind_and_project(const ModelState& s, const Problem& pr) {
  ModelState out = s;
  std::vector<std::pair<int, int>> candidates;
  estep_tau(out, pr, &candidates);
  if (candidates.empty()) return out;
  for (auto [g, k] : candidates) out.bound(g, k) = true;
  set_free_bases(out, pr);
  for (int k = 0; k < out.clusters(); ++k) {
    const Eigen::MatrixXd& q = out.free_basis[k];
    out.beta.col(k) = q * (q.transpose() * out.beta.col(k));
  }
  out.responsibilities = estep_responsibilities(out, pr);
  out.pg_weights = estep_pg(out, pr);
  out.inv_tau2 = estep_tau(out, pr, nullptr);
  return out;
}

double smoothed_log_posterior(const ModelState& s, const Problem& pr, double eps) {
  const Eigen::MatrixXd log_pi = log_cluster_probs(s.phi, pr.moderators);
  const Eigen::MatrixXd a = log_pi + cluster_loglik(linear_predictors(s, pr), pr);
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    total += m + std::log((a.row(i).array() - m).exp().sum());
  }
  const Eigen::VectorXd pibar = mean_cluster_probs(log_pi, pr);
  const int K = s.clusters();
  for (int k = 0; k < K; ++k) {
    const double rate = rate_of(s.lambda, pibar(k), s.gamma);
    total += pr.penalties.rank_m * std::log(rate) - rate * smooth_penalty(s, pr, k, eps, false).value;
  }
  if (K > 1) {
    const Eigen::MatrixXd v = s.phi.rightCols(K - 1);
    total -= 0.5 * s.sigma2_phi * (v * sigma_phi(K)).cwiseProduct(v).sum();
  }
  return total;
}

namespace {

// Shared pieces of the score and the information.
struct Pieces {
  FreeLayout fl;
  Eigen::MatrixXd pi;     // respondents x K
  Eigen::VectorXd pibar;  // K
  Eigen::MatrixXd prob;   // tasks x K, fitted success probabilities
  Eigen::MatrixXd resp;   // respondents x K
  std::vector<SmoothPenalty> pen;
  // d(pibar_k)/d(phi_l) stacked over l = 1..K-1, one column per k
  Eigen::MatrixXd jac;
  Eigen::VectorXd h1, h2;  // first and second derivatives of the pibar terms
};

Pieces pieces(const ModelState& s, const Problem& pr, double eps, bool with_hess) {
  Pieces p;
  p.fl = free_layout(s);
  const int K = s.clusters(), px = p.fl.moderator_dim, N = pr.respondents();
  p.pi = log_cluster_probs(s.phi, pr.moderators).array().exp();
  const Eigen::VectorXd w = pr.respondent_weights();
  p.pibar = p.pi.transpose() * w;
  p.prob = linear_predictors(s, pr).unaryExpr([](double v) { return sigmoid(v); });
  p.resp = estep_responsibilities(s, pr);
  for (int k = 0; k < K; ++k) p.pen.push_back(smooth_penalty(s, pr, k, eps, with_hess));
  p.jac = Eigen::MatrixXd::Zero(px * (K - 1), K);
  p.h1 = Eigen::VectorXd::Zero(K);
  p.h2 = Eigen::VectorXd::Zero(K);
  if (K > 1 && s.gamma != 0.0) {
    const double m = pr.penalties.rank_m, g = s.gamma;
    for (int k = 0; k < K; ++k) {
      const double pb = p.pibar(k), P = p.pen[k].value;
      p.h1(k) = m * g / pb - s.lambda * g * std::pow(pb, g - 1.0) * P;
      p.h2(k) = -m * g / (pb * pb) - s.lambda * g * (g - 1.0) * std::pow(pb, g - 2.0) * P;
      for (int l = 1; l < K; ++l) {
        Eigen::VectorXd coef(N);
        for (int i = 0; i < N; ++i) coef(i) = w(i) * p.pi(i, k) * ((k == l ? 1.0 : 0.0) - p.pi(i, l));
        p.jac.col(k).segment((l - 1) * px, px) = pr.moderators.transpose() * coef;
      }
    }
  }
  return p;
}

}  // namespace

Eigen::VectorXd smoothed_score(const ModelState& s, const Problem& pr, double eps) {
  const Pieces p = pieces(s, pr, eps, false);
  const FreeLayout& fl = p.fl;
  const int K = s.clusters(), px = fl.moderator_dim;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(fl.size);
  for (int k = 0; k < K; ++k) {
    Eigen::VectorXd u(pr.rows());
    for (int i = 0; i < pr.respondents(); ++i)
      for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t) u(t) = p.resp(i, k) * (pr.y(t) - p.prob(t, k));
    g(0) += u.sum();
    Eigen::VectorXd gb = pr.design.transpose() * u;
    gb -= rate_of(s.lambda, p.pibar(k), s.gamma) * p.pen[k].grad;
    if (fl.beta_dim(k) > 0) g.segment(fl.beta_offset[k], fl.beta_dim(k)) = s.free_basis[k].transpose() * gb;
  }
  if (K > 1) {
    const Eigen::MatrixXd coef = p.resp - p.pi;
    for (int l = 1; l < K; ++l) g.segment(fl.phi_at(l, 0), px) = pr.moderators.transpose() * coef.col(l);
    for (int k = 0; k < K; ++k) g.tail(px * (K - 1)) += p.h1(k) * p.jac.col(k);
    const Eigen::MatrixXd prior = s.phi.rightCols(K - 1) * sigma_phi(K);
    for (int l = 1; l < K; ++l) g.segment(fl.phi_at(l, 0), px) -= s.sigma2_phi * prior.col(l - 1);
  }
  return g;
}

Eigen::MatrixXd louis_information(const ModelState& s, const Problem& pr, double eps, int threads) {
  const Pieces p = pieces(s, pr, eps, true);
  const FreeLayout& fl = p.fl;
  const int K = s.clusters(), px = fl.moderator_dim, N = pr.respondents(), n = pr.rows();
  const int D = fl.size, d = pr.dim();
  const Eigen::MatrixXd& X = pr.moderators;
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(D, D);

  std::vector<int> resp_of(n);
  for (int i = 0; i < N; ++i)
    for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t) resp_of[t] = i;

  // Expected complete-data curvature for (mu, eta_k), chunked over clusters.
  std::vector<Eigen::MatrixXd> gram(K);
  std::vector<Eigen::VectorXd> cross(K);
  std::vector<double> corner(K, 0.0);
  detail::for_each_chunk(K, 1, threads, [&](int k, int, int) {
    Eigen::VectorXd w(n);
    for (int t = 0; t < n; ++t) w(t) = p.resp(resp_of[t], k) * p.prob(t, k) * (1.0 - p.prob(t, k));
    corner[k] = w.sum();
    cross[k] = pr.design.transpose() * w;
    gram[k] = pr.design.transpose() * w.asDiagonal() * pr.design;
  });
  for (int k = 0; k < K; ++k) {
    info(0, 0) += corner[k];
    const int o = fl.beta_offset[k], dk = fl.beta_dim(k);
    if (dk == 0) continue;
    const Eigen::MatrixXd& q = s.free_basis[k];
    const Eigen::VectorXd c = q.transpose() * cross[k];
    info.block(0, o, 1, dk) += c.transpose();
    info.block(o, 0, dk, 1) += c;
    const double rate = rate_of(s.lambda, p.pibar(k), s.gamma);
    info.block(o, o, dk, dk) += q.transpose() * (gram[k] + rate * p.pen[k].hess) * q;
  }

  if (K > 1) {
    const int off = fl.phi_offset;
    // multinomial curvature, the same for every latent class
    for (int l = 1; l < K; ++l)
      for (int m = l; m < K; ++m) {
        Eigen::VectorXd w(N);
        for (int i = 0; i < N; ++i) w(i) = (l == m ? p.pi(i, l) : 0.0) - p.pi(i, l) * p.pi(i, m);
        Eigen::MatrixXd blk = X.transpose() * w.asDiagonal() * X;
        blk.diagonal().array() += s.sigma2_phi * ((l == m ? 1.0 : 0.0) - 1.0 / K);
        info.block(fl.phi_at(l, 0), fl.phi_at(m, 0), px, px) += blk;
        if (m != l) info.block(fl.phi_at(m, 0), fl.phi_at(l, 0), px, px) += blk.transpose();
      }
    // chains through the average membership probabilities
    if (s.gamma != 0.0) {
      const Eigen::VectorXd w = pr.respondent_weights();
      const int q = px * (K - 1);
      for (int k = 0; k < K; ++k) {
        Eigen::MatrixXd hess = p.h2(k) * p.jac.col(k) * p.jac.col(k).transpose();
        for (int l = 1; l < K; ++l)
          for (int m = 1; m < K; ++m) {
            Eigen::VectorXd c(N);
            const double dkl = k == l ? 1.0 : 0.0, dkm = k == m ? 1.0 : 0.0, dlm = l == m ? 1.0 : 0.0;
            for (int i = 0; i < N; ++i)
              c(i) = w(i) * (p.pi(i, k) * (dkm - p.pi(i, m)) * (dkl - p.pi(i, l)) -
                             p.pi(i, k) * p.pi(i, l) * (dlm - p.pi(i, m)));
            hess.block((l - 1) * px, (m - 1) * px, px, px) += p.h1(k) * (X.transpose() * c.asDiagonal() * X);
          }
        info.block(off, off, q, q) -= hess;
        const int o = fl.beta_offset[k], dk = fl.beta_dim(k);
        if (dk == 0) continue;
        const Eigen::VectorXd gb = s.free_basis[k].transpose() * p.pen[k].grad;
        const Eigen::MatrixXd c =
            (s.lambda * s.gamma * std::pow(p.pibar(k), s.gamma - 1.0)) * gb * p.jac.col(k).transpose();
        info.block(o, off, dk, q) += c;
        info.block(off, o, q, dk) += c.transpose();
      }
    }
  }

  // Missing information: per-respondent covariance of the complete-data score over Z.
  if (K > 1) {
    std::vector<Eigen::MatrixXd> resid(K);  // d x N: sum_t (y - p) T_t per respondent
    for (int k = 0; k < K; ++k) {
      Eigen::MatrixXd u = Eigen::MatrixXd::Zero(d, N);
      for (int t = 0; t < n; ++t) u.col(resp_of[t]) += (pr.y(t) - p.prob(t, k)) * pr.design.row(t).transpose();
      resid[k] = fl.beta_dim(k) > 0 ? Eigen::MatrixXd(s.free_basis[k].transpose() * u) : Eigen::MatrixXd(0, N);
    }
    Eigen::MatrixXd mu_res = Eigen::MatrixXd::Zero(N, K);
    for (int t = 0; t < n; ++t)
      for (int k = 0; k < K; ++k) mu_res(resp_of[t], k) += pr.y(t) - p.prob(t, k);

    Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(D, static_cast<Eigen::Index>(N) * K);
    Eigen::VectorXd sbar(D), sk(D);
    for (int i = 0; i < N; ++i) {
      sbar.setZero();
      auto score = [&](int k, Eigen::VectorXd& out) {
        out.setZero();
        out(0) = mu_res(i, k);
        if (fl.beta_dim(k) > 0) out.segment(fl.beta_offset[k], fl.beta_dim(k)) = resid[k].col(i);
        for (int l = 1; l < K; ++l)
          out.segment(fl.phi_at(l, 0), px) = ((k == l ? 1.0 : 0.0) - p.pi(i, l)) * X.row(i).transpose();
      };
      for (int k = 0; k < K; ++k) {
        score(k, sk);
        sbar += p.resp(i, k) * sk;
      }
      for (int k = 0; k < K; ++k) {
        score(k, sk);
        cols.col(static_cast<Eigen::Index>(i) * K + k) = std::sqrt(p.resp(i, k)) * (sk - sbar);
      }
    }
    info.noalias() -= cols * cols.transpose();
  }
  return 0.5 * (info + info.transpose());
}

std::vector<Eigen::MatrixXd> snapped_lifting(const ModelState& s, const Problem& pr) {
  std::vector<Eigen::MatrixXd> out;
  for (int k = 0; k < s.clusters(); ++k) {
    Eigen::MatrixXd l = pr.lift * s.free_basis[k];
    const Eigen::Index rows = l.rows();
    for (Eigen::Index r = 0; r < rows; ++r)
      if (l.cols() == 0 || l.row(r).cwiseAbs().maxCoeff() < 1e-10) l.row(r).setZero();
    for (Eigen::Index a = 0; a < rows; ++a)
      for (Eigen::Index b = a + 1; b < rows; ++b)
        if (l.cols() > 0 && (l.row(a) - l.row(b)).cwiseAbs().maxCoeff() < 1e-10) l.row(b) = l.row(a);
    out.push_back(std::move(l));
  }
  return out;
}

CovarianceBundle covariance_bundle(const ModelState& s, const Problem& pr, double eps, int threads) {
  const ModelState b = bind_and_project(s, pr);
  CovarianceBundle cb;
  cb.state = b;
  cb.epsilon = eps;
  cb.layout = free_layout(b);
  cb.information = louis_information(b, pr, eps, threads);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cb.information);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double top = ev.size() ? ev.cwiseAbs().maxCoeff() : 0.0;
  const double cut = 1e-10 * top;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(ev.size());
  double smallest = top;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) > cut) {
      inv(i) = 1.0 / ev(i);
      smallest = std::min(smallest, ev(i));
    } else {
      ++cb.null_directions;
    }
  }
  cb.pseudo_inverse = cb.null_directions > 0;
  cb.condition = smallest > 0.0 ? top / smallest : std::numeric_limits<double>::infinity();
  cb.covariance = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  cb.covariance = (0.5 * (cb.covariance + cb.covariance.transpose())).eval();
  cb.lifting = snapped_lifting(b, pr);
  return cb;
}

double delta_method(const CovarianceBundle& cb, const Eigen::VectorXd& gradient) {
  if (gradient.size() != cb.covariance.rows()) throw InputError("gradient length does not match the covariance");
  return std::sqrt(std::max(0.0, gradient.dot(cb.covariance * gradient)));
}

}  // namespace cjmix
