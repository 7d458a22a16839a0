#include "cjmix/engine.hpp"

#include "cjmix/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace cjmix {

namespace {

constexpr int kLandmarks = 1000;

// Columns with spread, standardized. Intercepts and constants are dropped.
Eigen::MatrixXd standardized_features(const Eigen::MatrixXd& x) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    if (x.col(c).maxCoeff() - x.col(c).minCoeff() > 1e-12) keep.push_back(c);
  Eigen::MatrixXd z(x.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const Eigen::VectorXd col = x.col(keep[j]);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / std::max<Eigen::Index>(1, col.size() - 1));
    z.col(static_cast<Eigen::Index>(j)) = (col.array() - mean) / (sd > 0.0 ? sd : 1.0);
  }
  return z;
}

std::vector<int> kmeans(const Eigen::MatrixXd& pts, int K, std::mt19937_64& rng) {
  const int n = static_cast<int>(pts.rows());
  std::vector<int> best;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < 5; ++restart) {
    // k-means++ seeding
    Eigen::MatrixXd centers(K, pts.cols());
    centers.row(0) = pts.row(std::uniform_int_distribution<int>(0, n - 1)(rng));
    Eigen::VectorXd d2 = (pts.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int k = 1; k < K; ++k) {
      const double total = d2.sum();
      int pick = 0;
      if (total > 0.0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        for (pick = 0; pick < n - 1; ++pick) {
          u -= d2(pick);
          if (u <= 0.0) break;
        }
      } else {
        pick = std::uniform_int_distribution<int>(0, n - 1)(rng);
      }
      centers.row(k) = pts.row(pick);
      d2 = d2.cwiseMin((pts.rowwise() - centers.row(k)).rowwise().squaredNorm());
    }
    std::vector<int> z(n, -1);
    double inertia = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      bool changed = false;
      inertia = 0.0;
      for (int i = 0; i < n; ++i) {
        Eigen::Index k;
        inertia += (centers.rowwise() - pts.row(i)).rowwise().squaredNorm().minCoeff(&k);
        if (z[i] != static_cast<int>(k)) {
          z[i] = static_cast<int>(k);
          changed = true;
        }
      }
      if (!changed) break;
      Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(K, pts.cols());
      std::vector<int> cnt(K, 0);
      for (int i = 0; i < n; ++i) {
        sum.row(z[i]) += pts.row(i);
        ++cnt[z[i]];
      }
      for (int k = 0; k < K; ++k)
        if (cnt[k] > 0) centers.row(k) = sum.row(k) / cnt[k];
    }
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best = z;
    }
  }
  return best;
}

// Moves members out of the largest cluster until every cluster is occupied.
void fill_empty(std::vector<int>& z, int K) {
  for (int k = 0; k < K; ++k) {
    std::vector<int> cnt(K, 0);
    for (int v : z) ++cnt[v];
    if (cnt[k] > 0) continue;
    const int big = static_cast<int>(std::max_element(cnt.begin(), cnt.end()) - cnt.begin());
    for (auto it = z.rbegin(); it != z.rend(); ++it)
      if (*it == big) {
        *it = k;
        break;
      }
  }
}

struct Logistic {
  double intercept = 0.0;
  Eigen::VectorXd coef;
};

// Ridge-penalized logistic regression (intercept unpenalized) on a row subset.
Logistic ridge_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<int>& rows,
                        double ridge) {
  const Eigen::Index p = x.cols();
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + 1);
  for (int it = 0; it < 25; ++it) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p + 1, p + 1);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p + 1);
    Eigen::VectorXd row(p + 1);
    for (int t : rows) {
      row(0) = 1.0;
      row.tail(p) = x.row(t).transpose();
      const double pr = sigmoid(row.dot(theta));
      g += (y(t) - pr) * row;
      h.selfadjointView<Eigen::Lower>().rankUpdate(row, pr * (1.0 - pr));
    }
    h = h.selfadjointView<Eigen::Lower>();
    h.diagonal().tail(p).array() += ridge;
    h(0, 0) += 1e-8;
    g.tail(p) -= ridge * theta.tail(p);
    const Eigen::VectorXd step = h.ldlt().solve(g);
    theta += step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-8) break;
  }
  return {theta(0), theta.tail(p)};
}

std::vector<int> classify_em(const Problem& pr, std::vector<int> z, int K) {
  const Eigen::MatrixXd& x = pr.main_design.size() ? pr.main_design : pr.design;
  const int N = pr.respondents();
  for (int round = 0; round < 50; ++round) {
    std::vector<std::vector<int>> rows(K);
    std::vector<int> cnt(K, 0);
    for (int i = 0; i < N; ++i) {
      ++cnt[z[i]];
      for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t) rows[z[i]].push_back(t);
    }
    std::vector<Logistic> fits;
    for (int k = 0; k < K; ++k) fits.push_back(ridge_logistic(x, pr.y, rows[k], 1.0));
    std::vector<int> next(N);
    std::vector<int> next_cnt(K, 0);
    for (int i = 0; i < N; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = z[i];
      for (int k = 0; k < K; ++k) {
        double score = std::log(static_cast<double>(cnt[k]) / N);
        for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t) {
          const double v = fits[k].intercept + x.row(t).dot(fits[k].coef);
          score += pr.y(t) * v - log1pexp(v);
        }
        if (score > best) {
          best = score;
          arg = k;
        }
      }
      next[i] = arg;
      ++next_cnt[arg];
    }
    if (std::find(next_cnt.begin(), next_cnt.end(), 0) != next_cnt.end()) break;
    if (next == z) break;
    z = std::move(next);
  }
  return z;
}

// Joint ridge fit of (mu, beta_1..beta_K) given hard memberships.
void joint_ridge(ModelState& s, const Problem& pr, const std::vector<int>& z) {
  const int K = s.clusters(), d = pr.dim(), dim = 1 + K * d;
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
  for (int it = 0; it < 25; ++it) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
    for (int k = 0; k < K; ++k) {
      std::vector<int> rows;
      for (int i = 0; i < pr.respondents(); ++i)
        if (z[i] == k)
          for (int t = pr.row_start[i]; t < pr.row_start[i + 1]; ++t) rows.push_back(t);
      const Eigen::Index nk = static_cast<Eigen::Index>(rows.size());
      Eigen::MatrixXd tk(nk, d);
      Eigen::VectorXd yk(nk);
      for (Eigen::Index r = 0; r < nk; ++r) {
        tk.row(r) = pr.design.row(rows[r]);
        yk(r) = pr.y(rows[r]);
      }
      const Eigen::VectorXd bk = theta.segment(1 + k * d, d);
      const Eigen::VectorXd psi = (tk * bk).array() + theta(0);
      const Eigen::VectorXd p = psi.unaryExpr([](double v) { return sigmoid(v); });
      const Eigen::VectorXd w = p.array() * (1.0 - p.array());
      const Eigen::VectorXd res = yk - p;
      g(0) += res.sum();
      g.segment(1 + k * d, d) = tk.transpose() * res - bk;
      h(0, 0) += w.sum();
      const Eigen::VectorXd cross = tk.transpose() * w;
      h.block(0, 1 + k * d, 1, d) = cross.transpose();
      h.block(1 + k * d, 0, d, 1) = cross;
      Eigen::MatrixXd blk = tk.transpose() * w.asDiagonal() * tk;
      blk.diagonal().array() += 1.0;
      h.block(1 + k * d, 1 + k * d, d, d) = blk;
    }
    h(0, 0) += 1e-8;
    const Eigen::VectorXd step = h.ldlt().solve(g);
    if (!step.allFinite()) break;
    theta += step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-8) break;
  }
  s.mu = theta(0);
  for (int k = 0; k < K; ++k) s.beta.col(k) = theta.segment(1 + k * d, d);
}

}  // namespace

std::vector<int> spectral_clusters(const Eigen::MatrixXd& moderators, int K, std::uint64_t seed) {
  const int n = static_cast<int>(moderators.rows());
  std::vector<int> z(n, 0);
  if (K <= 1 || n == 0) return z;
  std::mt19937_64 rng(seed);
  const Eigen::MatrixXd feats = standardized_features(moderators);
  if (feats.cols() == 0) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int r = 0; r < n; ++r) z[order[r]] = r % K;
    return z;
  }

  std::vector<int> marks(n);
  std::iota(marks.begin(), marks.end(), 0);
  if (n > kLandmarks) {
    std::shuffle(marks.begin(), marks.end(), rng);
    marks.resize(kLandmarks);
    std::sort(marks.begin(), marks.end());
  }
  const int m = static_cast<int>(marks.size());
  Eigen::MatrixXd pts(m, feats.cols());
  for (int r = 0; r < m; ++r) pts.row(r) = feats.row(marks[r]);

  Eigen::MatrixXd dist2(m, m);
  std::vector<double> off;
  off.reserve(static_cast<std::size_t>(m) * (m - 1) / 2);
  for (int a = 0; a < m; ++a) {
    dist2(a, a) = 0.0;
    for (int b = a + 1; b < m; ++b) {
      dist2(a, b) = dist2(b, a) = (pts.row(a) - pts.row(b)).squaredNorm();
      off.push_back(dist2(a, b));
    }
  }
  double bw = 1.0;
  if (!off.empty()) {
    std::nth_element(off.begin(), off.begin() + off.size() / 2, off.end());
    bw = off[off.size() / 2] > 0.0 ? off[off.size() / 2] : 1.0;
  }
  Eigen::MatrixXd aff = (-dist2.array() / bw).exp();
  aff.diagonal().setZero();
  Eigen::VectorXd dinv = aff.rowwise().sum().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd lap = dinv.asDiagonal() * aff * dinv.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(lap);
  const int kk = std::min(K, m);
  Eigen::MatrixXd emb = eig.eigenvectors().rightCols(kk);
  for (int r = 0; r < m; ++r) {
    const double nr = emb.row(r).norm();
    if (nr > 0.0) emb.row(r) /= nr;
  }
  const std::vector<int> zm = kmeans(emb, kk, rng);
  if (m == n) {
    z = zm;
  } else {
    for (int i = 0; i < n; ++i) {
      Eigen::Index near;
      (pts.rowwise() - feats.row(i)).rowwise().squaredNorm().minCoeff(&near);
      z[i] = zm[near];
    }
  }
  fill_empty(z, K);
  return z;
}

ModelState initialize(const Problem& pr, int K, std::uint64_t seed, double lambda, double gamma,
                      double sigma2_phi, int /*threads*/) {
  ModelState s = make_state(pr, K, lambda, gamma, sigma2_phi);
  std::vector<int> z = spectral_clusters(pr.moderators, K, seed);
  if (K > 1) z = classify_em(pr, std::move(z), K);
  joint_ridge(s, pr, z);

  if (K > 1) {
    ModelState tmp = s;
    tmp.gamma = 0.0;
    tmp.lambda = 0.0;
    tmp.responsibilities.setZero();
    for (int i = 0; i < pr.respondents(); ++i) tmp.responsibilities(i, z[i]) = 1.0;
    FitOptions o;
    o.phi_steps = 50;
    mstep_phi(tmp, pr, o);
    s.phi = tmp.phi;
  }
  s.responsibilities = estep_responsibilities(s, pr);
  s.pg_weights = estep_pg(s, pr);
  s.inv_tau2 = estep_tau(s, pr, nullptr);
  return s;
}

}  // namespace cjmix
