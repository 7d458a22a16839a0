#include "cjmix/estimands.hpp"

#include "cjmix/errors.hpp"
#include "parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

namespace cjmix {

const char* to_string(Marginalization m) { return m == Marginalization::empirical ? "empirical" : "uniform"; }

std::vector<int> excluded_partner_levels(std::span<const FactorSpec> specs, int factor, int partner) {
  std::set<int> out;
  for (const Restriction& r : specs[factor].restrictions)
    if (r.partner == partner)
      for (const auto& [own, other] : r.excluded) out.insert(other);
  for (const Restriction& r : specs[partner].restrictions)
    if (r.partner == factor)
      for (const auto& [own, other] : r.excluded) out.insert(own);
  return {out.begin(), out.end()};
}

namespace {

bool studied_factor(std::span<const int> studied, int h) {
  return std::find(studied.begin(), studied.end(), h) != studied.end();
}

// excluded[h] = partner levels of h that disqualify a profile, over all studied factors
std::vector<std::vector<bool>> exclusion_masks(std::span<const FactorSpec> specs, std::span<const int> studied) {
  const int J = static_cast<int>(specs.size());
  std::vector<std::vector<bool>> mask(J);
  for (int h = 0; h < J; ++h) mask[h].assign(specs[h].n_levels(), false);
  for (int f : studied) {
    if (f < 0 || f >= J) throw InputError("factor index " + std::to_string(f) + " out of range");
    for (int h = 0; h < J; ++h) {
      if (h == f || studied_factor(studied, h)) continue;
      for (int l : excluded_partner_levels(specs, f, h)) mask[h][l] = true;
    }
  }
  return mask;
}

bool passes(const Profile& p, const std::vector<std::vector<bool>>& mask) {
  for (std::size_t h = 0; h < mask.size(); ++h)
    if (mask[h][p[h]]) return false;
  return true;
}

constexpr long long kEnumerationLimit = 5'000'000;

std::vector<Profile> enumerate_profiles(std::span<const FactorSpec> specs, std::span<const int> fixed_zero) {
  const int J = static_cast<int>(specs.size());
  long long total = 1;
  for (int h = 0; h < J; ++h)
    if (!studied_factor(fixed_zero, h)) {
      total *= specs[h].n_levels();
      if (total > kEnumerationLimit) throw InputError("uniform marginalization needs too many profile combinations");
    }
  std::vector<Profile> out;
  out.reserve(static_cast<std::size_t>(total));
  Profile p(J, 0);
  for (;;) {
    out.push_back(p);
    int h = J - 1;
    for (; h >= 0; --h) {
      if (studied_factor(fixed_zero, h)) continue;
      if (++p[h] < specs[h].n_levels()) break;
      p[h] = 0;
    }
    if (h < 0) break;
  }
  return out;
}

}  // namespace

std::vector<int> apply_restrictions(std::span<const Profile> profiles, std::span<const FactorSpec> specs,
                                    std::span<const int> studied) {
  const auto mask = exclusion_masks(specs, studied);
  std::vector<int> rows;
  for (int r = 0; r < static_cast<int>(profiles.size()); ++r)
    if (passes(profiles[r], mask)) rows.push_back(r);
  if (rows.empty()) throw InputError("randomization restrictions leave no profiles for " +
                                     restriction_description(specs, studied));
  return rows;
}

std::string restriction_description(std::span<const FactorSpec> specs, std::span<const int> studied) {
  const auto mask = exclusion_masks(specs, studied);
  std::string out;
  for (std::size_t h = 0; h < mask.size(); ++h) {
    std::string levels;
    for (std::size_t l = 0; l < mask[h].size(); ++l)
      if (mask[h][l]) levels += (levels.empty() ? "" : ",") + specs[h].levels[l];
    if (levels.empty()) continue;
    out += (out.empty() ? "drop " : "; drop ") + specs[h].name + " in {" + levels + "}";
  }
  return out.empty() ? "none" : out;
}

bool admissible(const Profile& p, std::span<const FactorSpec> specs) {
  for (std::size_t j = 0; j < specs.size(); ++j)
    for (const Restriction& r : specs[j].restrictions)
      for (const auto& [own, other] : r.excluded)
        if (p[j] == own && p[r.partner] == other) return false;
  return true;
}

double weighted_quantile(std::span<const double> values, std::span<const double> weights, double q) {
  if (values.size() != weights.size() || values.empty()) throw InputError("weighted quantile needs matching, non-empty inputs");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw InputError("weighted quantile needs positive total weight");
  double cum = 0.0;
  for (std::size_t i : order) {
    cum += weights[i];
    if (cum >= q * total * (1.0 - 1e-12)) return values[i];
  }
  return values[order.back()];
}

// ---------------------------------------------------------------------------

struct Effects::Accum {
  double value = 0.0;
  double dmu = 0.0;
  Eigen::VectorXd dcanon;

  void add(const Accum& o) {
    value += o.value;
    dmu += o.dmu;
    dcanon += o.dcanon;
  }
};

// Profiles to average over. `own` carries the studied side; `opp` the
// opponents (empty for factorial designs). Uniform conjoint supports pair
// every own profile with every opponent.
struct Effects::Support {
  std::vector<Profile> own;
  std::vector<Profile> opp;
  bool cross = false;
  std::string filter;

  int size() const {
    return static_cast<int>(cross ? own.size() * opp.size() : own.size());
  }
};

Effects::Effects(CovarianceBundle cb, const Problem& pr, Dataset data, int threads)
    : cb_(std::move(cb)), data_(std::move(data)), layout_(pr.layout), threads_(threads) {
  if (data_.rows() != pr.rows()) throw InputError("dataset and problem disagree on the number of rows");
  const int K = cb_.state.clusters();
  const Eigen::VectorXd theta = free_parameters(cb_.state, cb_.layout);
  clusters_.resize(K);
  for (int k = 0; k < K; ++k) {
    const Eigen::MatrixXd& l = cb_.lifting[k];
    Cluster& c = clusters_[k];
    c.canon.assign(l.rows(), -1);
    std::map<std::vector<double>, int> seen;
    std::vector<Eigen::Index> reps;
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      if (l.cols() == 0 || (l.row(r).array() == 0.0).all()) continue;
      std::vector<double> key(l.cols());
      for (Eigen::Index a = 0; a < l.cols(); ++a) key[a] = l(r, a);
      auto [it, fresh] = seen.try_emplace(std::move(key), static_cast<int>(reps.size()));
      if (fresh) reps.push_back(r);
      c.canon[r] = it->second;
    }
    c.lift.resize(static_cast<Eigen::Index>(reps.size()), l.cols());
    for (std::size_t i = 0; i < reps.size(); ++i) c.lift.row(static_cast<Eigen::Index>(i)) = l.row(reps[i]);
    c.coef = c.lift * theta.segment(cb_.layout.beta_offset[k], cb_.layout.beta_dim(k));
  }
  responsibilities_ = estep_responsibilities(cb_.state, pr);
  pi_bar_ = mean_cluster_probs(log_cluster_probs(cb_.state.phi, pr.moderators), pr);
}

Eigen::VectorXd Effects::raw_coefficients(int k) const {
  const Cluster& c = clusters_.at(k);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.canon.size()));
  for (std::size_t r = 0; r < c.canon.size(); ++r)
    if (c.canon[r] >= 0) out(static_cast<Eigen::Index>(r)) = c.coef(c.canon[r]);
  return out;
}

Eigen::VectorXi Effects::counts(const Profile& p, int k) const {
  const Cluster& c = clusters_[k];
  Eigen::VectorXi n = Eigen::VectorXi::Zero(c.coef.size());
  const int J = layout_.factors();
  auto bump = [&](int col) {
    if (c.canon[col] >= 0) ++n(c.canon[col]);
  };
  for (int j = 0; j < J; ++j) bump(layout_.main_col(j, p[j]));
  if (layout_.interactions())
    for (int j = 0; j < J; ++j)
      for (int h = j + 1; h < J; ++h) bump(layout_.cell_col(j, p[j], h, p[h]));
  return n;
}

double Effects::predictor(const Eigen::VectorXi& n, int k) const {
  const Eigen::VectorXd& b = clusters_[k].coef;
  double v = cb_.state.mu;
  for (Eigen::Index c = 0; c < n.size(); ++c)
    if (n(c) != 0) v += n(c) * b(c);
  return v;
}

// Uniform supports enumerate every factor except the ones the contrast sets.
Effects::Support Effects::support(std::span<const int> studied, std::span<const int> set, Side side,
                                  Marginalization mode) const {
  const auto& specs = data_.factors;
  const bool conjoint = data_.kind == DesignKind::forced_choice;
  Support sup;
  sup.filter = restriction_description(specs, studied);
  if (mode == Marginalization::empirical) {
    const std::vector<Profile>& own = (conjoint && side == Side::right) ? data_.right : data_.left;
    for (int r : apply_restrictions(own, specs, studied)) {
      sup.own.push_back(own[r]);
      if (conjoint) sup.opp.push_back(side == Side::right ? data_.left[r] : data_.right[r]);
    }
    return sup;
  }
  const auto mask = exclusion_masks(specs, studied);
  for (Profile& p : enumerate_profiles(specs, set))
    if (passes(p, mask)) sup.own.push_back(std::move(p));
  if (sup.own.empty())
    throw InputError("uniform marginalization: restrictions leave no combinations (" + sup.filter + ")");
  if (conjoint) {
    for (Profile& p : enumerate_profiles(specs, {}))
      if (admissible(p, specs)) sup.opp.push_back(std::move(p));
    sup.cross = true;
    if (static_cast<long long>(sup.own.size()) * static_cast<long long>(sup.opp.size()) > kEnumerationLimit)
      throw InputError("uniform marginalization needs too many profile pairs");
  }
  return sup;
}

// Sums sign * (p(set_a) - p(set_b)) over the support, or sign * p(set_a) when
// set_b is empty. Right-side terms are Pr(Y = 0), hence the sign flip.
void Effects::contrast(const Support& sup, int k, Side side, std::span<const std::pair<int, int>> set_a,
                       std::span<const std::pair<int, int>> set_b, Accum& acc) const {
  const bool conjoint = data_.kind == DesignKind::forced_choice;
  const double sign = (conjoint && side == Side::right) ? -1.0 : 1.0;
  const bool single = set_b.empty();
  const int ncanon = static_cast<int>(clusters_[k].coef.size());
  const int n_opp = static_cast<int>(sup.opp.size());

  std::vector<Eigen::VectorXi> opp_counts(sup.opp.size());
  for (std::size_t o = 0; o < sup.opp.size(); ++o) opp_counts[o] = counts(sup.opp[o], k);

  auto encode = [&](const Profile& base, std::span<const std::pair<int, int>> set, int opp) {
    Profile p = base;
    for (const auto& [f, l] : set) p[f] = l;
    Eigen::VectorXi n = counts(p, k);
    if (conjoint) n = side == Side::left ? Eigen::VectorXi(n - opp_counts[opp]) : Eigen::VectorXi(opp_counts[opp] - n);
    return n;
  };

  const int total = sup.size();
  constexpr int chunk = 512;
  std::vector<Accum> parts(detail::chunk_count(total, chunk));
  for (Accum& a : parts) a.dcanon = Eigen::VectorXd::Zero(ncanon);
  detail::for_each_chunk(total, chunk, threads_, [&](int c, int begin, int end) {
    Accum& a = parts[c];
    for (int t = begin; t < end; ++t) {
      const int own = sup.cross ? t / n_opp : t;
      const int opp = sup.cross ? t % n_opp : t;
      const Eigen::VectorXi na = encode(sup.own[own], set_a, opp);
      const double pa = sigmoid(predictor(na, k));
      const double wa = pa * (1.0 - pa);
      if (single) {
        a.value += sign * pa;
        a.dmu += sign * wa;
        a.dcanon += (sign * wa) * na.cast<double>();
        continue;
      }
      const Eigen::VectorXi nb = encode(sup.own[own], set_b, opp);
      const double pb = sigmoid(predictor(nb, k));
      const double wb = pb * (1.0 - pb);
      a.value += sign * (pa - pb);
      a.dmu += sign * (wa - wb);
      for (int i = 0; i < ncanon; ++i) a.dcanon(i) += sign * (wa * na(i) - wb * nb(i));
    }
  });
  for (const Accum& a : parts) acc.add(a);
}

Estimate Effects::finish(const Accum& acc, int k, int support, std::string filter) const {
  Estimate e;
  e.support = support;
  e.filter = std::move(filter);
  e.value = acc.value / support;
  e.gradient = Eigen::VectorXd::Zero(cb_.layout.size);
  e.gradient(0) = acc.dmu / support;
  if (clusters_[k].lift.cols() > 0)
    e.gradient.segment(cb_.layout.beta_offset[k], cb_.layout.beta_dim(k)) =
        clusters_[k].lift.transpose() * (acc.dcanon / support);
  e.se = delta_method(cb_, e.gradient);
  return e;
}

Estimate Effects::side_average(const Estimate& left, const Estimate& right) const {
  Estimate e;
  e.value = 0.5 * (left.value + right.value);
  e.gradient = 0.5 * (left.gradient + right.gradient);
  e.se = delta_method(cb_, e.gradient);
  e.support = left.support + right.support;
  e.filter = left.filter == "none" ? "none" : "per side: " + left.filter;
  return e;
}

namespace {

void check_level(const Layout& layout, int j, int l) {
  if (j < 0 || j >= layout.factors()) throw InputError("factor index " + std::to_string(j) + " out of range");
  if (l < 0 || l >= layout.levels(j))
    throw InputError("level " + std::to_string(l) + " out of range for factor " + std::to_string(j));
}

}  // namespace

Estimate Effects::amce_side(int j, int l, int l_prime, int k, Side side, Marginalization mode) const {
  check_level(layout_, j, l);
  check_level(layout_, j, l_prime);
  if (k < 0 || k >= clusters()) throw InputError("cluster index " + std::to_string(k) + " out of range");
  const int studied[] = {j};
  const Support sup = support(studied, studied, side, mode);
  Accum acc;
  acc.dcanon = Eigen::VectorXd::Zero(clusters_[k].coef.size());
  const std::pair<int, int> a[] = {{j, l}}, b[] = {{j, l_prime}};
  contrast(sup, k, side, a, b, acc);
  return finish(acc, k, sup.size(), sup.filter);
}

Estimate Effects::amce_factorial(int j, int l, int l_prime, int k, Marginalization mode) const {
  if (data_.kind != DesignKind::factorial) throw InputError("factorial AMCE requested for a forced-choice design");
  return amce_side(j, l, l_prime, k, Side::left, mode);
}

Estimate Effects::amce_conjoint(int j, int l, int l_prime, int k, Marginalization mode) const {
  if (data_.kind != DesignKind::forced_choice) throw InputError("conjoint AMCE requested for a factorial design");
  return side_average(amce_side(j, l, l_prime, k, Side::left, mode), amce_side(j, l, l_prime, k, Side::right, mode));
}

Estimate Effects::amce(int j, int l, int l_prime, int k, Marginalization mode) const {
  return data_.kind == DesignKind::forced_choice ? amce_conjoint(j, l, l_prime, k, mode)
                                                 : amce_factorial(j, l, l_prime, k, mode);
}

Estimate Effects::amie(int j, int s, std::pair<int, int> lf, std::pair<int, int> qr, int k,
                       Marginalization mode) const {
  if (j == s) throw InputError("interaction effect needs two different factors");
  check_level(layout_, j, lf.first);
  check_level(layout_, j, lf.second);
  check_level(layout_, s, qr.first);
  check_level(layout_, s, qr.second);
  if (k < 0 || k >= clusters()) throw InputError("cluster index " + std::to_string(k) + " out of range");
  const int studied[] = {j, s};
  const std::pair<int, int> ace_a[] = {{j, lf.first}, {s, qr.first}}, ace_b[] = {{j, lf.second}, {s, qr.second}};
  const std::pair<int, int> dj_a[] = {{j, lf.first}}, dj_b[] = {{j, lf.second}};
  const std::pair<int, int> ds_a[] = {{s, qr.first}}, ds_b[] = {{s, qr.second}};

  const int only_j[] = {j}, only_s[] = {s};
  auto one_side = [&](Side side) {
    auto part = [&](std::span<const int> set, std::span<const std::pair<int, int>> a,
                    std::span<const std::pair<int, int>> b) {
      const Support sup = support(studied, set, side, mode);
      Accum acc;
      acc.dcanon = Eigen::VectorXd::Zero(clusters_[k].coef.size());
      contrast(sup, k, side, a, b, acc);
      return finish(acc, k, sup.size(), sup.filter);
    };
    const Estimate ea = part(studied, ace_a, ace_b);
    const Estimate ej = part(only_j, dj_a, dj_b);
    const Estimate es = part(only_s, ds_a, ds_b);
    Estimate e = ea;
    e.value = ea.value - ej.value - es.value;
    e.gradient = ea.gradient - ej.gradient - es.gradient;
    e.se = delta_method(cb_, e.gradient);
    return e;
  };
  if (data_.kind == DesignKind::factorial) return one_side(Side::left);
  return side_average(one_side(Side::left), one_side(Side::right));
}

Estimate Effects::marginal_mean(int j, int l, int k, Marginalization mode) const {
  if (data_.kind != DesignKind::forced_choice) throw InputError("marginal means need a forced-choice design");
  check_level(layout_, j, l);
  if (k < 0 || k >= clusters()) throw InputError("cluster index " + std::to_string(k) + " out of range");
  // no restriction filtering, so the means center on one half
  auto side_mean = [&](Side side) {
    const int set[] = {j};
    const Support sup = support({}, set, side, mode);
    Accum acc;
    acc.dcanon = Eigen::VectorXd::Zero(clusters_[k].coef.size());
    const std::pair<int, int> a[] = {{j, l}};
    contrast(sup, k, side, a, {}, acc);
    return finish(acc, k, sup.size(), "none");
  };
  const Estimate left = side_mean(Side::left), right = side_mean(Side::right);
  Estimate e;
  // right holds -Pr(Y = 1), so 1 + right.value is Pr(Y = 0)
  e.value = 0.5 * (left.value + (1.0 + right.value));
  e.gradient = 0.5 * (left.gradient + right.gradient);
  e.se = delta_method(cb_, e.gradient);
  e.support = left.support + right.support;
  e.filter = "none";
  return e;
}

Estimate Effects::moderator_effect(int covariate, double x0, double x1, int k) const {
  const Eigen::MatrixXd& X = data_.moderators;
  if (covariate <= 0 || covariate >= X.cols())
    throw InputError("moderator index " + std::to_string(covariate) + " is not a covariate");
  if (k < 0 || k >= clusters()) throw InputError("cluster index " + std::to_string(k) + " out of range");
  const Eigen::MatrixXd& phi = cb_.state.phi;
  const int K = clusters();
  const FreeLayout& fl = cb_.layout;
  Estimate e;
  e.gradient = Eigen::VectorXd::Zero(fl.size);
  e.support = static_cast<int>(X.rows());
  e.filter = "none";
  auto probs = [&](Eigen::RowVectorXd x) {
    Eigen::RowVectorXd eta = x * phi;
    eta.array() -= eta.maxCoeff();
    Eigen::RowVectorXd p = eta.array().exp();
    return Eigen::RowVectorXd(p / p.sum());
  };
  double sum = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Eigen::RowVectorXd a = X.row(i), b = X.row(i);
    a(covariate) = x1;
    b(covariate) = x0;
    const Eigen::RowVectorXd pa = probs(a), pb = probs(b);
    sum += pa(k) - pb(k);
    for (int l = 1; l < K; ++l) {
      const double ca = pa(k) * ((l == k ? 1.0 : 0.0) - pa(l));
      const double cb = pb(k) * ((l == k ? 1.0 : 0.0) - pb(l));
      for (Eigen::Index m = 0; m < X.cols(); ++m) e.gradient(fl.phi_at(l, static_cast<int>(m))) += ca * a(m) - cb * b(m);
    }
  }
  e.value = sum / static_cast<double>(X.rows());
  e.gradient /= static_cast<double>(X.rows());
  e.se = delta_method(cb_, e.gradient);
  return e;
}

std::pair<double, double> Effects::moderator_contrast(int covariate) const {
  const Eigen::VectorXd col = data_.moderators.col(covariate);
  const bool binary = (col.array() == 0.0 || col.array() == 1.0).all();
  if (binary) return {col.minCoeff(), col.maxCoeff()};
  const std::vector<double> values(col.data(), col.data() + col.size());
  const std::vector<double> ones(values.size(), 1.0);
  return {weighted_quantile(values, ones, 0.25), weighted_quantile(values, ones, 0.75)};
}

namespace {

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

EffectTable Effects::table(const EffectRequest& req) const {
  EffectTable out;
  const auto& specs = data_.factors;
  const int J = layout_.factors();
  if (!req.baselines.empty() && static_cast<int>(req.baselines.size()) != J)
    throw InputError("one baseline level per factor is required");
  auto baseline = [&](int j) { return req.baselines.empty() ? 0 : req.baselines[j]; };
  for (int k = 0; k < clusters(); ++k) {
    for (int j = 0; j < J; ++j) {
      const int base = baseline(j);
      check_level(layout_, j, base);
      for (int l = 0; l < layout_.levels(j); ++l) {
        if (l == base) continue;
        const Estimate e = amce(j, l, base, k, req.mode);
        out.rows.push_back({"amce", k, specs[j].name, specs[j].levels[l] + " vs " + specs[j].levels[base], e.value,
                            e.se, req.mode, e.filter});
      }
    }
    for (const InteractionRequest& ir : req.interactions) {
      const Estimate e = amie(ir.factor_a, ir.factor_b, {ir.level_a, ir.base_a}, {ir.level_b, ir.base_b}, k, req.mode);
      const auto& fa = specs[ir.factor_a];
      const auto& fb = specs[ir.factor_b];
      out.rows.push_back({"amie", k, fa.name + ":" + fb.name,
                          "(" + fa.levels[ir.level_a] + "," + fb.levels[ir.level_b] + ") vs (" + fa.levels[ir.base_a] +
                              "," + fb.levels[ir.base_b] + ")",
                          e.value, e.se, req.mode, e.filter});
    }
    if (req.marginal_means && data_.kind == DesignKind::forced_choice)
      for (int j = 0; j < J; ++j)
        for (int l = 0; l < layout_.levels(j); ++l) {
          const Estimate e = marginal_mean(j, l, k, req.mode);
          out.rows.push_back({"marginal_mean", k, specs[j].name, specs[j].levels[l], e.value, e.se, req.mode, "none"});
        }
    if (req.moderators)
      for (int c = 1; c < data_.moderators.cols(); ++c) {
        const auto [x0, x1] = moderator_contrast(c);
        const std::string& name = data_.moderator_names[c];
        if (x0 == x1) {
          if (k == 0) out.warnings.push_back("moderator " + name + " is constant; its effect is reported as 0");
          out.rows.push_back({"moderator", k, name, number(x1) + " vs " + number(x0), 0.0, 0.0,
                              Marginalization::empirical, "none"});
          continue;
        }
        const Estimate e = moderator_effect(c, x0, x1, k);
        out.rows.push_back({"moderator", k, name, number(x1) + " vs " + number(x0), e.value, e.se,
                            Marginalization::empirical, "none"});
      }
  }
  return out;
}

std::vector<ClusterProfile> Effects::cluster_profiles() const {
  const Eigen::MatrixXd& X = data_.moderators;
  std::vector<ClusterProfile> out;
  for (int k = 0; k < clusters(); ++k) {
    ClusterProfile cp;
    cp.cluster = k;
    cp.pi_bar = pi_bar_(k);
    cp.mean_responsibility = responsibilities_.col(k).mean();
    const Eigen::VectorXd w = responsibilities_.col(k);
    const std::vector<double> weights(w.data(), w.data() + w.size());
    for (Eigen::Index c = 1; c < X.cols(); ++c) {
      ModeratorSummary ms;
      ms.name = data_.moderator_names[c];
      const Eigen::VectorXd col = X.col(c);
      const std::vector<double> values(col.data(), col.data() + col.size());
      const double total = w.sum();
      if (total > 0.0) {
        ms.mean = w.dot(col) / total;
        ms.q25 = weighted_quantile(values, weights, 0.25);
        ms.median = weighted_quantile(values, weights, 0.5);
        ms.q75 = weighted_quantile(values, weights, 0.75);
      }
      cp.moderators.push_back(std::move(ms));
    }
    out.push_back(std::move(cp));
  }
  return out;
}

}  // namespace cjmix
