#include "cjmix/config.hpp"

#include "cjmix/errors.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>

namespace cjmix {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw InputError("config: " + where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw InputError("config: unknown key '" + key + "' in " + where);
  }
}

template <class T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw InputError("config: " + where + "." + key + " has the wrong type");
  }
}

int factor_index(const std::vector<FactorSpec>& specs, const std::string& name, const std::string& where) {
  for (std::size_t j = 0; j < specs.size(); ++j)
    if (specs[j].name == name) return static_cast<int>(j);
  throw InputError("config: " + where + " names unknown factor '" + name + "'");
}

int level_of(const FactorSpec& f, const std::string& label, const std::string& where) {
  const int l = f.level_index(label);
  if (l < 0) throw InputError("config: " + where + " names unknown level '" + label + "' of factor '" + f.name + "'");
  return l;
}

std::vector<FactorSpec> parse_factors(const json& arr) {
  if (!arr.is_array()) throw InputError("config: factors must be an array");
  std::vector<FactorSpec> specs;
  for (const auto& f : arr) {
    check_keys(f, "factor", {"name", "levels", "ordered", "restrictions"});
    FactorSpec spec;
    spec.name = get_or<std::string>(f, "name", "", "factor");
    if (spec.name.empty()) throw InputError("config: every factor needs a name");
    spec.levels = get_or<std::vector<std::string>>(f, "levels", {}, "factor " + spec.name);
    spec.ordered = get_or<bool>(f, "ordered", false, "factor " + spec.name);
    specs.push_back(std::move(spec));
  }
  // Restrictions refer to partners by name, so resolve them after all factors exist.
  for (std::size_t j = 0; j < specs.size(); ++j) {
    const json& f = arr[j];
    if (!f.contains("restrictions")) continue;
    const std::string where = "factor " + specs[j].name + " restrictions";
    if (!f["restrictions"].is_array()) throw InputError("config: " + where + " must be an array");
    for (const auto& r : f["restrictions"]) {
      check_keys(r, where, {"partner", "exclude"});
      Restriction res;
      res.partner = factor_index(specs, get_or<std::string>(r, "partner", "", where), where);
      const auto pairs = get_or<std::vector<std::vector<std::string>>>(r, "exclude", {}, where);
      for (const auto& p : pairs) {
        if (p.size() != 2) throw InputError("config: " + where + " exclusions are [own level, partner level] pairs");
        res.excluded.emplace_back(level_of(specs[j], p[0], where), level_of(specs[res.partner], p[1], where));
      }
      specs[j].restrictions.push_back(std::move(res));
    }
  }
  validate_specs(specs);
  return symmetrize_restrictions(std::move(specs));
}

std::vector<ModeratorSpec> parse_moderators(const json& arr) {
  if (!arr.is_array()) throw InputError("config: moderators must be an array");
  std::vector<ModeratorSpec> out;
  std::set<std::string> seen;
  for (const auto& m : arr) {
    ModeratorSpec spec;
    if (m.is_string()) {
      spec.name = m.get<std::string>();
    } else {
      check_keys(m, "moderator", {"name", "baseline", "levels"});
      spec.name = get_or<std::string>(m, "name", "", "moderator");
      if (m.contains("baseline")) spec.baseline = get_or<std::string>(m, "baseline", "", "moderator " + spec.name);
      spec.levels = get_or<std::vector<std::string>>(m, "levels", {}, "moderator " + spec.name);
      if (!spec.levels.empty()) {
        if (!spec.baseline) spec.baseline = spec.levels.front();
        if (std::find(spec.levels.begin(), spec.levels.end(), *spec.baseline) == spec.levels.end())
          throw InputError("config: baseline of moderator " + spec.name + " is not among its levels");
      }
    }
    if (spec.name.empty()) throw InputError("config: every moderator needs a name");
    if (!seen.insert(spec.name).second) throw InputError("config: moderator " + spec.name + " listed twice");
    out.push_back(std::move(spec));
  }
  return out;
}

void parse_simulate(const json& s, RunConfig& cfg) {
  check_keys(s, "simulate", {"replicates", "factors", "levels", "clusters", "respondents", "tasks", "moderators",
                             "moderator_rho", "coef_seed", "data_seed", "truth_draws", "mu"});
  SimulateConfig sim;
  SimDesign& d = sim.design;
  sim.replicates = get_or<int>(s, "replicates", sim.replicates, "simulate");
  d.factors = get_or<int>(s, "factors", d.factors, "simulate");
  if (s.contains("levels")) {
    d.levels = get_or<std::vector<int>>(s, "levels", {}, "simulate");
  } else {
    d.levels.assign(std::max(d.factors, 0), 3);
  }
  d.clusters = get_or<int>(s, "clusters", d.clusters, "simulate");
  d.respondents = get_or<int>(s, "respondents", d.respondents, "simulate");
  d.tasks = get_or<int>(s, "tasks", d.tasks, "simulate");
  d.moderator_count = get_or<int>(s, "moderators", d.moderator_count, "simulate");
  d.moderator_rho = get_or<double>(s, "moderator_rho", d.moderator_rho, "simulate");
  d.coef_seed = get_or<std::uint64_t>(s, "coef_seed", d.coef_seed, "simulate");
  d.data_seed = get_or<std::uint64_t>(s, "data_seed", d.data_seed, "simulate");
  d.truth_mc_draws = get_or<long long>(s, "truth_draws", d.truth_mc_draws, "simulate");
  d.mu = get_or<double>(s, "mu", d.mu, "simulate");
  cfg.simulate = std::move(sim);
}

}  // namespace

void RunConfig::validate() const {
  if (clusters < 1) throw InputError("config: model.clusters must be at least 1");
  if (lambda && !(*lambda > 0.0)) throw InputError("config: model.lambda must be positive or \"auto\"");
  if (!lambda && tune.budget < 5) throw InputError("config: lambda \"auto\" needs tune.budget >= 5");
  if (gamma != 0.0 && gamma != 1.0) throw InputError("config: model.gamma must be 0 or 1");
  if (!(sigma2_phi > 0.0)) throw InputError("config: model.sigma2_phi must be positive");
  if (!(model.fusion_threshold > 0.0)) throw InputError("config: model.fusion_threshold must be positive");
  if (!(fit.tol_objective > 0.0) || !(fit.tol_param > 0.0)) throw InputError("config: fit tolerances must be positive");
  if (fit.max_iterations < 1) throw InputError("config: fit.max_iterations must be at least 1");
  if (fit.phi_steps < 1) throw InputError("config: fit.phi_steps must be at least 1");
  if (!(fit.cg_tolerance > 0.0)) throw InputError("config: fit.cg_tolerance must be positive");
  if (fit.threads < 1) throw InputError("threads must be at least 1");
  if (!(tune.lambda_lo > 0.0) || !(tune.lambda_hi > tune.lambda_lo))
    throw InputError("config: tune needs 0 < lambda_min < lambda_max");
  if (tune.grid_points < 2 || tune.budget < tune.grid_points)
    throw InputError("config: tune needs 2 <= grid_points <= budget");
  if (!(covariance_epsilon > 0.0)) throw InputError("config: effects.covariance_epsilon must be positive");
  if (simulate) {
    simulate->design.validate();
    if (simulate->replicates < 2) throw InputError("config: simulate.replicates must be at least 2");
  }
}

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("config: not valid JSON: ") + e.what());
  }
  check_keys(doc, "the top level", {"design", "factors", "moderators", "model", "fit", "seed", "tune", "effects", "simulate"});
  RunConfig cfg;

  const auto kind = get_or<std::string>(doc, "design", "forced_choice", "config");
  if (kind == "forced_choice") {
    cfg.kind = DesignKind::forced_choice;
  } else if (kind == "factorial") {
    cfg.kind = DesignKind::factorial;
  } else {
    throw InputError("config: design must be \"factorial\" or \"forced_choice\", got \"" + kind + "\"");
  }
  if (doc.contains("factors")) cfg.factors = parse_factors(doc["factors"]);
  if (doc.contains("moderators")) cfg.moderators = parse_moderators(doc["moderators"]);

  if (doc.contains("model")) {
    const json& m = doc["model"];
    check_keys(m, "model", {"clusters", "lambda", "gamma", "sigma2_phi", "interactions", "log_mode", "weights",
                            "fusion_threshold", "allow_improper"});
    cfg.clusters = get_or<int>(m, "clusters", cfg.clusters, "model");
    if (m.contains("lambda")) {
      const json& l = m["lambda"];
      if (l.is_string() && l.get<std::string>() == "auto") {
        cfg.lambda.reset();
      } else if (l.is_number()) {
        cfg.lambda = l.get<double>();
      } else {
        throw InputError("config: model.lambda must be a number or \"auto\"");
      }
    } else {
      cfg.lambda.reset();
    }
    cfg.gamma = get_or<double>(m, "gamma", cfg.gamma, "model");
    cfg.sigma2_phi = get_or<double>(m, "sigma2_phi", cfg.sigma2_phi, "model");
    cfg.model.interactions = get_or<bool>(m, "interactions", cfg.model.interactions, "model");
    cfg.model.log_mode = get_or<bool>(m, "log_mode", cfg.model.log_mode, "model");
    cfg.model.weights = get_or<bool>(m, "weights", cfg.model.weights, "model");
    cfg.model.fusion_threshold = get_or<double>(m, "fusion_threshold", cfg.model.fusion_threshold, "model");
    cfg.fit.allow_improper = get_or<bool>(m, "allow_improper", cfg.fit.allow_improper, "model");
  }
  if (doc.contains("fit")) {
    const json& f = doc["fit"];
    check_keys(f, "fit", {"tol_objective", "tol_param", "max_iterations", "squarem", "phi_steps", "cg_tolerance"});
    cfg.fit.tol_objective = get_or<double>(f, "tol_objective", cfg.fit.tol_objective, "fit");
    cfg.fit.tol_param = get_or<double>(f, "tol_param", cfg.fit.tol_param, "fit");
    cfg.fit.max_iterations = get_or<int>(f, "max_iterations", cfg.fit.max_iterations, "fit");
    cfg.fit.squarem = get_or<bool>(f, "squarem", cfg.fit.squarem, "fit");
    cfg.fit.phi_steps = get_or<int>(f, "phi_steps", cfg.fit.phi_steps, "fit");
    cfg.fit.cg_tolerance = get_or<double>(f, "cg_tolerance", cfg.fit.cg_tolerance, "fit");
  }
  cfg.fit.seed = get_or<std::uint64_t>(doc, "seed", cfg.fit.seed, "config");
  if (doc.contains("tune")) {
    const json& t = doc["tune"];
    check_keys(t, "tune", {"budget", "lambda_min", "lambda_max", "grid_points"});
    cfg.tune.budget = get_or<int>(t, "budget", cfg.tune.budget, "tune");
    cfg.tune.lambda_lo = get_or<double>(t, "lambda_min", cfg.tune.lambda_lo, "tune");
    cfg.tune.lambda_hi = get_or<double>(t, "lambda_max", cfg.tune.lambda_hi, "tune");
    cfg.tune.grid_points = get_or<int>(t, "grid_points", cfg.tune.grid_points, "tune");
  }
  if (doc.contains("effects")) {
    const json& e = doc["effects"];
    check_keys(e, "effects", {"marginalization", "baselines", "interactions", "marginal_means", "moderators",
                              "covariance_epsilon"});
    const auto mode = get_or<std::string>(e, "marginalization", "empirical", "effects");
    if (mode == "empirical") {
      cfg.marginalization = Marginalization::empirical;
    } else if (mode == "uniform") {
      cfg.marginalization = Marginalization::uniform;
    } else {
      throw InputError("config: effects.marginalization must be \"empirical\" or \"uniform\"");
    }
    if (e.contains("baselines")) {
      if (!e["baselines"].is_object()) throw InputError("config: effects.baselines maps factor names to levels");
      for (const auto& [factor, level] : e["baselines"].items()) {
        if (!level.is_string()) throw InputError("config: effects.baselines." + factor + " must be a level label");
        cfg.baselines.emplace_back(factor, level.get<std::string>());
      }
    }
    if (e.contains("interactions")) {
      if (!e["interactions"].is_array()) throw InputError("config: effects.interactions must be an array");
      for (const auto& r : e["interactions"]) {
        check_keys(r, "effects.interactions", {"factors", "levels", "baselines"});
        const auto f = get_or<std::vector<std::string>>(r, "factors", {}, "effects.interactions");
        const auto l = get_or<std::vector<std::string>>(r, "levels", {}, "effects.interactions");
        const auto b = get_or<std::vector<std::string>>(r, "baselines", {}, "effects.interactions");
        if (f.size() != 2 || l.size() != 2 || b.size() != 2)
          throw InputError("config: each interaction needs two factors, two levels and two baselines");
        cfg.interactions.push_back({f[0], f[1], l[0], b[0], l[1], b[1]});
      }
    }
    cfg.marginal_means = get_or<bool>(e, "marginal_means", cfg.marginal_means, "effects");
    cfg.moderator_effects = get_or<bool>(e, "moderators", cfg.moderator_effects, "effects");
    cfg.covariance_epsilon = get_or<double>(e, "covariance_epsilon", cfg.covariance_epsilon, "effects");
  }
  if (doc.contains("simulate")) parse_simulate(doc["simulate"], cfg);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string canonical_config(const RunConfig& cfg) {
  json doc;
  doc["design"] = cfg.kind == DesignKind::forced_choice ? "forced_choice" : "factorial";
  json factors = json::array();
  for (const auto& f : cfg.factors) {
    json jf{{"name", f.name}, {"levels", f.levels}, {"ordered", f.ordered}};
    json rs = json::array();
    for (const auto& r : f.restrictions) {
      json ex = json::array();
      for (const auto& [a, b] : r.excluded) ex.push_back({f.levels[a], cfg.factors[r.partner].levels[b]});
      rs.push_back({{"partner", cfg.factors[r.partner].name}, {"exclude", ex}});
    }
    jf["restrictions"] = rs;
    factors.push_back(jf);
  }
  doc["factors"] = factors;
  if (cfg.moderators) {
    json mods = json::array();
    for (const auto& m : *cfg.moderators) {
      json jm{{"name", m.name}, {"levels", m.levels}};
      jm["baseline"] = m.baseline ? json(*m.baseline) : json(nullptr);
      mods.push_back(jm);
    }
    doc["moderators"] = mods;
  }
  doc["model"] = {{"clusters", cfg.clusters},
                  {"lambda", cfg.lambda ? json(*cfg.lambda) : json("auto")},
                  {"gamma", cfg.gamma},
                  {"sigma2_phi", cfg.sigma2_phi},
                  {"interactions", cfg.model.interactions},
                  {"log_mode", cfg.model.log_mode},
                  {"weights", cfg.model.weights},
                  {"fusion_threshold", cfg.model.fusion_threshold},
                  {"allow_improper", cfg.fit.allow_improper}};
  doc["fit"] = {{"tol_objective", cfg.fit.tol_objective}, {"tol_param", cfg.fit.tol_param},
                {"max_iterations", cfg.fit.max_iterations}, {"squarem", cfg.fit.squarem},
                {"phi_steps", cfg.fit.phi_steps}, {"cg_tolerance", cfg.fit.cg_tolerance}};
  doc["seed"] = cfg.fit.seed;
  doc["tune"] = {{"budget", cfg.tune.budget}, {"lambda_min", cfg.tune.lambda_lo},
                 {"lambda_max", cfg.tune.lambda_hi}, {"grid_points", cfg.tune.grid_points}};
  json baselines = json::object();
  for (const auto& [f, l] : cfg.baselines) baselines[f] = l;
  json inter = json::array();
  for (const auto& r : cfg.interactions)
    inter.push_back({{"factors", {r.factor_a, r.factor_b}},
                     {"levels", {r.level_a, r.level_b}},
                     {"baselines", {r.base_a, r.base_b}}});
  doc["effects"] = {{"marginalization", to_string(cfg.marginalization)},
                    {"baselines", baselines},
                    {"interactions", inter},
                    {"marginal_means", cfg.marginal_means},
                    {"moderators", cfg.moderator_effects},
                    {"covariance_epsilon", cfg.covariance_epsilon}};
  if (cfg.simulate) {
    const SimDesign& d = cfg.simulate->design;
    doc["simulate"] = {{"replicates", cfg.simulate->replicates}, {"factors", d.factors},
                       {"levels", d.levels}, {"clusters", d.clusters},
                       {"respondents", d.respondents}, {"tasks", d.tasks},
                       {"moderators", d.moderator_count}, {"moderator_rho", d.moderator_rho},
                       {"coef_seed", d.coef_seed}, {"data_seed", d.data_seed},
                       {"truth_draws", d.truth_mc_draws}, {"mu", d.mu}};
  }
  return doc.dump();
}

EffectRequest effect_request(const RunConfig& cfg, const Dataset& data) {
  EffectRequest req;
  req.mode = cfg.marginalization;
  req.marginal_means = cfg.marginal_means;
  req.moderators = cfg.moderator_effects;
  const auto& specs = data.factors;
  req.baselines.assign(specs.size(), 0);
  for (const auto& [factor, level] : cfg.baselines) {
    const int j = factor_index(specs, factor, "effects.baselines");
    req.baselines[j] = level_of(specs[j], level, "effects.baselines");
  }
  for (const auto& r : cfg.interactions) {
    InteractionRequest ir;
    ir.factor_a = factor_index(specs, r.factor_a, "effects.interactions");
    ir.factor_b = factor_index(specs, r.factor_b, "effects.interactions");
    if (ir.factor_a == ir.factor_b) throw InputError("config: an interaction needs two different factors");
    ir.level_a = level_of(specs[ir.factor_a], r.level_a, "effects.interactions");
    ir.base_a = level_of(specs[ir.factor_a], r.base_a, "effects.interactions");
    ir.level_b = level_of(specs[ir.factor_b], r.level_b, "effects.interactions");
    ir.base_b = level_of(specs[ir.factor_b], r.base_b, "effects.interactions");
    req.interactions.push_back(ir);
  }
  return req;
}

std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw NumericalError("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream bytes;
  bytes << in.rdbuf();
  return sha256_hex(bytes.str());
}

}  // namespace cjmix
