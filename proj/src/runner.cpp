#include "cjmix/runner.hpp"

#include "cjmix/errors.hpp"
#include "cjmix/ingest.hpp"
#include "cjmix/inference.hpp"
#include "cjmix/simulate.hpp"
#include "parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <exception>
#include <fstream>
#include <sstream>

namespace cjmix {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered = nlohmann::ordered_json;

// Every artifact goes through here so that text is written byte for byte.
class Writer {
 public:
  Writer(fs::path dir, RunOutcome& outcome) : dir_(std::move(dir)), outcome_(outcome) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw InputError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }
  void text(const std::string& name, const std::string& content) {
    const fs::path path = dir_ / name;
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
    out.close();
    if (!out) throw InputError("cannot write " + path.string());
    outcome_.outputs.push_back(name);
  }
  void json_file(const std::string& name, const ordered& doc) { text(name, doc.dump(2) + "\n"); }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  RunOutcome& outcome_;
};

std::string profiles_text(const Dataset& d) {
  std::ostringstream os;
  write_profiles_csv(os, d);
  return os.str();
}

std::string moderators_text(const Dataset& d) {
  std::ostringstream os;
  write_moderators_csv(os, d);
  return os.str();
}

std::string data_fingerprint(const Dataset& d) { return sha256_hex(profiles_text(d) + "\n" + moderators_text(d)); }

RunConfig effective_config(const RunRequest& req) {
  RunConfig cfg = req.config;
  cfg.fit.threads = req.threads;
  if (req.seed) {
    if (cfg.simulate) cfg.simulate->design.data_seed = *req.seed;
    cfg.fit.seed = *req.seed;
  }
  cfg.validate();
  return cfg;
}

Ingested load_data(const RunRequest& req, const RunConfig& cfg) {
  if (!req.profiles) throw InputError("--profiles is required for this command");
  return ingest_files(*req.profiles, req.moderators, cfg);
}

std::vector<std::string> raw_labels(const Layout& layout, const std::vector<FactorSpec>& specs) {
  std::vector<std::string> names(layout.columns());
  for (int j = 0; j < layout.factors(); ++j)
    for (int l = 0; l < layout.levels(j); ++l) names[layout.main_col(j, l)] = specs[j].name + "=" + specs[j].levels[l];
  if (layout.interactions())
    for (int j = 0; j < layout.factors(); ++j)
      for (int h = j + 1; h < layout.factors(); ++h)
        for (int a = 0; a < layout.levels(j); ++a)
          for (int b = 0; b < layout.levels(h); ++b)
            names[layout.cell_col(j, a, h, b)] =
                specs[j].name + "=" + specs[j].levels[a] + ":" + specs[h].name + "=" + specs[h].levels[b];
  return names;
}

ordered matrix_rows(const Eigen::MatrixXd& m) {
  ordered rows = ordered::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    ordered row = ordered::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

ordered vector_json(const Eigen::VectorXd& v) {
  ordered out = ordered::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

std::string group_label(const PenaltyGroup& g, const std::vector<FactorSpec>& specs) {
  const FactorSpec& f = specs[g.factor];
  return f.name + ":" + f.levels[g.level_a] + "|" + f.levels[g.level_b] + (g.copy ? " (copy)" : "");
}

// Canonical state from the quantities stored in the model file; both the fit
// and the effects commands go through it so their outputs agree bitwise.
ModelState restore_state(const Problem& pr, int K, double lambda, double gamma, double sigma2_phi, double mu,
                         const Eigen::MatrixXd& beta, const Eigen::MatrixXd& phi,
                         const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& bound) {
  ModelState s = make_state(pr, K, lambda, gamma, sigma2_phi);
  if (beta.rows() != pr.dim() || beta.cols() != K || phi.rows() != pr.moderator_dim() || phi.cols() != K ||
      bound.rows() != pr.penalties.size() || bound.cols() != K)
    throw InputError("model file does not match the data and configuration");
  s.mu = mu;
  s.beta = beta;
  s.phi = phi;
  s.bound = bound;
  set_free_bases(s, pr);
  s.responsibilities = estep_responsibilities(s, pr);
  s.pg_weights = estep_pg(s, pr);
  s.inv_tau2 = estep_tau(s, pr);
  return s;
}

ModelState restore_state(const Problem& pr, const ModelState& fitted) {
  return restore_state(pr, fitted.clusters(), fitted.lambda, fitted.gamma, fitted.sigma2_phi, fitted.mu, fitted.beta,
                       fitted.phi, fitted.bound);
}

ordered tune_path(const TuneResult& tr) {
  ordered path = ordered::array();
  for (const auto& e : tr.evaluations)
    path.push_back({{"lambda", e.lambda}, {"df", e.df}, {"bic", e.bic}, {"log_likelihood", e.log_likelihood},
                    {"converged", e.converged}});
  return path;
}

ordered tune_json(const TuneResult& tr, const TuneOptions& opts) {
  return {{"range", {opts.lambda_lo, opts.lambda_hi}},
          {"budget", opts.budget},
          {"evaluations", tr.evaluations.size()},
          {"best_lambda", tr.best_lambda},
          {"best_index", tr.best_index},
          {"boundary", tr.boundary},
          {"path", tune_path(tr)},
          {"trace", tr.trace}};
}

ordered manifest(const std::string& command, const RunConfig& cfg, const RunRequest& req) {
  ordered m;
  m["tool"] = "cjmix";
  m["version"] = kVersion;
  m["command"] = command;
  m["config_sha256"] = sha256_hex(canonical_config(cfg));
  m["seed"] = cfg.fit.seed;
  ordered inputs = ordered::object();
  if (req.profiles) inputs["profiles_sha256"] = file_sha256(*req.profiles);
  if (req.moderators) inputs["moderators_sha256"] = file_sha256(*req.moderators);
  m["inputs"] = inputs;
  return m;
}

ordered report_json(const IngestReport& r) {
  return {{"tasks", r.tasks},
          {"respondents", r.respondents},
          {"dropped_missing_moderators", r.dropped_missing_moderators},
          {"dropped_absent_moderators", r.dropped_absent_moderators},
          {"dropped_tasks", r.dropped_tasks},
          {"unused_moderator_rows", r.unused_moderator_rows},
          {"warnings", r.warnings}};
}

std::string effects_csv(const EffectTable& table) {
  std::string out = "quantity,cluster,factor,contrast,estimate,se,lower,upper,marginalization,filter\n";
  for (const auto& r : table.rows) {
    out += r.quantity + "," + std::to_string(r.cluster + 1) + "," + csv_field(r.factor) + "," + csv_field(r.contrast) +
           "," + format_double(r.estimate) + "," + format_double(r.se) + "," + format_double(r.estimate - 1.96 * r.se) +
           "," + format_double(r.estimate + 1.96 * r.se) + "," + to_string(r.mode) + "," + csv_field(r.filter) + "\n";
  }
  return out;
}

std::string clusters_csv(const std::vector<ClusterProfile>& profiles) {
  std::string out = "cluster,pi_bar,mean_responsibility,moderator,mean,q25,median,q75\n";
  for (const auto& cp : profiles) {
    const std::string head =
        std::to_string(cp.cluster + 1) + "," + format_double(cp.pi_bar) + "," + format_double(cp.mean_responsibility);
    if (cp.moderators.empty()) out += head + ",,,,,\n";
    for (const auto& m : cp.moderators)
      out += head + "," + csv_field(m.name) + "," + format_double(m.mean) + "," + format_double(m.q25) + "," +
             format_double(m.median) + "," + format_double(m.q75) + "\n";
  }
  return out;
}

struct Model {
  FitResult fit;
  std::optional<TuneResult> tuning;
};

Model estimate(const Problem& pr, const RunConfig& cfg) {
  Model m;
  if (cfg.lambda) {
    m.fit = fit(pr, cfg.clusters, *cfg.lambda, cfg.gamma, cfg.sigma2_phi, cfg.fit);
  } else {
    TuneResult tr = tune_lambda(pr, cfg.clusters, cfg.gamma, cfg.sigma2_phi, cfg.fit, cfg.tune);
    m.fit = std::move(*tr.best_fit);
    tr.best_fit.reset();
    m.tuning = std::move(tr);
  }
  return m;
}

// Fit statistics, covariance and effects of a canonical state.
struct Summary {
  CovarianceBundle cb;
  double log_likelihood = 0.0;
  double log_posterior = 0.0;
  double df = 0.0;
  double bic = 0.0;
};

Summary summarize(const ModelState& s, const Problem& pr, const RunConfig& cfg) {
  Summary out;
  out.log_likelihood = log_likelihood(s, pr);
  out.log_posterior = observed_log_posterior(s, pr);
  DfOptions dfo;
  dfo.threads = cfg.fit.threads;
  out.df = degrees_of_freedom(s, pr, dfo);
  out.bic = bic(out.log_likelihood, out.df, pr.rows());
  out.cb = covariance_bundle(s, pr, cfg.covariance_epsilon, cfg.fit.threads);
  return out;
}

ordered model_json(const Dataset& data, const Problem& pr, const RunConfig& cfg, const Model& m, const ModelState& s,
                   const Summary& sm) {
  const int K = s.clusters();
  ordered doc;
  doc["format"] = "cjmix-model";
  doc["format_version"] = kModelFormat;
  doc["data_sha256"] = data_fingerprint(data);
  doc["config_sha256"] = sha256_hex(canonical_config(cfg));

  ordered factors = ordered::array();
  for (const auto& f : data.factors) factors.push_back({{"name", f.name}, {"levels", f.levels}, {"ordered", f.ordered}});
  doc["design"] = {{"kind", data.kind == DesignKind::forced_choice ? "forced_choice" : "factorial"},
                   {"factors", factors},
                   {"moderators", data.moderator_names},
                   {"interactions", cfg.model.interactions},
                   {"log_mode", cfg.model.log_mode && cfg.model.interactions},
                   {"weights", cfg.model.weights},
                   {"reduced_dim", pr.dim()},
                   {"raw_dim", pr.layout.columns()},
                   {"tasks", pr.rows()},
                   {"respondents", pr.respondents()}};
  doc["hyperparameters"] = {{"clusters", K},
                            {"lambda", s.lambda},
                            {"lambda_mode", m.tuning ? "auto" : "fixed"},
                            {"gamma", s.gamma},
                            {"sigma2_phi", s.sigma2_phi},
                            {"fusion_threshold", cfg.model.fusion_threshold}};

  ordered raw = ordered::object();
  raw["labels"] = raw_labels(pr.layout, data.factors);
  ordered raw_values = ordered::array();
  for (int k = 0; k < K; ++k) raw_values.push_back(vector_json(pr.lift * s.beta.col(k)));
  raw["clusters"] = raw_values;
  ordered reduced = ordered::array();
  for (int k = 0; k < K; ++k) reduced.push_back(vector_json(s.beta.col(k)));
  ordered bound = ordered::array();
  for (int k = 0; k < K; ++k) {
    ordered col = ordered::array();
    for (int g = 0; g < pr.penalties.size(); ++g) col.push_back(static_cast<bool>(s.bound(g, k)));
    bound.push_back(std::move(col));
  }
  ordered phi = ordered::array();
  for (int k = 0; k < K; ++k) phi.push_back(vector_json(s.phi.col(k)));
  doc["estimates"] = {{"mu", s.mu}, {"beta_reduced", reduced}, {"beta_raw", raw}, {"phi", phi}, {"bound", bound}};

  ordered resp = ordered::array();
  for (int i = 0; i < pr.respondents(); ++i) {
    ordered row = ordered::array();
    for (int k = 0; k < K; ++k) row.push_back(s.responsibilities(i, k));
    resp.push_back({{"respondent_id", data.respondent_ids[i]}, {"values", row}});
  }
  doc["responsibilities"] = resp;
  doc["pi_bar"] = vector_json(mean_cluster_probs(log_cluster_probs(s.phi, pr.moderators), pr));

  const FitDiagnostics& dg = m.fit.diagnostics;
  doc["fit"] = {{"log_posterior", sm.log_posterior},
                {"log_likelihood", sm.log_likelihood},
                {"df", sm.df},
                {"bic", sm.bic},
                {"converged", m.fit.converged},
                {"converged_by", dg.converged_by},
                {"iterations", dg.iterations},
                {"em_evaluations", dg.em_evaluations},
                {"squarem_steps_rejected", dg.squarem_steps_rejected},
                {"degenerate_clusters", dg.degenerate_clusters},
                {"log_posterior_trail", dg.log_posterior_trail}};

  ordered path = ordered::array();
  if (m.tuning) {
    doc["lambda_path"] = tune_path(*m.tuning);
    doc["lambda_selection"] = {{"best_lambda", m.tuning->best_lambda},
                               {"boundary", m.tuning->boundary},
                               {"evaluations", m.tuning->evaluations.size()},
                               {"budget", cfg.tune.budget}};
  } else {
    path.push_back({{"lambda", s.lambda}, {"df", sm.df}, {"bic", sm.bic}, {"log_likelihood", sm.log_likelihood},
                    {"converged", m.fit.converged}});
    doc["lambda_path"] = path;
  }

  ordered events = ordered::array();
  for (const auto& e : m.fit.fusion.events)
    events.push_back({{"group", group_label(pr.penalties.groups[e.group], data.factors)},
                      {"cluster", e.cluster + 1},
                      {"iteration", e.iteration}});
  ordered fused = ordered::array();
  for (int k = 0; k < K; ++k)
    for (int g = 0; g < pr.penalties.size(); ++g)
      if (sm.cb.state.bound(g, k))
        fused.push_back({{"group", group_label(pr.penalties.groups[g], data.factors)}, {"cluster", k + 1}});
  doc["fusion"] = {{"events", events},
                   {"induced_constraints", m.fit.fusion.induced_constraints},
                   {"fused_groups", fused},
                   {"penalty_rank", pr.penalties.rank_m},
                   {"proper", pr.penalties.proper},
                   {"warnings", pr.penalties.warnings}};

  std::vector<std::string> params{"mu"};
  const FreeLayout& fl = sm.cb.layout;
  for (int k = 0; k < K; ++k)
    for (int i = 0; i < fl.beta_dim(k); ++i)
      params.push_back("eta[" + std::to_string(k + 1) + "][" + std::to_string(i + 1) + "]");
  for (int l = 1; l < K; ++l)
    for (int a = 0; a < fl.moderator_dim; ++a)
      params.push_back("phi[" + std::to_string(l + 1) + "][" + data.moderator_names[a] + "]");
  doc["covariance"] = {{"epsilon", sm.cb.epsilon},
                       {"pseudo_inverse", sm.cb.pseudo_inverse},
                       {"null_directions", sm.cb.null_directions},
                       {"condition", sm.cb.condition},
                       {"parameters", params},
                       {"matrix", matrix_rows(sm.cb.covariance)}};
  return doc;
}

void write_effects(Writer& w, const Summary& sm, const Problem& pr, const Dataset& data, const RunConfig& cfg,
                   RunOutcome& outcome, ordered& man) {
  const Effects fx(sm.cb, pr, data, cfg.fit.threads);
  const EffectTable table = fx.table(effect_request(cfg, data));
  w.text("effects.csv", effects_csv(table));
  w.text("clusters.csv", clusters_csv(fx.cluster_profiles()));
  for (const auto& warning : table.warnings) outcome.messages.push_back(warning);
  man["effect_warnings"] = table.warnings;
}

void check_proper(const Problem& pr, const RunConfig& cfg) {
  if (!pr.penalties.proper && !cfg.fit.allow_improper)
    throw ImproperPriorError("fusion prior is improper (penalty rank " + std::to_string(pr.penalties.rank_m) + " < " +
                             std::to_string(pr.dim()) + "); set model.allow_improper to override");
}

}  // namespace

RunOutcome run_validate(const RunRequest& req) {
  RunOutcome outcome;
  const RunConfig cfg = effective_config(req);
  const Ingested in = load_data(req, cfg);
  const Problem pr = build_problem(in.data, cfg.model);
  Writer w(req.out, outcome);
  ordered man = manifest("validate", cfg, req);
  man["data"] = report_json(in.report);
  man["problem"] = {{"reduced_dim", pr.dim()},
                    {"raw_dim", pr.layout.columns()},
                    {"penalty_groups", pr.penalties.size()},
                    {"penalty_rank", pr.penalties.rank_m},
                    {"proper", pr.penalties.proper},
                    {"warnings", pr.penalties.warnings}};
  w.json_file("validation.json", man);
  outcome.messages = in.report.warnings;
  outcome.messages.push_back(std::to_string(in.report.tasks) + " tasks from " + std::to_string(in.report.respondents) +
                             " respondents validated");
  check_proper(pr, cfg);
  return outcome;
}

RunOutcome run_tune(const RunRequest& req) {
  RunOutcome outcome;
  const RunConfig cfg = effective_config(req);
  const Ingested in = load_data(req, cfg);
  const Problem pr = build_problem(in.data, cfg.model);
  check_proper(pr, cfg);
  TuneResult tr = tune_lambda(pr, cfg.clusters, cfg.gamma, cfg.sigma2_phi, cfg.fit, cfg.tune);
  const bool converged = tr.best_fit && tr.best_fit->converged;
  Writer w(req.out, outcome);
  w.json_file("tuning.json", tune_json(tr, cfg.tune));
  ordered man = manifest("tune", cfg, req);
  man["data"] = report_json(in.report);
  man["lambda"] = {{"mode", "auto"}, {"value", tr.best_lambda}, {"evaluations", tr.evaluations.size()},
                   {"budget", cfg.tune.budget}, {"boundary", tr.boundary}};
  man["converged"] = converged;
  man["outputs"] = outcome.outputs;
  w.json_file("manifest.json", man);
  outcome.messages = in.report.warnings;
  if (tr.boundary) outcome.messages.push_back("selected lambda lies on the boundary of the search interval");
  outcome.messages.push_back("lambda = " + format_double(tr.best_lambda) + " after " +
                             std::to_string(tr.evaluations.size()) + " evaluations");
  if (!converged) {
    outcome.messages.push_back("the selected fit did not converge");
    if (req.strict) outcome.status = RunStatus::not_converged;
  }
  return outcome;
}

RunOutcome run_fit(const RunRequest& req) {
  RunOutcome outcome;
  const RunConfig cfg = effective_config(req);
  const Ingested in = load_data(req, cfg);
  const Problem pr = build_problem(in.data, cfg.model);
  check_proper(pr, cfg);
  const Model m = estimate(pr, cfg);
  const ModelState s = restore_state(pr, m.fit.state);
  const Summary sm = summarize(s, pr, cfg);

  Writer w(req.out, outcome);
  w.json_file("model.json", model_json(in.data, pr, cfg, m, s, sm));
  ordered man = manifest("fit", cfg, req);
  man["data"] = report_json(in.report);
  write_effects(w, sm, pr, in.data, cfg, outcome, man);
  man["lambda"] = {{"mode", m.tuning ? "auto" : "fixed"},
                   {"value", s.lambda},
                   {"evaluations", m.tuning ? m.tuning->evaluations.size() : 1},
                   {"budget", m.tuning ? cfg.tune.budget : 1}};
  man["converged"] = m.fit.converged;
  man["outputs"] = outcome.outputs;
  w.json_file("manifest.json", man);

  outcome.messages.insert(outcome.messages.begin(), in.report.warnings.begin(), in.report.warnings.end());
  if (m.tuning && m.tuning->boundary) outcome.messages.push_back("selected lambda lies on the boundary of the search interval");
  if (!m.fit.converged) {
    outcome.messages.push_back("fit stopped after " + std::to_string(m.fit.diagnostics.iterations) +
                               " iterations without converging");
    if (req.strict) outcome.status = RunStatus::not_converged;
  }
  return outcome;
}

RunOutcome run_effects(const RunRequest& req) {
  RunOutcome outcome;
  const RunConfig cfg = effective_config(req);
  const Ingested in = load_data(req, cfg);
  const Problem pr = build_problem(in.data, cfg.model);
  const fs::path model_path = req.out / "model.json";
  std::ifstream mf(model_path, std::ios::binary);
  if (!mf) throw InputError("effects needs a fitted model at " + model_path.string());
  json doc;
  try {
    doc = json::parse(mf);
  } catch (const json::exception& e) {
    throw InputError("cannot parse " + model_path.string() + ": " + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != "cjmix-model" || doc.at("format_version").get<int>() != kModelFormat)
      throw InputError("unsupported model file format");
    if (doc.at("data_sha256").get<std::string>() != data_fingerprint(in.data))
      throw InputError("model.json was fitted to different data");
    const auto& hp = doc.at("hyperparameters");
    const int K = hp.at("clusters").get<int>();
    const auto& est = doc.at("estimates");
    Eigen::MatrixXd beta(pr.dim(), K), phi(pr.moderator_dim(), K);
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> bound(pr.penalties.size(), K);
    for (int k = 0; k < K; ++k) {
      const auto b = est.at("beta_reduced").at(k).get<std::vector<double>>();
      const auto p = est.at("phi").at(k).get<std::vector<double>>();
      const auto g = est.at("bound").at(k).get<std::vector<bool>>();
      if (static_cast<int>(b.size()) != pr.dim() || static_cast<int>(p.size()) != pr.moderator_dim() ||
          static_cast<int>(g.size()) != pr.penalties.size())
        throw InputError("model.json does not match the configured design");
      for (int i = 0; i < pr.dim(); ++i) beta(i, k) = b[i];
      for (int a = 0; a < pr.moderator_dim(); ++a) phi(a, k) = p[a];
      for (int i = 0; i < pr.penalties.size(); ++i) bound(i, k) = g[i];
    }
    const ModelState s = restore_state(pr, K, hp.at("lambda").get<double>(), hp.at("gamma").get<double>(),
                                       hp.at("sigma2_phi").get<double>(), est.at("mu").get<double>(), beta, phi, bound);
    RunConfig used = cfg;
    used.clusters = K;
    const CovarianceBundle cb = covariance_bundle(s, pr, cfg.covariance_epsilon, cfg.fit.threads);
    Writer w(req.out, outcome);
    ordered man = manifest("effects", used, req);
    man["data"] = report_json(in.report);
    Summary sm;
    sm.cb = cb;
    write_effects(w, sm, pr, in.data, used, outcome, man);
    man["outputs"] = outcome.outputs;
    w.json_file("effects_manifest.json", man);
  } catch (const json::exception& e) {
    throw InputError("model.json is missing fields: " + std::string(e.what()));
  }
  return outcome;
}

RunOutcome run_simulate(const RunRequest& req) {
  RunOutcome outcome;
  const RunConfig cfg = effective_config(req);
  if (!cfg.simulate) throw InputError("config has no simulate section");
  SimDesign sd = cfg.simulate->design;
  const int R = cfg.simulate->replicates;
  if (R < 2) throw InputError("simulate needs at least two replicates to score recovery");
  draw_true_coefficients(sd);
  true_amces(sd, cfg.fit.threads);

  Writer w(req.out, outcome);
  {
    std::string coef = "cluster,factor,level,beta\n";
    for (int k = 0; k < sd.clusters; ++k)
      for (int j = 0; j < sd.factors; ++j)
        for (int l = 0; l < sd.levels[j]; ++l)
          coef += std::to_string(k + 1) + ",F" + std::to_string(j + 1) + ",L" + std::to_string(l + 1) + "," +
                  format_double(sd.beta_true[k][j][l]) + "\n";
    w.text("truth_coefficients.csv", coef);
    std::string phi = "cluster,moderator,phi\n";
    for (int k = 0; k < sd.clusters; ++k)
      for (int a = 0; a <= sd.moderator_count; ++a)
        phi += std::to_string(k + 1) + "," + (a == 0 ? std::string("(intercept)") : "x" + std::to_string(a)) + "," +
               format_double(sd.phi_true(a, k)) + "\n";
    w.text("truth_phi.csv", phi);
    std::string amce = "cluster,factor,level,baseline,value,mc_se\n";
    for (const auto& t : sd.amce_true)
      amce += std::to_string(t.cluster + 1) + ",F" + std::to_string(t.factor + 1) + ",L" + std::to_string(t.level + 1) +
              ",L1," + format_double(t.value) + "," + format_double(t.mc_se) + "\n";
    w.text("truth_amce.csv", amce);
  }

  ReplicateOptions opts;
  opts.lambda = cfg.lambda.value_or(0.0);
  opts.tune = cfg.tune;
  opts.gamma = cfg.gamma;
  opts.sigma2_phi = cfg.sigma2_phi;
  opts.model = cfg.model;
  opts.fit = cfg.fit;
  // Replicates run side by side; each fit then uses one thread. Results do not
  // depend on the split because every replicate has its own seeded stream.
  const int workers = std::min(cfg.fit.threads, R);
  if (workers > 1) opts.fit.threads = 1;

  std::vector<ReplicateEstimates> estimates(R);
  std::vector<char> converged(R, 0);
  std::vector<std::exception_ptr> errors(R);
  std::vector<RunOutcome> sub(R);
  const std::string config_hash = sha256_hex(canonical_config(cfg));
  const int width = std::max<int>(3, static_cast<int>(std::to_string(R).size()));

  detail::for_each_chunk(R, 1, workers, [&](int, int begin, int) {
    const int r = begin;
    try {
      const ReplicateResult res = run_replicate(sd, r, opts);
      const std::string id = std::to_string(r + 1);
      const std::string dir = "replicates/r" + std::string(width - id.size(), '0') + id + "/";
      Writer rw(req.out, sub[r]);
      rw.text(dir + "profiles.csv", profiles_text(res.sim.data));
      rw.text(dir + "moderators.csv", moderators_text(res.sim.data));
      std::string mem = "respondent_id,cluster\n";
      for (std::size_t i = 0; i < res.sim.membership.size(); ++i)
        mem += res.sim.data.respondent_ids[i] + "," + std::to_string(res.sim.membership[i] + 1) + "\n";
      rw.text(dir + "membership.csv", mem);

      ordered fitdoc;
      fitdoc["replicate"] = r + 1;
      fitdoc["lambda"] = res.fit.state.lambda;
      if (res.tuning) fitdoc["tuning"] = tune_json(*res.tuning, opts.tune);
      fitdoc["log_posterior"] = res.fit.log_posterior;
      fitdoc["log_likelihood"] = res.fit.log_likelihood;
      fitdoc["converged"] = res.fit.converged;
      fitdoc["iterations"] = res.fit.diagnostics.iterations;
      ordered perm = ordered::array();
      for (int p : res.permutation) perm.push_back(p + 1);
      fitdoc["estimated_cluster_for_true"] = perm;
      fitdoc["mu"] = res.fit.state.mu;
      ordered amces = ordered::array();
      for (std::size_t q = 0; q < sd.amce_true.size(); ++q) {
        const auto& t = sd.amce_true[q];
        amces.push_back({{"cluster", t.cluster + 1},
                         {"factor", t.factor + 1},
                         {"level", t.level + 1},
                         {"estimate", res.estimates.estimate[q]},
                         {"se", res.estimates.se[q]}});
      }
      fitdoc["amce"] = amces;
      rw.json_file(dir + "fit.json", fitdoc);

      ordered man;
      man["tool"] = "cjmix";
      man["version"] = kVersion;
      man["command"] = "simulate";
      man["config_sha256"] = config_hash;
      man["replicate"] = r + 1;
      man["coef_seed"] = sd.coef_seed;
      man["data_seed"] = sd.data_seed;
      man["fit_seed"] = opts.fit.seed;
      man["lambda"] = {{"mode", res.tuning ? "auto" : "fixed"},
                       {"value", res.fit.state.lambda},
                       {"evaluations", res.tuning ? res.tuning->evaluations.size() : 1}};
      man["converged"] = res.fit.converged;
      man["outputs"] = sub[r].outputs;
      rw.json_file(dir + "manifest.json", man);

      estimates[r] = res.estimates;
      converged[r] = res.fit.converged;
    } catch (...) {
      errors[r] = std::current_exception();
    }
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& s : sub) outcome.outputs.insert(outcome.outputs.end(), s.outputs.begin(), s.outputs.end());

  std::vector<double> truth;
  for (const auto& t : sd.amce_true) truth.push_back(t.value);
  const RecoveryReport rep = score_recovery(estimates, truth);

  std::string scatter = "replicate,cluster,factor,level,truth,estimate,se,lower,upper\n";
  for (int r = 0; r < R; ++r)
    for (std::size_t q = 0; q < truth.size(); ++q) {
      const auto& t = sd.amce_true[q];
      const double e = estimates[r].estimate[q], se = estimates[r].se[q];
      scatter += std::to_string(r + 1) + "," + std::to_string(t.cluster + 1) + ",F" + std::to_string(t.factor + 1) +
                 ",L" + std::to_string(t.level + 1) + "," + format_double(t.value) + "," + format_double(e) + "," +
                 format_double(se) + "," + format_double(e - 1.96 * se) + "," + format_double(e + 1.96 * se) + "\n";
    }
  w.text("recovery_scatter.csv", scatter);
  std::string rho = "replicate,rho\n";
  for (int r = 0; r < R; ++r) rho += std::to_string(r + 1) + "," + format_double(rep.replicate_correlation[r]) + "\n";
  w.text("recovery_correlation.csv", rho);
  std::string cov =
      "cluster,factor,level,truth,mean_estimate,sd_estimate,mean_se,coverage95,coverage90,post_coverage95,"
      "post_coverage90,nonzero\n";
  for (std::size_t q = 0; q < truth.size(); ++q) {
    const auto& t = sd.amce_true[q];
    const auto& qr = rep.quantities[q];
    cov += std::to_string(t.cluster + 1) + ",F" + std::to_string(t.factor + 1) + ",L" + std::to_string(t.level + 1) + "," +
           format_double(qr.truth) + "," + format_double(qr.mean_estimate) + "," + format_double(qr.sd_estimate) + "," +
           format_double(qr.mean_se) + "," + format_double(qr.coverage95) + "," + format_double(qr.coverage90) + "," +
           format_double(qr.post_coverage95) + "," + format_double(qr.post_coverage90) + "," +
           std::to_string(qr.nonzero) + "\n";
  }
  w.text("recovery_coverage.csv", cov);

  const int n_converged = static_cast<int>(std::count(converged.begin(), converged.end(), 1));
  ordered man = manifest("simulate", cfg, req);
  man["replicates"] = R;
  man["coef_seed"] = sd.coef_seed;
  man["data_seed"] = sd.data_seed;
  man["converged_replicates"] = n_converged;
  man["median_rho"] = rep.median_correlation;
  man["pooled_rho"] = rep.pooled_correlation;
  man["outputs"] = outcome.outputs;
  w.json_file("manifest.json", man);

  outcome.messages.push_back("median correlation " + format_double(rep.median_correlation) + " over " +
                             std::to_string(R) + " replicates");
  if (n_converged < R) {
    outcome.messages.push_back(std::to_string(R - n_converged) + " replicate fit(s) did not converge");
    if (req.strict) outcome.status = RunStatus::not_converged;
  }
  return outcome;
}

}  // namespace cjmix
