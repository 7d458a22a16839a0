#include "doctest.h"

#include "cjmix/config.hpp"
#include "cjmix/errors.hpp"
#include "cjmix/ingest.hpp"
#include "cjmix/runner.hpp"
#include "cjmix/simulate.hpp"

#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

using namespace cjmix;
namespace fs = std::filesystem;

namespace {

const char* kToyConfig = R"({
  "design": "factorial",
  "factors": [
    {"name": "price", "levels": ["low", "mid", "high"], "ordered": true},
    {"name": "brand", "levels": ["a", "b"]}
  ],
  "model": {"clusters": 1, "lambda": 1.0}
})";

const char* kToyProfiles =
    "respondent_id,task_id,side,choice,price,brand\n"
    "r1,1,single,1,low,a\n"
    "r1,2,single,0,high,b\n"
    "r2,1,single,1,mid,a\n"
    "r2,2,single,0,high,a\n"
    "r3,1,single,1,low,b\n"
    "r3,2,single,1,mid,b\n"
    "r4,1,single,0,high,b\n"
    "r4,2,single,1,low,a\n"
    "r5,1,single,0,mid,b\n"
    "r5,2,single,1,low,b\n";

CsvTable table(const std::string& text) {
  std::istringstream in(text);
  return read_csv(in, "test");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spill(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const InputError& e) {
    return e.what();
  }
  return "";
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("cjmix_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// A small forced-choice experiment written in the public CSV schema.
struct SimFiles {
  fs::path profiles, moderators, config;
};

SimFiles simulated_files(const fs::path& dir, const std::string& model_json) {
  SimDesign sd;
  sd.factors = 3;
  sd.levels = {3, 3, 2};
  sd.clusters = 2;
  sd.respondents = 60;
  sd.tasks = 4;
  sd.moderator_count = 2;
  draw_true_coefficients(sd);
  const SimData s = generate_dataset(sd, 0);
  SimFiles f{dir / "profiles.csv", dir / "moderators.csv", dir / "config.json"};
  std::ostringstream p, m;
  write_profiles_csv(p, s.data);
  write_moderators_csv(m, s.data);
  spill(f.profiles, p.str());
  spill(f.moderators, m.str());
  spill(f.config, R"({"design": "forced_choice",
    "factors": [{"name": "F1", "levels": ["L1", "L2", "L3"]},
                {"name": "F2", "levels": ["L1", "L2", "L3"]},
                {"name": "F3", "levels": ["L1", "L2"]}],
    "moderators": ["x1", "x2"],
    "effects": {"interactions": [{"factors": ["F1", "F3"], "levels": ["L2", "L2"], "baselines": ["L1", "L1"]}]},
    "model": )" + model_json + "}");
  return f;
}

RunRequest request(const SimFiles& f, const fs::path& out, int threads = 1) {
  RunRequest req;
  req.config = load_config(f.config);
  req.profiles = f.profiles;
  req.moderators = f.moderators;
  req.out = out;
  req.threads = threads;
  return req;
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(CJMIX_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

}  // namespace

TEST_CASE("csv reader handles quotes, embedded separators and CRLF") {
  const CsvTable t = table("a,b,c\r\n1,\"x,y\",\"say \"\"hi\"\"\"\r\n2,\"two\nlines\",\r\n\r\n");
  REQUIRE(t.rows.size() == 2);
  CHECK(t.header == std::vector<std::string>{"a", "b", "c"});
  CHECK(t.rows[0] == std::vector<std::string>{"1", "x,y", "say \"hi\""});
  CHECK(t.rows[1] == std::vector<std::string>{"2", "two\nlines", ""});
  CHECK(t.line == std::vector<int>{2, 3});
  CHECK(csv_field("x,y") == "\"x,y\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK_THROWS_AS(table("a\n\"open\n"), InputError);
}

TEST_CASE("a well-formed 10-row factorial toy gives 10 validated tasks") {
  const RunConfig cfg = parse_config(kToyConfig);
  const Ingested in = ingest(table(kToyProfiles), std::nullopt, cfg);
  CHECK(in.report.tasks == 10);
  CHECK(in.report.respondents == 5);
  CHECK(in.data.rows() == 10);
  CHECK(in.data.moderators.cols() == 1);
  CHECK(in.data.left[1] == Profile{2, 1});
  CHECK(in.data.y(1) == 0.0);
  CHECK(in.data.task_ids[2] == "1");
  CHECK(in.data.respondent_ids[1] == "r2");
}

TEST_CASE("ingest itemizes every bad row") {
  const RunConfig cfg = parse_config(kToyConfig);
  std::string bad = kToyProfiles;
  bad.replace(bad.find("r2,1,single,1,mid,a"), 19, "r2,1,single,1,mud,a");
  const std::string msg = error_of([&] { ingest(table(bad), std::nullopt, cfg); });
  CHECK(msg.find("row 3, column price: unknown level \"mud\"") != std::string::npos);

  std::string many = kToyProfiles;
  many += "r1,1,single,0,low,a\n";    // duplicate key
  many += "r6,1,single,2,low,a\n";    // bad choice
  many += "r7,1,L,1,low,a\n";         // side not valid for factorial
  many += "r8,1,single,1,low\n";      // short row
  const std::string all = error_of([&] { ingest(table(many), std::nullopt, cfg); });
  CHECK(all.find("4 problem(s)") != std::string::npos);
  CHECK(all.find("row 11: duplicate key (respondent \"r1\", task \"1\", side single), first seen on row 1") !=
        std::string::npos);
  CHECK(all.find("row 12, column choice: \"2\" is not 0 or 1") != std::string::npos);
  CHECK(all.find("row 13, column side") != std::string::npos);
  CHECK(all.find("row 14: expected 6 fields, found 5") != std::string::npos);

  const std::string header = error_of([&] {
    ingest(table("respondent_id,task_id,side,choice,price,colour\nr1,1,single,1,low,red\n"), std::nullopt, cfg);
  });
  CHECK(header.find("column \"colour\" is not a declared factor") != std::string::npos);
  CHECK(header.find("missing factor column \"brand\"") != std::string::npos);
}

TEST_CASE("forced-choice tasks need both sides") {
  RunConfig cfg = parse_config(kToyConfig);
  cfg.kind = DesignKind::forced_choice;
  const std::string text =
      "respondent_id,task_id,side,choice,price,brand\n"
      "r1,1,L,1,low,a\n"
      "r1,1,R,,high,b\n"
      "r1,2,L,0,mid,a\n"
      "r2,1,R,0,mid,b\n"
      "r2,2,L,1,mid,b\n"
      "r2,2,R,1,low,b\n";
  const std::string msg = error_of([&] { ingest(table(text), std::nullopt, cfg); });
  CHECK(msg.find("respondent \"r1\", task \"2\": orphan task, no R row") != std::string::npos);
  CHECK(msg.find("respondent \"r2\", task \"1\": orphan task, no L row") != std::string::npos);
  CHECK(msg.find("row 6, column choice: R choice must be blank or the complement") != std::string::npos);

  const Ingested ok = ingest(table("respondent_id,task_id,side,choice,price,brand\n"
                                   "r1,1,R,,high,b\n"
                                   "r1,1,L,1,low,a\n"),
                             std::nullopt, cfg);
  CHECK(ok.data.rows() == 1);
  CHECK(ok.data.left[0] == Profile{0, 0});
  CHECK(ok.data.right[0] == Profile{2, 1});
  CHECK(ok.data.y(0) == 1.0);
}

TEST_CASE("respondents without complete moderators are dropped and counted") {
  RunConfig cfg = parse_config(kToyConfig);
  const std::string mods =
      "respondent_id,age,party\n"
      "r1,30,dem\n"
      "r2,41,rep\n"
      "r3,NA,dem\n"
      "r4,55,ind\n"
      "r9,20,dem\n";
  cfg.moderators = std::vector<ModeratorSpec>{{"age", std::nullopt, {}}, {"party", std::string("dem"), {}}};
  const Ingested in = ingest(table(kToyProfiles), table(mods), cfg);
  CHECK(in.report.dropped_absent_moderators == 1);  // r5
  CHECK(in.report.dropped_missing_moderators == 1);  // r3
  CHECK(in.report.dropped_tasks == 4);
  CHECK(in.report.unused_moderator_rows == 1);  // r9
  CHECK(in.report.respondents == 3);
  CHECK(in.data.moderator_names == std::vector<std::string>{"(intercept)", "age", "party=ind", "party=rep"});
  CHECK(in.data.moderators.row(1) == Eigen::RowVector4d(1, 41, 0, 1));
  CHECK(in.data.moderators.row(2) == Eigen::RowVector4d(1, 55, 1, 0));

  cfg.moderators = std::vector<ModeratorSpec>{{"age", std::nullopt, {}}, {"party", std::nullopt, {}}};
  const std::string msg = error_of([&] { ingest(table(kToyProfiles), table(mods), cfg); });
  CHECK(msg.find("moderators row 1, column party: non-numeric value \"dem\"") != std::string::npos);

  cfg.moderators = std::vector<ModeratorSpec>{{"income", std::nullopt, {}}};
  CHECK(error_of([&] { ingest(table(kToyProfiles), table(mods), cfg); }).find("missing column \"income\"") !=
        std::string::npos);
}

TEST_CASE("ingest then export round-trips the dataset exactly") {
  SimDesign sd;
  sd.factors = 3;
  sd.levels = {3, 2, 4};
  sd.clusters = 2;
  sd.respondents = 40;
  sd.tasks = 3;
  sd.moderator_count = 3;
  draw_true_coefficients(sd);
  const Dataset d = generate_dataset(sd, 1).data;
  std::ostringstream p, m;
  write_profiles_csv(p, d);
  write_moderators_csv(m, d);

  RunConfig cfg;
  cfg.kind = d.kind;
  cfg.factors = d.factors;
  const Ingested back = ingest(table(p.str()), table(m.str()), cfg);
  const Dataset& e = back.data;
  CHECK(e.left == d.left);
  CHECK(e.right == d.right);
  CHECK(e.y == d.y);
  CHECK(e.respondent == d.respondent);
  CHECK(e.respondent_ids == d.respondent_ids);
  CHECK(e.task_ids == d.task_ids);
  CHECK(e.moderator_names == d.moderator_names);
  CHECK(e.moderators == d.moderators);  // bitwise

  std::ostringstream p2, m2;
  write_profiles_csv(p2, e);
  write_moderators_csv(m2, e);
  CHECK(p2.str() == p.str());
  CHECK(m2.str() == m.str());
}

TEST_CASE("config validation and hashing") {
  const RunConfig cfg = parse_config(kToyConfig);
  CHECK(cfg.kind == DesignKind::factorial);
  CHECK(cfg.factors[0].ordered);
  REQUIRE(cfg.lambda);
  CHECK(*cfg.lambda == 1.0);

  auto fails = [](const std::string& text, const std::string& fragment) {
    const std::string msg = error_of([&] { parse_config(text); });
    CHECK_MESSAGE(msg.find(fragment) != std::string::npos, msg);
  };
  fails(R"({"model": {"gamma": 0.5}})", "gamma must be 0 or 1");
  fails(R"({"model": {"lambda": "auto"}, "tune": {"budget": 4, "grid_points": 3}})", "needs tune.budget >= 5");
  fails(R"({"model": {"lambda": -1}})", "lambda must be positive");
  fails(R"({"modle": {}})", "unknown key 'modle'");
  fails(R"({"fit": {"max_iterations": 0}})", "max_iterations must be at least 1");
  CHECK_THROWS_AS(parse_config(R"({"factors": [{"name": "a", "levels": ["x"]}]})"), InputError);
  fails(R"({"factors": [{"name": "a", "levels": ["x", "y"], "restrictions": [{"partner": "b", "exclude": []}]}]})",
        "unknown factor 'b'");
  fails("{", "not valid JSON");

  const RunConfig restricted = parse_config(R"({"factors": [
      {"name": "edu", "levels": ["hs", "phd"], "restrictions": [{"partner": "job", "exclude": [["hs", "doctor"]]}]},
      {"name": "job", "levels": ["doctor", "clerk"]}]})");
  REQUIRE(restricted.factors[1].restrictions.size() == 1);  // symmetrized
  CHECK(restricted.factors[1].restrictions[0].excluded == std::vector<std::pair<int, int>>{{0, 0}});

  // canonical text is insensitive to formatting and sensitive to content
  const RunConfig spaced = parse_config(std::string(kToyConfig) + "\n\n");
  CHECK(canonical_config(spaced) == canonical_config(cfg));
  RunConfig reseeded = cfg;
  reseeded.fit.seed = 9;
  CHECK(canonical_config(reseeded) != canonical_config(cfg));
  CHECK(parse_config(canonical_config(cfg)).factors[0].levels == cfg.factors[0].levels);
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("fit artifacts are deterministic and complete") {
  const TempDir tmp("fit");
  const SimFiles f = simulated_files(tmp.path, R"({"clusters": 2, "lambda": 2.0})");
  const RunOutcome a = run_fit(request(f, tmp.path / "a"));
  const RunOutcome b = run_fit(request(f, tmp.path / "b"));
  const RunOutcome c = run_fit(request(f, tmp.path / "c", 2));
  CHECK(a.status == RunStatus::ok);
  CHECK(a.outputs == std::vector<std::string>{"model.json", "effects.csv", "clusters.csv", "manifest.json"});
  for (const char* name : {"model.json", "effects.csv", "clusters.csv", "manifest.json"}) {
    CHECK(slurp(tmp.path / "a" / name) == slurp(tmp.path / "b" / name));
    CHECK(slurp(tmp.path / "a" / name) == slurp(tmp.path / "c" / name));
  }

  const auto model = nlohmann::json::parse(slurp(tmp.path / "a" / "model.json"));
  for (const char* key : {"estimates", "responsibilities", "fit", "lambda_path", "fusion", "covariance"})
    CHECK(model.contains(key));
  CHECK(model["estimates"].contains("beta_raw"));
  CHECK(model["estimates"].contains("beta_reduced"));
  CHECK(model["fit"].contains("df"));
  CHECK(model["fit"].contains("bic"));
  CHECK(model["responsibilities"].size() == 60);
  const auto& cov = model["covariance"];
  CHECK(cov["matrix"].size() == cov["parameters"].size());

  const auto manifest = nlohmann::json::parse(slurp(tmp.path / "a" / "manifest.json"));
  CHECK(manifest["config_sha256"].get<std::string>().size() == 64);
  CHECK(manifest["version"] == kVersion);
  CHECK(manifest["seed"] == 0);

  const std::string effects = slurp(tmp.path / "a" / "effects.csv");
  CHECK(effects.rfind("quantity,cluster,factor,contrast,estimate,se,lower,upper,marginalization,filter\n", 0) == 0);
  for (const char* q : {"\namce,", "\namie,", "\nmarginal_mean,", "\nmoderator,"})
    CHECK(effects.find(q) != std::string::npos);

  // effects recomputed from the stored model match the fit's own output
  const std::string before = slurp(tmp.path / "a" / "effects.csv");
  run_effects(request(f, tmp.path / "a"));
  CHECK(slurp(tmp.path / "a" / "effects.csv") == before);
}

TEST_CASE("auto lambda respects the budget, strict mode flags non-convergence") {
  const TempDir tmp("auto");
  const SimFiles f = simulated_files(tmp.path, R"({"clusters": 2, "lambda": "auto"})");
  RunRequest req = request(f, tmp.path / "auto");
  req.config.tune.budget = 15;
  run_fit(req);
  const auto manifest = nlohmann::json::parse(slurp(tmp.path / "auto" / "manifest.json"));
  CHECK(manifest["lambda"]["mode"] == "auto");
  CHECK(manifest["lambda"]["evaluations"].get<int>() <= 15);
  CHECK(manifest["lambda"]["evaluations"].get<int>() >= 5);

  RunRequest strict = request(f, tmp.path / "strict");
  strict.config.lambda = 2.0;
  strict.config.fit.max_iterations = 1;
  strict.strict = true;
  CHECK(run_fit(strict).status == RunStatus::not_converged);
  strict.strict = false;
  CHECK(run_fit(strict).status == RunStatus::ok);

  RunRequest tune = request(f, tmp.path / "tune");
  tune.config.tune.budget = 6;
  tune.config.tune.grid_points = 4;
  CHECK(run_tune(tune).status == RunStatus::ok);
  const auto tuning = nlohmann::json::parse(slurp(tmp.path / "tune" / "tuning.json"));
  CHECK(tuning["path"].size() == 6);
}

TEST_CASE("simulate writes per-replicate manifests and a recovery report") {
  const TempDir tmp("sim");
  const std::string cfg_text = R"({"model": {"clusters": 2, "lambda": 5.0},
    "simulate": {"replicates": 2, "factors": 2, "levels": [3, 2], "clusters": 2,
                 "respondents": 40, "tasks": 3, "moderators": 1, "truth_draws": 20000}})";
  RunRequest req;
  req.config = parse_config(cfg_text);
  req.out = tmp.path / "one";
  const RunOutcome a = run_simulate(req);
  req.out = tmp.path / "two";
  req.threads = 2;
  run_simulate(req);

  int manifests = 0;
  for (const auto& name : a.outputs) manifests += name.ends_with("/manifest.json");
  CHECK(manifests == 2);
  CHECK(fs::exists(tmp.path / "one" / "replicates" / "r002" / "manifest.json"));
  for (const char* name : {"truth_coefficients.csv", "truth_amce.csv", "truth_phi.csv", "recovery_coverage.csv",
                           "recovery_correlation.csv", "manifest.json"})
    CHECK(slurp(tmp.path / "one" / name) == slurp(tmp.path / "two" / name));
  CHECK(slurp(tmp.path / "one" / "recovery_correlation.csv").rfind("replicate,rho\n", 0) == 0);
  CHECK(slurp(tmp.path / "one" / "recovery_coverage.csv").find("coverage95,coverage90") != std::string::npos);
}

TEST_CASE("command-line exit codes") {
  const TempDir tmp("cli");
  const SimFiles f = simulated_files(tmp.path, R"({"clusters": 2, "lambda": 2.0, "allow_improper": false})");
  const std::string data = " --profiles " + f.profiles.string() + " --moderators " + f.moderators.string();
  CHECK(run_binary("validate --config " + f.config.string() + data + " --out " + (tmp.path / "v").string()) == 0);
  CHECK(run_binary("fit --config " + f.config.string() + data + " --out " + (tmp.path / "f").string()) == 0);
  CHECK(fs::exists(tmp.path / "f" / "model.json"));

  spill(tmp.path / "strict.json", R"({"design": "forced_choice",
    "factors": [{"name": "F1", "levels": ["L1", "L2", "L3"]}, {"name": "F2", "levels": ["L1", "L2", "L3"]},
                {"name": "F3", "levels": ["L1", "L2"]}],
    "model": {"clusters": 2, "lambda": 2.0}, "fit": {"max_iterations": 1}})");
  const std::string strict = "fit --config " + (tmp.path / "strict.json").string() + data + " --out " +
                             (tmp.path / "s").string();
  CHECK(run_binary(strict + " --strict") == 3);
  CHECK(run_binary(strict) == 0);

  std::string broken = slurp(f.profiles);
  broken.replace(broken.find(",L1\n"), 4, ",L7\n");
  spill(tmp.path / "broken.csv", broken);
  CHECK(run_binary("fit --config " + f.config.string() + " --profiles " + (tmp.path / "broken.csv").string() +
                   " --out " + (tmp.path / "b").string()) == 2);
  CHECK(run_binary("fit --config " + f.config.string()) == 2);  // --profiles missing
  CHECK(run_binary("fit --config " + f.config.string() + data + " --threads 0") == 2);
  CHECK(run_binary("frobnicate") == 2);
}
