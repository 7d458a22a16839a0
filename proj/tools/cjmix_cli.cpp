#include "cjmix/cjmix.h"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>

namespace {

struct Options {
  std::string config;
  std::string profiles;
  std::string moderators;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool strict = false;
};

void add_common(CLI::App* cmd, Options& o, bool needs_data) {
  cmd->add_option("--config", o.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  auto* profiles = cmd->add_option("--profiles", o.profiles, "profiles CSV")->check(CLI::ExistingFile);
  if (needs_data) profiles->required();
  cmd->add_option("--moderators", o.moderators, "moderators CSV")->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", o.seed, "seed override");
  cmd->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_flag("--strict", o.strict, "exit with code 3 when a fit does not converge");
}

int report(cjmix_status st) {
  std::fprintf(stderr, "cjmix: %s\n", cjmix_last_error());
  return static_cast<int>(st);
}

struct SessionCloser {
  void operator()(cjmix_session* s) const { cjmix_session_close(s); }
};

int run(const Options& o, cjmix_command command) {
  cjmix_session* raw = nullptr;
  if (const auto st = cjmix_session_open(o.config.c_str(), &raw); st != CJMIX_OK) return report(st);
  const std::unique_ptr<cjmix_session, SessionCloser> session(raw);
  if (!o.profiles.empty()) {
    const auto st = cjmix_session_set_data(session.get(), o.profiles.c_str(),
                                           o.moderators.empty() ? nullptr : o.moderators.c_str());
    if (st != CJMIX_OK) return report(st);
  }
  cjmix_session_set_output(session.get(), o.out.c_str());
  cjmix_session_set_threads(session.get(), o.threads);
  cjmix_session_set_strict(session.get(), o.strict ? 1 : 0);
  if (o.seed) cjmix_session_set_seed(session.get(), *o.seed);

  const cjmix_status st = cjmix_session_run(session.get(), command);
  for (size_t i = 0; i < cjmix_session_message_count(session.get()); ++i)
    std::fprintf(stderr, "%s\n", cjmix_session_message(session.get(), i));
  if (st != CJMIX_OK) return report(st);
  for (size_t i = 0; i < cjmix_session_output_count(session.get()); ++i)
    std::printf("%s\n", cjmix_session_output(session.get(), i));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts analysis of factorial and conjoint experiments"};
  app.set_version_flag("--version", std::string(cjmix_version()));
  app.require_subcommand(1);

  Options o;
  struct Entry {
    const char* name;
    const char* help;
    cjmix_command command;
    bool needs_data;
  };
  const Entry entries[] = {
      {"fit", "fit the model and write model, effects, clusters and manifest", CJMIX_CMD_FIT, true},
      {"tune", "select lambda by BIC and write the search path", CJMIX_CMD_TUNE, true},
      {"effects", "recompute effects from <out>/model.json", CJMIX_CMD_EFFECTS, true},
      {"simulate", "run the simulation study from the config's simulate section", CJMIX_CMD_SIMULATE, false},
      {"validate", "check configuration and data without fitting", CJMIX_CMD_VALIDATE, true},
  };
  std::optional<cjmix_command> chosen;
  for (const auto& e : entries) {
    CLI::App* cmd = app.add_subcommand(e.name, e.help);
    add_common(cmd, o, e.needs_data);
    cmd->callback([&chosen, c = e.command] { chosen = c; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : CJMIX_ERR_INPUT;
  }
  return run(o, *chosen);
}
