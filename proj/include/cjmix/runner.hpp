#pragma once

#include "cjmix/config.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cjmix {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kModelFormat = 1;

struct RunRequest {
  RunConfig config;
  std::optional<std::filesystem::path> profiles;
  std::optional<std::filesystem::path> moderators;
  std::filesystem::path out = ".";
  std::optional<std::uint64_t> seed;  // overrides the config seed (simulate: the data seed)
  int threads = 1;
  bool strict = false;
};

// Process exit codes.
enum class RunStatus : int { ok = 0, failure = 1, input = 2, not_converged = 3, improper_prior = 4 };

struct RunOutcome {
  RunStatus status = RunStatus::ok;
  std::vector<std::string> messages;  // human-readable notes, one per line
  std::vector<std::string> outputs;   // files written, relative to the output directory
};

// Each command throws InputError / ImproperPriorError / NumericalError on
// failure and reports non-convergence under `strict` through the status.
RunOutcome run_validate(const RunRequest& req);
RunOutcome run_tune(const RunRequest& req);
RunOutcome run_fit(const RunRequest& req);
RunOutcome run_effects(const RunRequest& req);  // reads <out>/model.json
RunOutcome run_simulate(const RunRequest& req);

}  // namespace cjmix
