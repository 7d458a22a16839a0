#pragma once

#include "cjmix/design.hpp"
#include "cjmix/engine.hpp"
#include "cjmix/estimands.hpp"
#include "cjmix/problem.hpp"
#include "cjmix/selection.hpp"
#include "cjmix/simulate.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cjmix {

struct ModeratorSpec {
  std::string name;
  // Set for categorical moderators: one 0/1 column per non-baseline level.
  std::optional<std::string> baseline;
  std::vector<std::string> levels;  // categorical level order; empty means sorted labels
};

struct InteractionLabels {
  std::string factor_a, factor_b;
  std::string level_a, base_a;
  std::string level_b, base_b;
};

struct SimulateConfig {
  SimDesign design;
  int replicates = 20;
};

struct RunConfig {
  DesignKind kind = DesignKind::forced_choice;
  std::vector<FactorSpec> factors;  // symmetrized, validated
  // Unset: every column of the moderators file, numeric ones as-is.
  std::optional<std::vector<ModeratorSpec>> moderators;

  int clusters = 1;
  std::optional<double> lambda;  // unset: "auto"
  double gamma = 1.0;
  double sigma2_phi = 0.25;
  ModelSpec model;
  FitOptions fit;  // seed lives in fit.seed
  TuneOptions tune;

  Marginalization marginalization = Marginalization::empirical;
  std::vector<std::pair<std::string, std::string>> baselines;  // factor -> baseline level
  std::vector<InteractionLabels> interactions;
  bool marginal_means = true;
  bool moderator_effects = true;
  double covariance_epsilon = 1e-4;

  std::optional<SimulateConfig> simulate;

  void validate() const;
};

RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);

// Canonical JSON of the effective configuration (after overrides), used for hashing.
std::string canonical_config(const RunConfig& cfg);

EffectRequest effect_request(const RunConfig& cfg, const Dataset& data);

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace cjmix
