#pragma once

#include "atlasnam/atlas.hpp"
#include "atlasnam/dependence.hpp"
#include "atlasnam/marginal.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace atlasnam::cli {

/// Monotone relation between two covariates, by name.
struct NamedPairPrior {
  std::string given;
  std::string target;
  int sign = 1;
};

/// Everything a command needs, read from a JSON file and then overridden by
/// flags. Unknown keys are rejected. The fully resolved form (with every
/// derived seed spelled out) is written next to each command's outputs and can
/// be fed back through --config to reproduce the run.
struct RunConfig {
  std::uint64_t seed = 0;

  // Inputs.
  std::optional<std::string> data;
  std::vector<std::string> covariates;  // explicit CSV subset; empty means all
  std::optional<std::string> model;
  std::optional<std::string> dependence_model;

  // Training.
  std::string model_kind = "additive";  // or "joint_mlp"
  std::map<std::string, MonotonePrior> priors;
  AtlasConfig atlas;
  DependenceConfig dependence;
  std::vector<NamedPairPrior> pair_priors;
  bool impute_missing = false;

  // Marginalization.
  SamplingConfig sampling;
  std::optional<std::string> covariate;
  std::optional<double> x;
  bool use_dependence = true;
  Index grid_points = 200;
  std::optional<double> grid_min;
  std::optional<double> grid_max;
  unsigned threads = 1;

  // Data generation.
  std::string generator = "toy";
  Index samples = 5000;
  double noise_variance = 1e-4;

  /// Parses `doc`; nested training and sampling seeds that are absent are
  /// derived from the top-level seed.
  static RunConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  /// Re-derives every nested seed from `seed`.
  void reseed(std::uint64_t new_seed);
  void validate() const;
};

/// Seed of a named sub-computation: derive_seed(top_level, tag).
std::uint64_t component_seed(std::uint64_t top_level, std::string_view tag);

/// Runs one command line (without the program name). Returns the exit code:
/// 0 on success, 2 for usage, configuration, and input-data errors, 1 for
/// runtime failures. Files written by a failing command are removed.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace atlasnam::cli
