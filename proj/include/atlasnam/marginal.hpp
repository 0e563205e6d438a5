#pragma once

#include "atlasnam/atlas.hpp"
#include "atlasnam/dependence.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace atlasnam {

enum class IntegrationMethod {
  kMonteCarlo,
  /// 64-node Gauss-Hermite for the one-dimensional expectations; the pairwise
  /// covariance term still uses Monte Carlo.
  kGaussHermite,
};

std::string to_string(IntegrationMethod method);
IntegrationMethod integration_method_from_string(std::string_view tag);

struct SamplingConfig {
  Index samples = 2048;  // L, draws per conditional (>= 100, even for antithetic pairs)
  std::uint64_t seed = 0;
  IntegrationMethod method = IntegrationMethod::kMonteCarlo;

  void validate() const;
  nlohmann::json to_json() const;
  static SamplingConfig from_json(const nlohmann::json& doc, const SamplingConfig& defaults);
};

/// Moments of p(y | c_i, x) with Monte Carlo standard errors.
struct MarginalEstimate {
  double mean = 0.0;
  double var_expected = 0.0;     // E[f^v | c_i]
  double var_of_mean = 0.0;      // Var(f^m | c_i) after any clamping
  double var_terms = 0.0;        // sum_k Var(f^m_k | c_i)
  double cov_terms = 0.0;        // sum over ordered pairs K1 != K2 of Cov(f^m_K1, f^m_K2 | c_i)
  double se_mean = 0.0;
  double se_var_expected = 0.0;
  double se_var_of_mean = 0.0;

  double var_total() const { return var_expected + var_of_mean; }
};

/// Full decomposition at one covariate value.
MarginalEstimate marginalize_point(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                                   double c_i, std::optional<double> x,
                                   const SamplingConfig& sampling);

double marginal_mean(const AtlasModel& atlas, const CovariateDependence& dep, Index i, double c_i,
                     std::optional<double> x, const SamplingConfig& sampling);
double expected_variance(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                         double c_i, std::optional<double> x, const SamplingConfig& sampling);
double variance_of_expectation(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                               double c_i, std::optional<double> x, const SamplingConfig& sampling);

struct MarginalCurve {
  Index covariate = 0;
  std::string covariate_name;
  std::optional<double> x;
  std::vector<double> grid;
  std::vector<MarginalEstimate> points;
};

/// `count` evenly spaced values over the covariate's training range.
std::vector<double> default_grid(const ModelSchema& schema, Index i, Index count = 200);

/// Evaluates every grid point. Points draw from streams that do not depend on
/// scheduling, so any `threads` value yields the same curve.
MarginalCurve marginal_curve(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                             std::optional<double> x, const std::vector<double>& grid,
                             const SamplingConfig& sampling, unsigned threads = 1);

struct BruteForceEstimate {
  double mean = 0.0;
  double variance = 0.0;
  double se_mean = 0.0;
  double se_variance = 0.0;
};

/// Test oracle: draws whole covariate vectors from p(c_{-i} | c_i), then
/// responses y ~ N(f^m, f^v), and returns their empirical moments.
BruteForceEstimate brute_force_marginal(const AtlasModel& atlas, const CovariateDependence& dep,
                                        Index i, double c_i, std::optional<double> x,
                                        Index joint_samples, std::uint64_t seed);

/// Columns: c_i, mu, var_E, var_V, var_total, then the standard errors.
void write_curve_csv(const MarginalCurve& curve, std::ostream& out);

struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;  // for the weight function exp(-t^2)
};

/// Golub-Welsch nodes and weights.
GaussHermiteRule gauss_hermite(int order);

}  // namespace atlasnam
