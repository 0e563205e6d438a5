#include "atlasnam/marginal.hpp"

#include "atlasnam/error.hpp"
#include "atlasnam/rng.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <ostream>
#include <random>
#include <thread>

namespace atlasnam {

namespace {

constexpr int kHermiteOrder = 64;

// Standard-normal draws shared by every grid point of covariate i: the second
// half mirrors the first (antithetic pairs), so column l and column l + L/2
// form a pair.
Eigen::MatrixXd antithetic_normals(Index dim, Index samples, std::uint64_t seed, Index i) {
  Rng rng(derive_seed(derive_seed(seed, "marginal/draws"), static_cast<std::uint64_t>(i)));
  std::normal_distribution<double> normal;
  const Index half = samples / 2;
  Eigen::MatrixXd eps(dim, samples);
  for (Index l = 0; l < half; ++l) {
    for (Index r = 0; r < dim; ++r) eps(r, l) = normal(rng);
  }
  eps.rightCols(half) = -eps.leftCols(half);
  return eps;
}

double sample_sd(const Eigen::VectorXd& v) {
  if (v.size() < 2) return 0.0;
  return std::sqrt((v.array() - v.mean()).square().sum() / static_cast<double>(v.size() - 1));
}

// Standard error of the mean of `values` using antithetic pair averages.
double pair_se(const Eigen::VectorXd& values) {
  const Index half = values.size() / 2;
  const Eigen::VectorXd pairs = 0.5 * (values.head(half) + values.tail(half));
  return sample_sd(pairs) / std::sqrt(static_cast<double>(half));
}

void check_inputs(const AtlasModel& atlas, const CovariateDependence& dep, Index i, double c_i,
                  std::optional<double> x, bool warn) {
  dep.check_compatible(atlas.schema());
  if (i < 0 || i >= atlas.num_covariates()) {
    throw ConfigError("covariate index " + std::to_string(i) + " out of range");
  }
  atlas.schema().check_location(x);
  const auto& s = atlas.schema().covariate_scaling[static_cast<std::size_t>(i)];
  if (warn && (c_i < s.min || c_i > s.max)) {
    spdlog::warn("marginalizing {} at {} outside its training range [{}, {}]",
                 atlas.schema().covariate_names[static_cast<std::size_t>(i)], c_i, s.min, s.max);
  }
}

MarginalEstimate estimate(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                          double c_i, std::optional<double> x, const SamplingConfig& sampling,
                          const Eigen::MatrixXd& eps) {
  const auto own = atlas.disentangle(i, c_i, x);
  MarginalEstimate est;
  est.mean = atlas.intercept() + own.mean;
  est.var_expected = own.variance;
  const ConditionalGaussian cond = dep.conditional(i, c_i);
  const Index d = static_cast<Index>(cond.others.size());
  if (d == 0) return est;

  const Index L = sampling.samples;
  const Eigen::MatrixXd draws =
      sample_conditional(cond, eps);  // d x L

  Eigen::VectorXd sum_mean = Eigen::VectorXd::Zero(L);
  Eigen::VectorXd sum_var = Eigen::VectorXd::Zero(L);
  Eigen::VectorXd own_spread = Eigen::VectorXd::Zero(L);  // sum_k (f_kl - mean_k)^2
  Eigen::VectorXd fm, fv;
  for (Index p = 0; p < d; ++p) {
    atlas.contributions_batch(cond.others[static_cast<std::size_t>(p)], draws.row(p).transpose(), x,
                              fm, fv);
    sum_mean += fm;
    sum_var += fv;
    own_spread += (fm.array() - fm.mean()).square().matrix();
  }
  const double bessel = static_cast<double>(L) / static_cast<double>(L - 1);
  const Eigen::VectorXd centered_sq = (sum_mean.array() - sum_mean.mean()).square().matrix();
  const Eigen::VectorXd cross = centered_sq - own_spread;
  const double mc_var_terms = own_spread.mean() * bessel;
  est.cov_terms = cross.mean() * bessel;

  if (sampling.method == IntegrationMethod::kMonteCarlo) {
    est.mean += sum_mean.mean();
    est.var_expected += sum_var.mean();
    est.var_terms = mc_var_terms;
    est.var_of_mean = centered_sq.mean() * bessel;
    est.se_mean = pair_se(sum_mean);
    est.se_var_expected = pair_se(sum_var);
    est.se_var_of_mean = pair_se(centered_sq);
    return est;
  }

  static const GaussHermiteRule rule = gauss_hermite(kHermiteOrder);
  const Eigen::Map<const Eigen::VectorXd> nodes(rule.nodes.data(), kHermiteOrder);
  const Eigen::Map<const Eigen::VectorXd> weights(rule.weights.data(), kHermiteOrder);
  const double norm = 1.0 / std::sqrt(std::numbers::pi);
  double var_terms = 0.0;
  for (Index p = 0; p < d; ++p) {
    const double sd = std::sqrt(std::max(cond.covariance(p, p), 0.0));
    const Eigen::VectorXd points = (cond.mean(p) + std::numbers::sqrt2 * sd * nodes.array()).matrix();
    atlas.contributions_batch(cond.others[static_cast<std::size_t>(p)], points, x, fm, fv);
    const double e_mean = norm * weights.dot(fm);
    est.mean += e_mean;
    est.var_expected += norm * weights.dot(fv);
    var_terms += std::max(norm * weights.dot(fm.cwiseProduct(fm)) - e_mean * e_mean, 0.0);
  }
  est.var_terms = var_terms;
  if (d < 2) est.cov_terms = 0.0;
  est.se_var_of_mean = d < 2 ? 0.0 : pair_se(cross);
  double var_v = est.var_terms + est.cov_terms;
  if (var_v < 0.0) {
    if (var_v < -3.0 * est.se_var_of_mean) {
      throw NumericalError("variance of the conditional mean is negative (" + std::to_string(var_v) +
                           ") beyond Monte Carlo error; the dependence model may be misfit");
    }
    spdlog::warn("clamping slightly negative variance of the conditional mean ({}) to 0", var_v);
    var_v = 0.0;
  }
  est.var_of_mean = var_v;
  return est;
}

}  // namespace

std::string to_string(IntegrationMethod method) {
  return method == IntegrationMethod::kMonteCarlo ? "monte_carlo" : "gauss_hermite";
}

IntegrationMethod integration_method_from_string(std::string_view tag) {
  if (tag == "monte_carlo") return IntegrationMethod::kMonteCarlo;
  if (tag == "gauss_hermite") return IntegrationMethod::kGaussHermite;
  throw ConfigError("unknown integration method '" + std::string(tag) +
                    "' (expected monte_carlo or gauss_hermite)");
}

void SamplingConfig::validate() const {
  if (samples < 100) throw ConfigError("sampling: samples must be >= 100");
  if (samples % 2 != 0) throw ConfigError("sampling: samples must be even (antithetic pairs)");
}

nlohmann::json SamplingConfig::to_json() const {
  return {{"samples", samples}, {"seed", seed}, {"method", to_string(method)}};
}

SamplingConfig SamplingConfig::from_json(const nlohmann::json& doc, const SamplingConfig& defaults) {
  SamplingConfig cfg = defaults;
  for (const auto& [key, value] : doc.items()) {
    if (key == "samples") cfg.samples = value.get<Index>();
    else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
    else if (key == "method") cfg.method = integration_method_from_string(value.get<std::string>());
    else throw ConfigError("unknown sampling key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

MarginalEstimate marginalize_point(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                                   double c_i, std::optional<double> x,
                                   const SamplingConfig& sampling) {
  sampling.validate();
  check_inputs(atlas, dep, i, c_i, x, true);
  const Eigen::MatrixXd eps =
      antithetic_normals(atlas.num_covariates() - 1, sampling.samples, sampling.seed, i);
  return estimate(atlas, dep, i, c_i, x, sampling, eps);
}

double marginal_mean(const AtlasModel& atlas, const CovariateDependence& dep, Index i, double c_i,
                     std::optional<double> x, const SamplingConfig& sampling) {
  return marginalize_point(atlas, dep, i, c_i, x, sampling).mean;
}

double expected_variance(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                         double c_i, std::optional<double> x, const SamplingConfig& sampling) {
  return marginalize_point(atlas, dep, i, c_i, x, sampling).var_expected;
}

double variance_of_expectation(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                               double c_i, std::optional<double> x, const SamplingConfig& sampling) {
  return marginalize_point(atlas, dep, i, c_i, x, sampling).var_of_mean;
}

std::vector<double> default_grid(const ModelSchema& schema, Index i, Index count) {
  if (i < 0 || i >= schema.num_covariates()) throw ConfigError("covariate index out of range");
  if (count < 1) throw ConfigError("grid needs at least one point");
  const auto& s = schema.covariate_scaling[static_cast<std::size_t>(i)];
  std::vector<double> grid(static_cast<std::size_t>(count));
  for (Index g = 0; g < count; ++g) {
    const double t = count == 1 ? 0.5 : static_cast<double>(g) / static_cast<double>(count - 1);
    grid[static_cast<std::size_t>(g)] = s.min + t * (s.max - s.min);
  }
  return grid;
}

MarginalCurve marginal_curve(const AtlasModel& atlas, const CovariateDependence& dep, Index i,
                             std::optional<double> x, const std::vector<double>& grid,
                             const SamplingConfig& sampling, unsigned threads) {
  sampling.validate();
  if (grid.empty()) throw ConfigError("marginal_curve: grid is empty");
  check_inputs(atlas, dep, i, grid.front(), x, false);
  const auto& s = atlas.schema().covariate_scaling[static_cast<std::size_t>(i)];
  const auto outside = std::count_if(grid.begin(), grid.end(),
                                     [&](double c) { return c < s.min || c > s.max; });
  if (outside > 0) {
    spdlog::warn("{} of {} grid points for {} lie outside the training range [{}, {}]", outside,
                 grid.size(), atlas.schema().covariate_names[static_cast<std::size_t>(i)], s.min,
                 s.max);
  }

  MarginalCurve curve;
  curve.covariate = i;
  curve.covariate_name = atlas.schema().covariate_names[static_cast<std::size_t>(i)];
  curve.x = x;
  curve.grid = grid;
  curve.points.resize(grid.size());
  const Eigen::MatrixXd eps =
      antithetic_normals(atlas.num_covariates() - 1, sampling.samples, sampling.seed, i);

  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(grid.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t g = next++; g < grid.size(); g = next++) {
      try {
        curve.points[g] = estimate(atlas, dep, i, grid[g], x, sampling, eps);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = grid.size();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return curve;
}

BruteForceEstimate brute_force_marginal(const AtlasModel& atlas, const CovariateDependence& dep,
                                        Index i, double c_i, std::optional<double> x,
                                        Index joint_samples, std::uint64_t seed) {
  if (joint_samples < 2) throw ConfigError("brute_force_marginal: need at least 2 samples");
  check_inputs(atlas, dep, i, c_i, x, true);
  const Index n = atlas.num_covariates();
  const ConditionalGaussian cond = dep.conditional(i, c_i);
  const Index d = static_cast<Index>(cond.others.size());
  Rng rng(derive_seed(derive_seed(seed, "marginal/brute_force"), static_cast<std::uint64_t>(i)));
  std::normal_distribution<double> normal;

  Eigen::MatrixXd covariates(n, joint_samples);
  covariates.row(i).setConstant(c_i);
  if (d > 0) {
    Eigen::MatrixXd eps(d, joint_samples);
    for (Index l = 0; l < joint_samples; ++l) {
      for (Index r = 0; r < d; ++r) eps(r, l) = normal(rng);
    }
    const Eigen::MatrixXd draws = sample_conditional(cond, eps);
    for (Index p = 0; p < d; ++p) covariates.row(cond.others[static_cast<std::size_t>(p)]) = draws.row(p);
  }
  Eigen::VectorXd mean, variance;
  atlas.predict_batch(covariates, Eigen::VectorXd::Constant(joint_samples, x.value_or(0.0)), mean,
                      variance);
  Eigen::VectorXd y(joint_samples);
  for (Index l = 0; l < joint_samples; ++l) y(l) = mean(l) + std::sqrt(variance(l)) * normal(rng);

  BruteForceEstimate out;
  out.mean = y.mean();
  const Eigen::ArrayXd centered = y.array() - out.mean;
  const double count = static_cast<double>(joint_samples);
  out.variance = centered.square().sum() / (count - 1.0);
  out.se_mean = std::sqrt(out.variance / count);
  const double m4 = centered.pow(4).mean();
  out.se_variance = std::sqrt(std::max(m4 - out.variance * out.variance, 0.0) / count);
  return out;
}

void write_curve_csv(const MarginalCurve& curve, std::ostream& out) {
  out << "c_i,mu,var_E,var_V,var_total,se_mu,se_var_E,se_var_V\n";
  for (std::size_t g = 0; g < curve.grid.size(); ++g) {
    const auto& p = curve.points[g];
    out << format_double(curve.grid[g]) << ',' << format_double(p.mean) << ','
        << format_double(p.var_expected) << ',' << format_double(p.var_of_mean) << ','
        << format_double(p.var_total()) << ',' << format_double(p.se_mean) << ','
        << format_double(p.se_var_expected) << ',' << format_double(p.se_var_of_mean) << '\n';
  }
}

GaussHermiteRule gauss_hermite(int order) {
  if (order < 1) throw ConfigError("Gauss-Hermite order must be >= 1");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k) / 2.0);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  GaussHermiteRule rule;
  for (int k = 0; k < order; ++k) {
    rule.nodes.push_back(eig.eigenvalues()(k));
    const double v0 = eig.eigenvectors()(0, k);
    rule.weights.push_back(std::sqrt(std::numbers::pi) * v0 * v0);
  }
  return rule;
}

}  // namespace atlasnam
