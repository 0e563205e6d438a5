#include "atlasnam/error.hpp"
#include "atlasnam/marginal.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace atlasnam;

namespace {

ModelSchema plain_schema(Index n) {
  ModelSchema s;
  for (Index i = 0; i < n; ++i) {
    s.covariate_names.push_back("c" + std::to_string(i + 1));
    s.priors.push_back(MonotonePrior::kNone);
    s.covariate_scaling.push_back(CovariateScaling{-3.0, 3.0, -1.0, 1.0});
  }
  return s;
}

AtlasConfig small_config() {
  AtlasConfig cfg;
  cfg.hidden_width = 8;
  cfg.variance_floor = 1e-12;
  return cfg;
}

// f^m_k = slope_k * c_k exactly and f^v_k = softplus(0) + floor share.
AtlasModel linear_atlas(const std::vector<double>& slopes, double intercept = 0.0) {
  const Index n = static_cast<Index>(slopes.size());
  AtlasModel atlas(plain_schema(n), small_config(), 1);
  atlas.intercept_standardized() = intercept;
  for (Index k = 0; k < n; ++k) {
    auto& sub = atlas.subnetworks()[static_cast<std::size_t>(k)];
    // Input u = (c + 3) / 6, so slope * c = 6 slope * u - 3 slope.
    nn::DenseNetwork mean({1, 1}, {nn::Activation::kLinear}, {nn::Activation::kLinear});
    mean.weight(0)(0, 0) = 6.0 * slopes[static_cast<std::size_t>(k)];
    mean.bias(0)(0) = -3.0 * slopes[static_cast<std::size_t>(k)];
    sub.mean_head = mean;
    nn::DenseNetwork var({2, 1}, {nn::Activation::kLinear}, {nn::Activation::kSoftplus});
    var.set_zero();
    sub.variance_head = var;
  }
  return atlas;
}

// Random GeLU heads: non-linear contributions with heteroscedastic variance.
AtlasModel random_atlas(Index n, std::uint64_t seed) {
  AtlasModel atlas(plain_schema(n), small_config(), seed);
  Rng rng(seed + 100);
  for (auto& sub : atlas.subnetworks()) {
    auto& mean = std::get<nn::DenseNetwork>(sub.mean_head);
    mean.parameters() *= 3.0;
    sub.variance_head.init_uniform(rng);
  }
  atlas.intercept_standardized() = 0.4;
  return atlas;
}

GaussianDependence correlated(Index n, double rho, GaussianDependence::Mode mode) {
  Eigen::MatrixXd S = Eigen::MatrixXd::Constant(n, n, rho);
  S.diagonal().setOnes();
  std::vector<std::string> names;
  for (Index i = 0; i < n; ++i) names.push_back("c" + std::to_string(i + 1));
  return GaussianDependence(names, Eigen::VectorXd::LinSpaced(n, -0.5, 0.5), S, mode);
}

SamplingConfig mc(Index samples = 4096, std::uint64_t seed = 9) {
  SamplingConfig s;
  s.samples = samples;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("single covariate: marginal equals the contribution exactly") {
  const auto atlas = random_atlas(1, 2);
  const GaussianDependence dep({"c1"}, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Ones(1, 1),
                               GaussianDependence::Mode::kConditional);
  for (double c : {-2.0, 0.0, 1.3}) {
    const auto est = marginalize_point(atlas, dep, 0, c, std::nullopt, mc());
    const auto own = atlas.disentangle(0, c, std::nullopt);
    CHECK(est.mean == atlas.intercept() + own.mean);
    CHECK(est.var_expected == own.variance);
    CHECK(est.var_of_mean == 0.0);
    CHECK(est.se_mean == 0.0);
    CHECK(est.var_total() == atlas.predict(std::vector<double>{c}, std::nullopt).variance);
  }
}

TEST_CASE("constant variance heads: expected variance is their sum") {
  const auto atlas = linear_atlas({1.0, -0.5, 2.0});
  const auto dep = correlated(3, 0.4, GaussianDependence::Mode::kConditional);
  const double per_head = std::log(2.0) + 1e-12 / 3.0;
  for (double c : {-1.0, 0.5}) {
    CHECK(expected_variance(atlas, dep, 1, c, std::nullopt, mc()) ==
          doctest::Approx(3.0 * per_head).epsilon(1e-12));
  }
}

TEST_CASE("linear heads with Gaussian covariates match closed forms") {
  // f = 0.7 + c1 - 0.5 c2 + 2 c3; given c1 the others are bivariate Gaussian.
  const std::vector<double> a{1.0, -0.5, 2.0};
  const auto atlas = linear_atlas(a, 0.7);
  const auto dep = correlated(3, 0.6, GaussianDependence::Mode::kConditional);
  for (double c1 : {-1.5, 0.0, 2.0}) {
    const auto cond = dep.conditional(0, c1);
    const Eigen::Vector2d w(a[1], a[2]);
    const double mean = 0.7 + a[0] * c1 + w.dot(cond.mean);
    const double var_v = w.dot(cond.covariance * w);
    const double cross = 2.0 * w(0) * w(1) * cond.covariance(0, 1);
    const auto est = marginalize_point(atlas, dep, 0, c1, std::nullopt, mc(20000));
    CHECK(std::abs(est.mean - mean) < 3.0 * est.se_mean + 1e-12);  // antithetic draws are exact for linear heads
    CHECK(std::abs(est.var_of_mean - var_v) < 3.0 * est.se_var_of_mean);
    CHECK(est.var_of_mean == doctest::Approx(est.var_terms + est.cov_terms).epsilon(1e-12));
    CHECK(est.cov_terms < 0.0);  // -0.5 * 2 with positive correlation
    CHECK(est.cov_terms == doctest::Approx(cross).epsilon(0.1));
  }
  // One linear other covariate: Var = a^2 s^2 regardless of c_i.
  const auto two = linear_atlas({0.3, 1.7});
  const auto dep2 = correlated(2, 0.8, GaussianDependence::Mode::kConditional);
  const auto est = marginalize_point(two, dep2, 0, 0.4, std::nullopt, mc(20000));
  CHECK(std::abs(est.var_of_mean - 1.7 * 1.7 * (1.0 - 0.64)) < 3.0 * est.se_var_of_mean);
  CHECK(est.cov_terms == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("independence: marginal minus own contribution is constant over the grid") {
  const auto atlas = random_atlas(3, 3);
  const auto dep = correlated(3, 0.5, GaussianDependence::Mode::kUnconditional);
  const auto grid = default_grid(atlas.schema(), 1, 25);
  const auto curve = marginal_curve(atlas, dep, 1, std::nullopt, grid, mc());
  double lo = 1e300, hi = -1e300, se = 0.0;
  double vlo = 1e300, vhi = -1e300;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double shift = curve.points[g].mean - atlas.disentangle(1, grid[g], std::nullopt).mean;
    lo = std::min(lo, shift);
    hi = std::max(hi, shift);
    se = std::max(se, curve.points[g].se_mean);
    vlo = std::min(vlo, curve.points[g].var_of_mean);
    vhi = std::max(vhi, curve.points[g].var_of_mean);
  }
  CHECK(se > 0.0);
  CHECK(hi - lo < 3.0 * se);
  CHECK(vhi - vlo < 1e-9 * std::max(1.0, vhi));
}

TEST_CASE("marginal moments agree with brute-force joint sampling") {
  const auto atlas = random_atlas(3, 4);
  const auto dep = correlated(3, 0.5, GaussianDependence::Mode::kConditional);
  for (Index i = 0; i < 3; ++i) {
    for (double c : {-1.0, 0.8}) {
      const auto est = marginalize_point(atlas, dep, i, c, std::nullopt, mc(8192));
      const auto brute = brute_force_marginal(atlas, dep, i, c, std::nullopt, 100000, 21);
      const double se_mean = std::hypot(est.se_mean, brute.se_mean);
      const double se_var = std::hypot(est.se_var_expected + est.se_var_of_mean, brute.se_variance);
      CHECK(std::abs(est.mean - brute.mean) < 4.0 * se_mean);
      CHECK(std::abs(est.var_total() - brute.variance) < 4.0 * se_var);
      CHECK(std::abs(est.var_total() - brute.variance) < 0.05 * brute.variance);
    }
  }
}

TEST_CASE("Gauss-Hermite mode agrees with Monte Carlo") {
  const auto atlas = random_atlas(3, 5);
  const auto dep = correlated(3, -0.3, GaussianDependence::Mode::kConditional);
  SamplingConfig gh = mc(8192);
  gh.method = IntegrationMethod::kGaussHermite;
  for (double c : {-2.0, 0.0, 1.5}) {
    const auto a = marginalize_point(atlas, dep, 2, c, std::nullopt, mc(8192));
    const auto b = marginalize_point(atlas, dep, 2, c, std::nullopt, gh);
    CHECK(std::abs(a.mean - b.mean) < 3.0 * a.se_mean + 1e-12);
    CHECK(std::abs(a.var_expected - b.var_expected) < 3.0 * a.se_var_expected + 1e-12);
    CHECK(std::abs(a.var_of_mean - b.var_of_mean) < 3.0 * a.se_var_of_mean + 1e-12);
    CHECK(b.var_of_mean >= 0.0);
  }
}

TEST_CASE("Gauss-Hermite rule integrates polynomial moments") {
  const auto rule = gauss_hermite(64);
  double m0 = 0.0, m2 = 0.0, m4 = 0.0, m1 = 0.0;
  for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
    const double t = rule.nodes[k], w = rule.weights[k];
    m0 += w;
    m1 += w * t;
    m2 += w * t * t;
    m4 += w * t * t * t * t;
  }
  const double root_pi = std::sqrt(std::numbers::pi);
  CHECK(m0 == doctest::Approx(root_pi).epsilon(1e-12));
  CHECK(std::abs(m1) < 1e-12);
  CHECK(m2 == doctest::Approx(root_pi / 2.0).epsilon(1e-12));
  CHECK(m4 == doctest::Approx(3.0 * root_pi / 4.0).epsilon(1e-12));
  CHECK_THROWS_AS(gauss_hermite(0), ConfigError);
}

TEST_CASE("curves are deterministic and independent of the thread count") {
  const auto atlas = random_atlas(3, 6);
  const auto dep = correlated(3, 0.5, GaussianDependence::Mode::kConditional);
  const auto grid = default_grid(atlas.schema(), 0, 40);
  const auto one = marginal_curve(atlas, dep, 0, std::nullopt, grid, mc(1024), 1);
  const auto four = marginal_curve(atlas, dep, 0, std::nullopt, grid, mc(1024), 4);
  std::ostringstream a, b;
  write_curve_csv(one, a);
  write_curve_csv(four, b);
  CHECK(a.str() == b.str());
  CHECK(a.str().rfind("c_i,mu,var_E,var_V,var_total,se_mu,se_var_E,se_var_V\n", 0) == 0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const auto single = marginalize_point(atlas, dep, 0, grid[g], std::nullopt, mc(1024));
    CHECK(single.mean == one.points[g].mean);
    CHECK(one.points[g].var_total() >= one.points[g].var_expected);
  }
  const auto other_seed = marginal_curve(atlas, dep, 0, std::nullopt, grid, mc(1024, 10), 1);
  CHECK(other_seed.points[3].mean != one.points[3].mean);
}

TEST_CASE("sampling config and input validation") {
  SamplingConfig s;
  s.samples = 99 + 1;
  CHECK_NOTHROW(s.validate());
  s.samples = 101;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.samples = 98;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  const auto parsed = SamplingConfig::from_json({{"samples", 512}, {"method", "gauss_hermite"}}, {});
  CHECK(parsed.samples == 512);
  CHECK(parsed.method == IntegrationMethod::kGaussHermite);
  CHECK_THROWS_AS(SamplingConfig::from_json({{"sample", 512}}, {}), ConfigError);
  CHECK_THROWS_AS(integration_method_from_string("simpson"), ConfigError);

  const auto atlas = linear_atlas({1.0, 1.0});
  const GaussianDependence wrong({"c1", "zz"}, Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity(),
                                 GaussianDependence::Mode::kConditional);
  CHECK_THROWS_AS(marginalize_point(atlas, wrong, 0, 0.0, std::nullopt, mc()), ConfigError);
  const auto dep = correlated(2, 0.0, GaussianDependence::Mode::kConditional);
  CHECK_THROWS_AS(marginalize_point(atlas, dep, 2, 0.0, std::nullopt, mc()), ConfigError);
  CHECK_THROWS_AS(marginal_curve(atlas, dep, 0, std::nullopt, {}, mc()), ConfigError);
}
