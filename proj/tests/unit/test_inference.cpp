#include "atlasnam/error.hpp"
#include "atlasnam/inference.hpp"
#include "unit/test_helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace atlasnam;

namespace {

// mean = 1 + c1 + 2 c2, variance = base + slope * c1^2.
class QuadraticModel final : public PredictiveModel {
 public:
  QuadraticModel(double base, double slope) : base_(base), slope_(slope) {
    schema_.covariate_names = {"c1", "c2"};
    schema_.priors = {MonotonePrior::kNone, MonotonePrior::kNone};
    schema_.covariate_scaling = {CovariateScaling{-2, 2, -1, 1}, CovariateScaling{-2, 2, -1, 1}};
  }
  const ModelSchema& schema() const override { return schema_; }
  void predict_batch(const Eigen::MatrixXd& c, const Eigen::VectorXd&, Eigen::VectorXd& mean,
                     Eigen::VectorXd& variance) const override {
    mean = (1.0 + c.row(0).array() + 2.0 * c.row(1).array()).matrix().transpose();
    variance = (base_ + slope_ * c.row(0).array().square()).matrix().transpose();
  }
  nlohmann::json to_json() const override { return {}; }

 private:
  ModelSchema schema_;
  double base_, slope_;
};

GaussianDependence three_way() {
  // c1 and c2 strongly related, c3 weakly related to both.
  Eigen::Matrix3d S;
  S << 1.0, 0.95, 0.1, 0.95, 1.0, 0.1, 0.1, 0.1, 1.0;
  return GaussianDependence({"c1", "c2", "c3"}, Eigen::Vector3d(0.0, 1.0, 2.0), S,
                            GaussianDependence::Mode::kConditional);
}

}  // namespace

TEST_CASE("gaussian_cdf anchors and monotonicity") {
  const GaussianParams g{1.5, 4.0};
  CHECK(gaussian_cdf(1.5, g) == 0.5);
  CHECK(gaussian_cdf(1.5 + 2.0 * 2.0, g) == doctest::Approx(0.97725).epsilon(1e-5));
  double previous = 0.0;
  for (double y = -20.0; y <= 20.0; y += 0.01) {
    const double p = gaussian_cdf(y, g);
    CHECK(p >= previous);
    CHECK(p <= 1.0);
    previous = p;
  }
}

TEST_CASE("impute: argmin source, pass-through, ties, errors") {
  const auto dep = three_way();
  // c2 missing, c1 and c3 observed: c1 explains far more of c2.
  const auto imp = impute(dep, {0.5, std::nullopt, -1.0});
  REQUIRE(imp.imputed.size() == 1);
  CHECK(imp.imputed[0].covariate == 1);
  CHECK(imp.imputed[0].source == 0);
  CHECK(imp.covariates[1] == doctest::Approx(1.0 + 0.95 * 0.5));
  CHECK(imp.imputed[0].variance == doctest::Approx(1.0 - 0.95 * 0.95));
  CHECK(imp.covariates[0] == 0.5);

  // Single observed covariate is the source for everything.
  const auto single = impute(dep, {std::nullopt, std::nullopt, 3.0});
  CHECK(single.imputed.size() == 2);
  for (const auto& e : single.imputed) CHECK(e.source == 2);

  const auto full = impute(dep, {0.1, 0.2, 0.3});
  CHECK(full.imputed.empty());
  CHECK(full.covariates == std::vector<double>{0.1, 0.2, 0.3});

  // Symmetric covariance: c3 given c1 or c2 has equal variance, c1 wins.
  const auto tie = impute(dep, {0.0, 0.0, std::nullopt});
  CHECK(tie.imputed[0].source == 0);

  CHECK_THROWS_AS(impute(dep, {std::nullopt, std::nullopt, std::nullopt}), DataError);
  CHECK_THROWS_AS(impute(dep, {0.0, 1.0}), ConfigError);
}

TEST_CASE("impute: chosen source always minimizes the reported variance") {
  const auto dep = three_way();
  Rng rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::bernoulli_distribution miss(0.4);
  for (int t = 0; t < 500; ++t) {
    std::vector<std::optional<double>> partial(3);
    for (auto& v : partial) {
      if (!miss(rng)) v = u(rng);
    }
    if (!partial[0] && !partial[1] && !partial[2]) continue;
    const auto imp = impute(dep, partial);
    for (const auto& e : imp.imputed) {
      for (Index k = 0; k < 3; ++k) {
        if (!partial[static_cast<std::size_t>(k)]) continue;
        CHECK(e.variance <= conditional_1d(dep, k, e.covariate, *partial[static_cast<std::size_t>(k)]).variance);
      }
    }
  }
}

TEST_CASE("impute_dataset fills only incomplete records") {
  const auto dep = three_way();
  Dataset ds;
  ds.covariate_names = {"c1", "c2", "c3"};
  ds.records.push_back({"a", 0, {1.0, 2.0, 3.0}, std::nullopt, 0.0});
  ds.records.push_back({"b", 0, {1.0, std::nullopt, 3.0}, std::nullopt, 0.0});
  Index count = 0;
  const Dataset out = impute_dataset(dep, ds, &count);
  CHECK(count == 1);
  CHECK(out.records[0].covariates == ds.records[0].covariates);
  CHECK(out.records[1].complete());
  ds.covariate_names[2] = "other";
  CHECK_THROWS_AS(impute_dataset(dep, ds), ConfigError);
}

TEST_CASE("individualized prediction: identity, homoscedastic, percentile round trip") {
  const QuadraticModel hetero(0.2, 0.5);
  SubjectObservation obs{{0.3, -0.4}, std::nullopt, 1.234567, 0};
  CHECK(individualized_predict(hetero, obs, obs.covariates).response == obs.response);

  const QuadraticModel homo(0.7, 0.0);
  const std::vector<double> next{0.6, -0.1};
  const auto h = individualized_predict(homo, obs, next);
  const double mean0 = 1.0 + 0.3 - 0.8, mean1 = 1.0 + 0.6 - 0.2;
  CHECK(h.response == doctest::Approx(mean1 + (obs.response - mean0)).epsilon(1e-14));

  Rng rng(6);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int t = 0; t < 1000; ++t) {
    SubjectObservation o{{u(rng), u(rng)}, std::nullopt, 3.0 * u(rng), 0};
    const auto p = individualized_predict(hetero, o, {u(rng), u(rng)});
    CHECK(std::abs(gaussian_cdf(p.response, p.next) - gaussian_cdf(o.response, p.current)) < 1e-9);
    CHECK(p.percentile == gaussian_cdf(o.response, p.current));
  }
}

TEST_CASE("individualized prediction: large change flag and domain errors") {
  const QuadraticModel model(0.2, 0.5);
  SubjectObservation obs{{0.0, 0.0}, std::nullopt, 1.0, 0};
  CHECK_FALSE(individualized_predict(model, obs, {0.5, 0.5}).large_change);
  CHECK(individualized_predict(model, obs, {2.5, 0.0}).large_change);  // IQR is 2
  const QuadraticModel broken(0.0, 0.0);
  CHECK_THROWS_AS(individualized_predict(broken, obs, {0.5, 0.5}), DomainError);
  obs.response = std::nan("");
  CHECK_THROWS_AS(individualized_predict(model, obs, {0.5, 0.5}), DomainError);
}
