#include "atlasnam/atlas.hpp"
#include "atlasnam/error.hpp"
#include "atlasnam/gaussian.hpp"
#include "unit/test_helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <numeric>

using namespace atlasnam;

namespace {

// n records with covariates drawn U[-2, 2] and y = f(c) + sd(c) * eps.
template <class Mean, class Sd>
Dataset synthetic(Index n, Index n_cov, Mean mean, Sd sd, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::normal_distribution<double> z;
  Dataset ds;
  for (Index i = 0; i < n_cov; ++i) ds.covariate_names.push_back("c" + std::to_string(i + 1));
  for (Index k = 0; k < n; ++k) {
    Record r;
    r.subject_id = "s" + std::to_string(k);
    std::vector<double> c;
    for (Index i = 0; i < n_cov; ++i) c.push_back(u(rng));
    r.response = mean(c) + sd(c) * z(rng);
    for (double v : c) r.covariates.emplace_back(v);
    ds.records.push_back(std::move(r));
  }
  return ds;
}

AtlasConfig quick_config(int epochs = 150) {
  AtlasConfig cfg;
  cfg.hidden_width = 32;
  cfg.train.max_epochs = epochs;
  cfg.train.patience = 20;
  cfg.train.batch_size = 64;
  return cfg;
}

ModelSchema unit_schema(Index n, bool spatial = false) {
  ModelSchema s;
  for (Index i = 0; i < n; ++i) {
    s.covariate_names.push_back("c" + std::to_string(i));
    s.priors.push_back(MonotonePrior::kNone);
    s.covariate_scaling.push_back({-2.0, 2.0, -1.0, 1.0});
  }
  s.spatial = spatial;
  s.response_scaling = {0.0, 1.0};
  return s;
}

}  // namespace

TEST_CASE("nll_loss anchors") {
  CHECK(nll_loss({0.0, 1.0}, 0.0) == doctest::Approx(0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-12));
  CHECK(nll_loss({0.0, 1.0}, 2.0) == doctest::Approx(0.918939 + 2.0).epsilon(1e-6));
  CHECK_THROWS_AS(nll_loss({0.0, 0.0}, 1.0), DomainError);
  CHECK_THROWS_AS(nll_loss({0.0, -1.0}, 1.0), DomainError);
}

TEST_CASE("nll_loss is minimized over v at v = r^2") {
  const double r = 0.7;
  double best_v = 0.0, best = 1e300;
  for (double v = 0.01; v < 2.0; v += 1e-4) {
    const double l = nll_loss({0.0, v}, r);
    if (l < best) best = l, best_v = v;
  }
  CHECK(best_v == doctest::Approx(r * r).epsilon(1e-3));
}

TEST_CASE("zero-weight atlas predicts the intercept and N ln 2") {
  AtlasConfig cfg;
  cfg.hidden_width = 8;
  cfg.variance_floor = 0.0;
  AtlasModel model(unit_schema(3), cfg, 1);
  for (auto& s : model.subnetworks()) {
    std::get<nn::DenseNetwork>(s.mean_head).set_zero();
    s.variance_head.set_zero();
  }
  model.intercept_standardized() = 0.75;
  const auto p = model.predict(std::vector<double>{0.3, -1.0, 1.5}, std::nullopt);
  CHECK(p.mean == 0.75);
  CHECK(p.variance == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("predict is additive and disentangle sums to predict") {
  AtlasConfig cfg;
  cfg.hidden_width = 16;
  ModelSchema schema = unit_schema(3, true);
  schema.priors[1] = MonotonePrior::kIncreasing;
  schema.response_scaling = {3.0, 2.5};
  AtlasModel model(schema, cfg, 2);
  model.intercept_standardized() = -0.4;
  Rng rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0), ux(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const std::vector<double> c{u(rng), u(rng), u(rng)};
    const double x = ux(rng);
    const auto p = model.predict(c, x);
    double m = model.intercept(), v = 0.0;
    for (Index i = 0; i < 3; ++i) {
      const auto part = model.disentangle(i, c[static_cast<std::size_t>(i)], x);
      m += part.mean;
      v += part.variance;
      CHECK(part.variance > 0.0);
    }
    CHECK(std::abs(m - p.mean) < 1e-9);
    CHECK(std::abs(v - p.variance) < 1e-9);

    std::vector<double> c2 = c;
    c2[0] = u(rng);
    const double delta = model.predict(c2, x).mean - p.mean;
    const double expected = model.disentangle(0, c2[0], x).mean - model.disentangle(0, c[0], x).mean;
    CHECK(std::abs(delta - expected) < 1e-12);
  }
}

TEST_CASE("predict validates inputs") {
  AtlasConfig cfg;
  cfg.hidden_width = 8;
  AtlasModel model(unit_schema(2, true), cfg, 4);
  CHECK_THROWS_AS(model.predict(std::vector<double>{0.1, 0.2}, std::nullopt), ConfigError);
  CHECK_THROWS_AS(model.predict(std::vector<double>{0.1, 0.2}, 1.5), DomainError);
  CHECK_THROWS_AS(model.predict(std::vector<double>{0.1}, 0.5), ConfigError);
  CHECK_THROWS_AS(model.disentangle(2, 0.0, 0.5), ConfigError);
  try {
    model.predict(std::vector<std::optional<double>>{0.1, std::nullopt}, 0.5);
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("impute") != std::string::npos);
  }
}

TEST_CASE("atlas, joint MLP, and monotone heads: objective gradients match finite differences") {
  Dataset ds = synthetic(
      64, 2, [](const auto& c) { return c[0] + std::sin(c[1]); }, [](const auto&) { return 0.3; }, 5);
  for (int variant = 0; variant < 2; ++variant) {
    CAPTURE(variant);
    std::vector<MonotonePrior> priors{MonotonePrior::kIncreasing, MonotonePrior::kDecreasing};
    if (variant == 1) priors = {MonotonePrior::kNone, MonotonePrior::kNone};
    ModelSchema schema = ModelSchema::from_dataset(ds, priors);
    AtlasConfig cfg;
    cfg.hidden_width = 8;
    Rng rng(6);
    AtlasModel model(schema, cfg, 7);
    const TrainingTable table = TrainingTable::build(schema, ds);
    AtlasObjective obj(model, table);
    std::vector<Index> rows(16);
    std::iota(rows.begin(), rows.end(), 0);
    testing::FdReport report;
    for (int point = 0; point < 100; ++point) {
      for (auto& s : model.subnetworks()) {
        Rng init(derive_seed(100, static_cast<std::uint64_t>(point)));
        if (auto* plain = std::get_if<nn::DenseNetwork>(&s.mean_head)) plain->init_uniform(init);
        else std::get<MonotoneNetwork>(s.mean_head).base().init_uniform(init), s.project();
        s.variance_head.init_uniform(init);
      }
      obj.loss_and_gradient(rows);
      auto blocks = obj.parameter_blocks();
      auto routing = [&] {
        std::vector<Eigen::MatrixXi> out;
        for (Index i = 0; i < model.num_covariates(); ++i) {
          const auto& s = model.subnetworks()[static_cast<std::size_t>(i)];
          if (!s.monotone()) continue;
          nn::ForwardTape t;
          s.mean_forward(table.inputs.leftCols(16).row(i), t);
          out.push_back(t.sort_order.empty() ? Eigen::MatrixXi() : t.sort_order[0]);
        }
        return out;
      };
      const auto base_routing = routing();
      for (auto& b : blocks) {
        const Eigen::VectorXd g = *b.gradient;
        testing::fd_check(*b.values, g, [&] { return obj.mean_loss(rows); },
                          [&] { return routing() == base_routing; }, 4, rng, report);
      }
    }
    CHECK(report.checked > 500);
    CHECK(report.max_relative_error < 1e-3);
  }

  ModelSchema schema = ModelSchema::from_dataset(ds, {});
  AtlasConfig cfg;
  cfg.hidden_width = 8;
  JointMlpModel mlp(schema, cfg, 8);
  JointMlpObjective obj(mlp, TrainingTable::build(schema, ds));
  std::vector<Index> rows(32);
  std::iota(rows.begin(), rows.end(), 0);
  Rng rng(9);
  testing::FdReport report;
  for (int point = 0; point < 100; ++point) {
    mlp.network().init_uniform(rng);
    obj.loss_and_gradient(rows);
    auto blocks = obj.parameter_blocks();
    const Eigen::VectorXd g = *blocks[0].gradient;
    testing::fd_check(*blocks[0].values, g, [&] { return obj.mean_loss(rows); }, [] { return true; },
                      20, rng, report);
  }
  CHECK(report.max_relative_error < 1e-3);
}

TEST_CASE("fit_atlas recovers y = c1 + c2") {
  Dataset ds = synthetic(
      3000, 2, [](const auto& c) { return c[0] + c[1]; }, [](const auto&) { return 0.1; }, 10);
  const auto fit = fit_atlas(ds, quick_config(200), {});
  double worst = 0.0;
  for (double a = -1.8; a <= 1.8; a += 0.3) {
    for (double b = -1.8; b <= 1.8; b += 0.3) {
      worst = std::max(worst, std::abs(fit.model.predict(std::vector<double>{a, b}, std::nullopt).mean - (a + b)));
    }
  }
  CHECK(worst < 0.05);
  CHECK(fit.history.best_validation_loss < fit.history.epochs.front().validation_loss);
}

TEST_CASE("fit_atlas: homoscedastic variance and independent sine recovery") {
  Dataset ds = synthetic(
      4000, 2, [](const auto& c) { return std::sin(c[0]) + c[1]; }, [](const auto&) { return 0.2; },
      11);
  const auto fit = fit_atlas(ds, quick_config(200), {});
  std::vector<double> learned, truth;
  for (double a = -2.0; a <= 2.0; a += 0.04) {
    learned.push_back(fit.model.disentangle(0, a, std::nullopt).mean);
    truth.push_back(std::sin(a));
    const double v = fit.model.predict(std::vector<double>{a, 0.5 * a}, std::nullopt).variance;
    CHECK(v >= 0.02);
    CHECK(v <= 0.08);
  }
  CHECK(testing::pearson(learned, truth) > 0.99);
}

TEST_CASE("fit_atlas: monotone priors hold on a 1000-point grid") {
  // The second covariate's true effect is non-monotone; the prior must still win.
  Dataset ds = synthetic(
      1500, 2, [](const auto& c) { return c[0] - 0.5 * c[1] * c[1]; }, [](const auto&) { return 0.2; },
      12);
  const auto fit =
      fit_atlas(ds, quick_config(60), {MonotonePrior::kIncreasing, MonotonePrior::kDecreasing});
  double prev0 = -1e300, prev1 = 1e300;
  for (int g = 0; g < 1000; ++g) {
    const double c = -2.0 + 4.0 * g / 999.0;
    const double m0 = fit.model.disentangle(0, c, std::nullopt).mean;
    const double m1 = fit.model.disentangle(1, c, std::nullopt).mean;
    CHECK(m0 >= prev0 - 1e-9);
    CHECK(m1 <= prev1 + 1e-9);
    prev0 = m0;
    prev1 = m1;
  }
}

TEST_CASE("translation of the response shifts predicted means") {
  Dataset ds = synthetic(
      800, 2, [](const auto& c) { return c[0] * c[1]; }, [](const auto&) { return 0.3; }, 13);
  Dataset shifted = ds;
  for (auto& r : shifted.records) r.response += 5.0;
  const auto a = fit_atlas(ds, quick_config(30), {});
  const auto b = fit_atlas(shifted, quick_config(30), {});
  for (double c = -1.5; c <= 1.5; c += 0.5) {
    const auto pa = a.model.predict(std::vector<double>{c, -c}, std::nullopt);
    const auto pb = b.model.predict(std::vector<double>{c, -c}, std::nullopt);
    CHECK(std::abs(pb.mean - pa.mean - 5.0) < 0.05);
    CHECK(pb.variance == doctest::Approx(pa.variance).epsilon(1e-6));
  }
}

TEST_CASE("joint MLP baseline trains") {
  Dataset ds = synthetic(
      800, 2, [](const auto& c) { return c[0] * c[1]; }, [](const auto&) { return 0.3; }, 14);
  auto [train, val] = carve_validation(ds, 0.15, 0);
  const auto fit = fit_joint_mlp(train, val, quick_config(40));
  CHECK(fit.history.best_validation_loss < fit.history.epochs.front().validation_loss);
  const auto p = fit.model.predict(std::vector<double>{1.0, 1.0}, std::nullopt);
  CHECK(p.variance > 0.0);
}

TEST_CASE("fit_atlas error paths") {
  Dataset empty;
  empty.covariate_names = {"a"};
  CHECK_THROWS_AS(fit_atlas(empty, quick_config(), {}), DataError);

  Dataset ds = synthetic(
      50, 2, [](const auto& c) { return c[0]; }, [](const auto&) { return 1.0; }, 15);
  Dataset all_missing = ds;
  for (auto& r : all_missing.records) r.covariates[1].reset();
  try {
    fit_atlas(all_missing, ds.empty_like(), quick_config(), {});
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("c2") != std::string::npos);
  }
  Dataset one_missing = ds;
  one_missing.records[3].covariates[0].reset();
  try {
    fit_atlas(one_missing, ds.empty_like(), quick_config(), {});
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("impute") != std::string::npos);
  }
  CHECK_THROWS_AS(fit_atlas(ds, quick_config(), {MonotonePrior::kNone}), ConfigError);
}

TEST_CASE("model JSON round trip reproduces predictions bit for bit") {
  AtlasConfig cfg;
  cfg.hidden_width = 16;
  ModelSchema schema = unit_schema(2, true);
  schema.priors[0] = MonotonePrior::kDecreasing;
  AtlasModel model(schema, cfg, 16);
  const std::string text = model.to_json().dump();
  const auto back = predictive_model_from_json(nlohmann::json::parse(text));
  CHECK(back->to_json().dump() == text);
  for (double c = -2.0; c <= 2.0; c += 0.25) {
    const auto a = model.predict(std::vector<double>{c, 0.5}, 0.3);
    const auto b = back->predict(std::vector<double>{c, 0.5}, 0.3);
    CHECK(a.mean == b.mean);
    CHECK(a.variance == b.variance);
  }
  JointMlpModel mlp(schema, cfg, 17);
  const auto mlp_back = predictive_model_from_json(nlohmann::json::parse(mlp.to_json().dump()));
  CHECK(mlp_back->predict(std::vector<double>{0.1, 0.2}, 0.4).mean ==
        mlp.predict(std::vector<double>{0.1, 0.2}, 0.4).mean);
  CHECK_THROWS_AS(predictive_model_from_json({{"kind", "forest"}}), DataError);
}

TEST_CASE("covariate scaling statistics") {
  const auto s = CovariateScaling::fit({4.0, 1.0, 3.0, 2.0, 5.0});
  CHECK(s.min == 1.0);
  CHECK(s.max == 5.0);
  CHECK(s.q25 == 2.0);
  CHECK(s.q75 == 4.0);
  CHECK(s.normalize(3.0) == 0.5);
  CHECK(s.denormalize(0.25) == 2.0);
  CHECK_THROWS_AS(prior_from_string("sideways"), ConfigError);
  CHECK(prior_from_string(to_string(MonotonePrior::kDecreasing)) == MonotonePrior::kDecreasing);
}
