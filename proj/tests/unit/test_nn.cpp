#include "atlasnam/error.hpp"
#include "atlasnam/nn/activation.hpp"
#include "atlasnam/nn/dense_network.hpp"
#include "atlasnam/nn/train.hpp"
#include "unit/test_helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

using namespace atlasnam;
using namespace atlasnam::nn;
using atlasnam::testing::FdReport;

namespace {

// Scalar loss sum(upstream .* net(inputs)) so that d loss / d output = upstream.
double probe_loss(const DenseNetwork& net, const Eigen::MatrixXd& in, const Eigen::MatrixXd& up) {
  return net.forward_batch(in).cwiseProduct(up).sum();
}

FdReport gradient_check(DenseNetwork net, int points, std::uint64_t seed) {
  Rng rng(seed);
  FdReport report;
  for (int p = 0; p < points; ++p) {
    net.init_uniform(rng);
    const Eigen::MatrixXd in = testing::uniform_matrix(net.input_dim(), 3, -1.0, 1.0, rng);
    const Eigen::MatrixXd up = testing::uniform_matrix(net.output_dim(), 3, -1.0, 1.0, rng);
    ForwardTape tape;
    net.forward_batch(in, tape);
    const Gradients g = net.backward(tape, up);
    const auto routing = tape.sort_order;
    auto same = [&] {
      ForwardTape t;
      net.forward_batch(in, t);
      for (std::size_t k = 0; k < routing.size(); ++k) {
        if (routing[k].size() && routing[k] != t.sort_order[k]) return false;
      }
      return true;
    };
    testing::fd_check(net.parameters(), g.parameters, [&] { return probe_loss(net, in, up); }, same,
                      20, rng, report);
  }
  return report;
}

// Mean squared error of a single-output network on (x, y) columns.
class MseObjective final : public Objective {
 public:
  MseObjective(DenseNetwork& net, Eigen::MatrixXd x, Eigen::RowVectorXd y)
      : net_(net), x_(std::move(x)), y_(std::move(y)), grad_(Eigen::VectorXd::Zero(net.num_parameters())) {}

  std::vector<ParameterBlock> parameter_blocks() override { return {{&net_.parameters(), &grad_}}; }

  double loss_and_gradient(std::span<const Index> rows) override {
    Eigen::MatrixXd in(x_.rows(), static_cast<Index>(rows.size()));
    Eigen::RowVectorXd target(static_cast<Index>(rows.size()));
    for (Index b = 0; b < in.cols(); ++b) {
      in.col(b) = x_.col(rows[static_cast<std::size_t>(b)]);
      target(b) = y_(rows[static_cast<std::size_t>(b)]) + poison_;
    }
    ForwardTape tape;
    const Eigen::RowVectorXd r = net_.forward_batch(in, tape).row(0) - target;
    const double scale = 1.0 / static_cast<double>(rows.size());
    grad_ = net_.backward(tape, 2.0 * scale * r).parameters;
    return r.squaredNorm() * scale;
  }

  double mean_loss(std::span<const Index> rows) const override {
    double total = 0.0;
    for (Index r : rows) {
      const double e = net_.forward(x_.col(r))(0) - y_(r);
      total += e * e;
    }
    return total / static_cast<double>(rows.size());
  }

  double poison_ = 0.0;

 private:
  DenseNetwork& net_;
  Eigen::MatrixXd x_;
  Eigen::RowVectorXd y_;
  Eigen::VectorXd grad_;
};

struct LinearProblem {
  DenseNetwork net{{1, 16, 1}, {Activation::kGelu}, {Activation::kLinear}};
  Eigen::MatrixXd x;
  Eigen::RowVectorXd y;
  std::vector<Index> train, val;

  explicit LinearProblem(std::uint64_t seed) {
    Rng rng(seed);
    net.init_uniform(rng);
    x = testing::uniform_matrix(1, 200, -1.0, 1.0, rng);
    y = 2.0 * x.row(0);
    for (Index k = 0; k < 200; ++k) (k % 5 == 0 ? val : train).push_back(k);
  }
};

}  // namespace

TEST_CASE("forward: identity linear layer") {
  DenseNetwork net({2, 2}, {Activation::kLinear}, {Activation::kLinear, Activation::kLinear});
  net.set_zero();
  net.weight(0) = Eigen::Matrix2d::Identity();
  const Eigen::VectorXd out = net.forward(Eigen::Vector2d(3.0, -2.0));
  CHECK(out(0) == 3.0);
  CHECK(out(1) == -2.0);
}

TEST_CASE("forward: softplus head at zero gives ln 2") {
  DenseNetwork net({1, 1}, {Activation::kLinear}, {Activation::kSoftplus});
  net.set_zero();
  CHECK(net.forward(Eigen::VectorXd::Zero(1))(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("GroupSort sorts each pair ascending") {
  Eigen::MatrixXd in(4, 1);
  in << 2.0, -1.0, 0.0, 5.0;
  Eigen::MatrixXd out;
  Eigen::MatrixXi order;
  group_sort(in, 2, out, order);
  CHECK(out(0, 0) == -1.0);
  CHECK(out(1, 0) == 2.0);
  CHECK(out(2, 0) == 0.0);
  CHECK(out(3, 0) == 5.0);
  CHECK(order(0, 0) == 1);
  CHECK(order(1, 0) == 0);

  Eigen::MatrixXd in6(6, 1);
  in6 << 3, 1, 2, -4, 0, -5;
  group_sort(in6, 3, out, order);
  CHECK(out.col(0).transpose() == Eigen::RowVectorXd{{1, 2, 3, -5, -4, 0}});
  CHECK_THROWS_AS(group_sort(in6, 4, out, order), ConfigError);
}

TEST_CASE("construction validates widths and heads") {
  CHECK_THROWS_AS(DenseNetwork({3, 5, 1}, {Activation::kGroupSort, 2}, {Activation::kLinear}),
                  ConfigError);
  CHECK_THROWS_AS(DenseNetwork({3, 4, 1}, {Activation::kGelu}, {Activation::kGelu}), ConfigError);
  CHECK_THROWS_AS(DenseNetwork({3, 4, 2}, {Activation::kGelu}, {Activation::kLinear}), ConfigError);
}

TEST_CASE("forward: dimension mismatch is a configuration error") {
  DenseNetwork net({3, 4, 1}, {Activation::kGelu}, {Activation::kLinear});
  CHECK_THROWS_AS(net.forward(Eigen::VectorXd::Zero(2)), ConfigError);
}

TEST_CASE("softplus stays strictly positive over the representable range") {
  for (double z = -700.0; z <= 700.0; z += 0.5) CHECK(softplus(z) > 0.0);
  CHECK(softplus(1000.0) == 1000.0);
}

TEST_CASE("gelu derivative matches finite differences") {
  for (double z = -4.0; z <= 4.0; z += 0.37) {
    const double fd = (gelu(z + 1e-6) - gelu(z - 1e-6)) / 2e-6;
    CHECK(gelu_derivative(z) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("backward: single linear layer, loss = output^2") {
  DenseNetwork net({2, 1}, {Activation::kLinear}, {Activation::kLinear});
  net.weight(0) << 0.5, -1.5;
  net.bias(0) << 0.25;
  const Eigen::Vector2d input(2.0, 3.0);
  ForwardTape tape;
  const double out = net.forward_batch(input, tape)(0, 0);
  const Gradients g = net.backward(tape, Eigen::MatrixXd::Constant(1, 1, 2.0 * out));
  CHECK(g.parameters(0) == doctest::Approx(2.0 * out * input(0)));
  CHECK(g.parameters(1) == doctest::Approx(2.0 * out * input(1)));
  CHECK(g.parameters(2) == doctest::Approx(2.0 * out));
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  Rng rng(3);
  DenseNetwork net({3, 8, 2}, {Activation::kGelu}, {Activation::kLinear, Activation::kSoftplus});
  net.init_uniform(rng);
  ForwardTape tape;
  net.forward_batch(testing::uniform_matrix(3, 5, -1, 1, rng), tape);
  const Gradients g = net.backward(tape, Eigen::MatrixXd::Zero(2, 5));
  CHECK(g.parameters.isZero(0.0));
  CHECK(g.input.isZero(0.0));
}

TEST_CASE("backward: NaN gradient surfaces as a numerical error") {
  Rng rng(4);
  DenseNetwork net({2, 4, 1}, {Activation::kGelu}, {Activation::kLinear});
  net.init_uniform(rng);
  ForwardTape tape;
  net.forward_batch(testing::uniform_matrix(2, 2, -1, 1, rng), tape);
  Eigen::MatrixXd up = Eigen::MatrixXd::Ones(1, 2);
  up(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(net.backward(tape, up), NumericalError);
}

TEST_CASE("backward matches central differences for every shape") {
  SUBCASE("GeLU with linear and softplus heads") {
    const auto r = gradient_check(
        DenseNetwork({2, 12, 2}, {Activation::kGelu}, {Activation::kLinear, Activation::kSoftplus}),
        100, 11);
    CHECK(r.checked > 1500);
    CHECK(r.max_relative_error < 1e-3);
  }
  SUBCASE("two hidden GroupSort layers") {
    const auto r = gradient_check(
        DenseNetwork({3, 8, 8, 1}, {Activation::kGroupSort, 2}, {Activation::kLinear}), 100, 12);
    CHECK(r.checked > 1500);
    CHECK(r.max_relative_error < 1e-3);
  }
  SUBCASE("GroupSort with group size 4") {
    const auto r = gradient_check(
        DenseNetwork({1, 8, 3}, {Activation::kGroupSort, 4},
                     {Activation::kLinear, Activation::kLinear, Activation::kLinear}),
        100, 13);
    CHECK(r.max_relative_error < 1e-3);
  }
}

TEST_CASE("backward: input gradient matches central differences") {
  Rng rng(21);
  DenseNetwork net({3, 10, 1}, {Activation::kGelu}, {Activation::kSoftplus});
  net.init_uniform(rng);
  Eigen::MatrixXd in = testing::uniform_matrix(3, 1, -1, 1, rng);
  ForwardTape tape;
  net.forward_batch(in, tape);
  const Gradients g = net.backward(tape, Eigen::MatrixXd::Ones(1, 1));
  for (Index j = 0; j < 3; ++j) {
    Eigen::MatrixXd a = in, b = in;
    a(j, 0) += 1e-5;
    b(j, 0) -= 1e-5;
    const double fd = (net.forward_batch(a)(0, 0) - net.forward_batch(b)(0, 0)) / 2e-5;
    CHECK(g.input(j, 0) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("JSON round trip preserves the network exactly") {
  Rng rng(5);
  DenseNetwork net({2, 6, 2}, {Activation::kGroupSort, 3}, {Activation::kLinear, Activation::kSoftplus});
  net.init_uniform(rng);
  const DenseNetwork back = DenseNetwork::from_json(nlohmann::json::parse(net.to_json().dump()));
  CHECK(back.parameters() == net.parameters());
  CHECK(back.widths() == net.widths());
  CHECK(back.hidden_activation() == net.hidden_activation());
  CHECK(back.output_heads() == net.output_heads());
  auto doc = net.to_json();
  doc["params"].erase(0);
  CHECK_THROWS_AS(DenseNetwork::from_json(doc), DataError);
}

TEST_CASE("cosine annealing schedule") {
  CHECK(cosine_annealed_rate(1e-2, 0.0, 0, 100) == doctest::Approx(1e-2));
  CHECK(cosine_annealed_rate(1e-2, 0.0, 50, 100) == doctest::Approx(5e-3));
  CHECK(cosine_annealed_rate(1e-2, 1e-4, 100, 100) == doctest::Approx(1e-4));
}

TEST_CASE("train_loop fits y = 2c") {
  LinearProblem p(7);
  MseObjective obj(p.net, p.x, p.y);
  TrainConfig cfg;
  cfg.max_epochs = 300;
  cfg.patience = 300;
  const TrainHistory h = train_loop(obj, p.train, p.val, cfg);
  CHECK(obj.mean_loss(p.train) < 1e-3);
  CHECK(h.best_validation_loss <= h.epochs.front().validation_loss);
  CHECK(h.epochs.front().epoch == 0);
}

TEST_CASE("train_loop: patience 0 stops after the first non-improving epoch") {
  LinearProblem p(8);
  MseObjective obj(p.net, p.x, p.y);
  TrainConfig cfg;
  cfg.patience = 0;
  cfg.learning_rate = 0.5;  // large enough to overshoot quickly
  const TrainHistory h = train_loop(obj, p.train, p.val, cfg);
  REQUIRE(h.stopped_early);
  const auto& last = h.epochs.back();
  double best_before = h.epochs.front().validation_loss;
  for (std::size_t k = 1; k + 1 < h.epochs.size(); ++k) {
    CHECK(h.epochs[k].validation_loss < best_before);  // every earlier epoch improved
    best_before = h.epochs[k].validation_loss;
  }
  CHECK(last.validation_loss >= best_before);
}

TEST_CASE("train_loop: returned parameters never lose to the initialization") {
  LinearProblem p(9);
  MseObjective obj(p.net, p.x, p.y);
  const double initial = obj.mean_loss(p.val);
  TrainConfig cfg;
  cfg.learning_rate = 5.0;  // diverging run
  cfg.max_epochs = 5;
  train_loop(obj, p.train, p.val, cfg);
  CHECK(obj.mean_loss(p.val) <= initial);
}

TEST_CASE("train_loop: same seed gives a bit-identical history") {
  auto run = [] {
    LinearProblem p(10);
    MseObjective obj(p.net, p.x, p.y);
    TrainConfig cfg;
    cfg.max_epochs = 20;
    cfg.seed = 99;
    const auto h = train_loop(obj, p.train, p.val, cfg);
    std::vector<double> losses;
    for (const auto& e : h.epochs) losses.push_back(e.train_loss), losses.push_back(e.validation_loss);
    return std::pair{losses, p.net.parameters()};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("train_loop: NaN loss aborts with epoch and batch") {
  LinearProblem p(11);
  MseObjective obj(p.net, p.x, p.y);
  obj.poison_ = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  try {
    train_loop(obj, p.train, p.val, cfg);
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}

TEST_CASE("TrainConfig JSON rejects unknown keys and bad values") {
  TrainConfig defaults;
  CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rat", 0.1}}, defaults), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", -1.0}}, defaults), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"validation_fraction", 1.0}}, defaults), ConfigError);
  const auto cfg = TrainConfig::from_json({{"batch_size", 1024}}, defaults);
  CHECK(cfg.batch_size == 1024);
  CHECK(cfg.learning_rate == 1e-2);
}
