#include "atlasnam/error.hpp"
#include "atlasnam/monotone.hpp"
#include "unit/test_helpers.hpp"

#include <doctest.h>

using namespace atlasnam;
using nn::Activation;
using nn::DenseNetwork;

namespace {

MonotoneNetwork random_monotone(Index in, Index hidden, double lambda, std::vector<Index> features,
                                std::uint64_t seed, double init_scale = 3.0) {
  Rng rng(seed);
  DenseNetwork base({in, hidden, hidden, 1}, {Activation::kGroupSort, 2}, {Activation::kLinear});
  base.init_uniform(rng);
  base.parameters() *= init_scale;  // push column norms past the bound so normalization bites
  MonotoneNetwork net(std::move(base), lambda, std::move(features));
  net.normalize_weights();
  return net;
}

}  // namespace

TEST_CASE("normalize: W = [[2]], lambda 1, depth 1 gives [[1]]") {
  DenseNetwork net({1, 1}, {Activation::kLinear}, {Activation::kLinear});
  net.weight(0)(0, 0) = 2.0;
  normalize_lipschitz(net, 1.0);
  CHECK(net.weight(0)(0, 0) == 1.0);
}

TEST_CASE("normalize: columns already within the bound are untouched") {
  DenseNetwork net({2, 2, 1}, {Activation::kGroupSort, 2}, {Activation::kLinear});
  net.weight(0) << 0.5, -0.2, 0.3, 0.9;  // column L1 norms 0.8 and 1.1 <= 4^(1/2)
  net.weight(1) << 1.2, -0.7;
  const Eigen::VectorXd before = net.parameters();
  normalize_lipschitz(net, 4.0);
  CHECK(net.parameters() == before);
}

TEST_CASE("normalize: bound holds and normalization is idempotent") {
  for (double lambda : {0.5, 1.0, 3.0}) {
    auto net = random_monotone(3, 16, lambda, {}, 41);
    CHECK(lipschitz_bound(net.base()) <= lambda * (1 + 1e-9));
    const Eigen::VectorXd once = net.base().parameters();
    net.normalize_weights();
    CHECK(net.base().parameters() == once);
  }
}

TEST_CASE("Lipschitz property on 1000 random pairs") {
  const double lambda = 1.5;
  auto net = random_monotone(3, 16, lambda, {}, 42);
  Rng rng(43);
  for (int t = 0; t < 1000; ++t) {
    const Eigen::VectorXd a = testing::uniform_matrix(3, 1, -2, 2, rng);
    const Eigen::VectorXd b = testing::uniform_matrix(3, 1, -2, 2, rng);
    const double lhs = std::abs(net.base().forward(a)(0) - net.base().forward(b)(0));
    CHECK(lhs <= lambda * (1 + 1e-9) * (a - b).lpNorm<1>());
  }
}

TEST_CASE("zero base network reduces to the residual term") {
  DenseNetwork base({2, 4, 1}, {Activation::kGroupSort, 2}, {Activation::kLinear});
  base.set_zero();
  MonotoneNetwork net(std::move(base), 1.0, std::vector<Index>{0});
  CHECK(net.forward(Eigen::Vector2d(3.0, 7.0)) == 3.0);
}

TEST_CASE("empty monotone set is a plain Lipschitz network") {
  auto net = random_monotone(2, 8, 1.0, {}, 44);
  const Eigen::Vector2d in(0.3, -0.4);
  CHECK(net.forward(in) == net.base().forward(in)(0));
}

TEST_CASE("finite-difference slopes are non-negative along monotone features") {
  auto net = random_monotone(3, 32, 1.0, {0, 2}, 45);
  Rng rng(46);
  const double h = 1e-4;
  for (int t = 0; t < 1000; ++t) {
    Eigen::VectorXd p = testing::uniform_matrix(3, 1, -1, 1, rng);
    for (Index j : {Index{0}, Index{2}}) {
      Eigen::VectorXd q = p;
      q(j) += h;
      CHECK((net.forward(q) - net.forward(p)) / h >= -1e-6);
    }
  }
}

TEST_CASE("decreasing terms make the output non-increasing") {
  Rng rng(47);
  DenseNetwork base({2, 16, 1}, {Activation::kGroupSort, 2}, {Activation::kLinear});
  base.init_uniform(rng);
  MonotoneNetwork net(std::move(base), 2.0, std::vector<MonotoneTerm>{{0, 1, -1}});
  net.normalize_weights();
  for (int t = 0; t < 200; ++t) {
    Eigen::VectorXd p = testing::uniform_matrix(2, 1, -1, 1, rng);
    Eigen::VectorXd q = p;
    q(1) += 0.01;
    CHECK(net.forward(q) <= net.forward(p) + 1e-12);
  }
}

TEST_CASE("monotone backward matches central differences") {
  auto net = random_monotone(2, 8, 1.0, {0}, 48, 1.0);
  Rng rng(49);
  testing::FdReport report;
  for (int p = 0; p < 100; ++p) {
    net.base().init_uniform(rng);
    net.normalize_weights();
    const Eigen::MatrixXd in = testing::uniform_matrix(2, 3, -1, 1, rng);
    const Eigen::MatrixXd up = testing::uniform_matrix(1, 3, -1, 1, rng);
    nn::ForwardTape tape;
    net.forward_batch(in, tape);
    const auto g = net.backward(tape, up);
    const auto routing = tape.sort_order;
    auto same = [&] {
      nn::ForwardTape t;
      net.forward_batch(in, t);
      for (std::size_t k = 0; k < routing.size(); ++k) {
        if (routing[k].size() && routing[k] != t.sort_order[k]) return false;
      }
      return true;
    };
    testing::fd_check(net.base().parameters(), g.parameters,
                      [&] { return net.forward_batch(in).cwiseProduct(up).sum(); }, same, 20, rng,
                      report);
    // Input gradient includes the residual.
    Eigen::MatrixXd a = in, b = in;
    a(0, 0) += 1e-6;
    b(0, 0) -= 1e-6;
    const double fd = (net.forward_batch(a).cwiseProduct(up).sum() -
                       net.forward_batch(b).cwiseProduct(up).sum()) / 2e-6;
    CHECK(g.input(0, 0) == doctest::Approx(fd).epsilon(1e-5));
  }
  CHECK(report.checked > 1000);
  CHECK(report.max_relative_error < 1e-3);
}

TEST_CASE("monotone JSON round trip") {
  auto net = random_monotone(2, 8, 2.5, {1}, 50);
  const auto back = MonotoneNetwork::from_json(nlohmann::json::parse(net.to_json().dump()));
  CHECK(back.lipschitz() == 2.5);
  CHECK(back.terms() == net.terms());
  CHECK(back.base().parameters() == net.base().parameters());
  CHECK(net.to_json().at("kind") == "monotone");
  CHECK(net.to_json().at("monotone_features") == nlohmann::json::array({1}));
}

TEST_CASE("monotone construction rejects invalid setups") {
  DenseNetwork gelu({1, 4, 1}, {Activation::kGelu}, {Activation::kLinear});
  CHECK_THROWS_AS(MonotoneNetwork(gelu, 1.0, std::vector<Index>{0}), ConfigError);
  DenseNetwork soft({1, 4, 1}, {Activation::kGroupSort, 2}, {Activation::kSoftplus});
  CHECK_THROWS_AS(MonotoneNetwork(soft, 1.0, std::vector<Index>{0}), ConfigError);
  DenseNetwork ok({1, 4, 1}, {Activation::kGroupSort, 2}, {Activation::kLinear});
  CHECK_THROWS_AS(MonotoneNetwork(ok, 1.0, std::vector<Index>{3}), ConfigError);
  CHECK_THROWS_AS(MonotoneNetwork(ok, 0.0, std::vector<Index>{0}), ConfigError);
}
