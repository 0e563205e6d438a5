#include "atlasnam/monotone.hpp"

#include "atlasnam/error.hpp"

#include <algorithm>
#include <cmath>

namespace atlasnam {

void normalize_lipschitz(nn::DenseNetwork& net, double lipschitz) {
  if (!(lipschitz > 0.0)) throw ConfigError("Lipschitz constant must be > 0");
  const double depth = static_cast<double>(net.num_layers());
  const double inv_root = std::pow(lipschitz, -1.0 / depth);
  for (Index k = 0; k < net.num_layers(); ++k) {
    auto w = net.weight(k);
    for (Index j = 0; j < w.cols(); ++j) {
      // The slack keeps a second pass from rescaling columns that already sit
      // on the bound up to rounding, so normalization is idempotent.
      const double ratio = inv_root * w.col(j).lpNorm<1>();
      if (ratio > 1.0 + 1e-12) w.col(j) /= ratio;
    }
  }
}

nn::DenseNetwork normalized_lipschitz(nn::DenseNetwork net, double lipschitz) {
  normalize_lipschitz(net, lipschitz);
  return net;
}

double lipschitz_bound(const nn::DenseNetwork& net) {
  double bound = 1.0;
  for (Index k = 0; k < net.num_layers(); ++k) {
    bound *= net.weight(k).cwiseAbs().colwise().sum().maxCoeff();
  }
  return bound;
}

MonotoneNetwork::MonotoneNetwork(nn::DenseNetwork base, double lipschitz,
                                 std::vector<Index> monotone_features)
    : base_(std::move(base)), lipschitz_(lipschitz) {
  for (Index j : monotone_features) {
    for (Index k = 0; k < base_.output_dim(); ++k) terms_.push_back({k, j, 1});
  }
  check();
}

MonotoneNetwork::MonotoneNetwork(nn::DenseNetwork base, double lipschitz,
                                 std::vector<MonotoneTerm> terms)
    : base_(std::move(base)), lipschitz_(lipschitz), terms_(std::move(terms)) {
  check();
}

void MonotoneNetwork::check() const {
  if (!(lipschitz_ > 0.0)) throw ConfigError("MonotoneNetwork: Lipschitz constant must be > 0");
  for (const auto& t : terms_) {
    if (t.input < 0 || t.input >= base_.input_dim() || t.output < 0 ||
        t.output >= base_.output_dim() || (t.sign != 1 && t.sign != -1)) {
      throw ConfigError("MonotoneNetwork: invalid monotone term");
    }
  }
  for (nn::Activation head : base_.output_heads()) {
    if (head != nn::Activation::kLinear) {
      throw ConfigError("MonotoneNetwork: residual terms require linear output heads");
    }
  }
  const auto hidden = base_.hidden_activation().kind;
  if (base_.num_layers() > 1 && hidden != nn::Activation::kGroupSort &&
      hidden != nn::Activation::kLinear) {
    throw ConfigError("MonotoneNetwork: hidden activation must be GroupSort (gradient-norm preserving)");
  }
}

std::vector<Index> MonotoneNetwork::monotone_features() const {
  std::vector<Index> out;
  for (const auto& t : terms_) {
    if (std::find(out.begin(), out.end(), t.input) == out.end()) out.push_back(t.input);
  }
  return out;
}

void MonotoneNetwork::add_residual(const Eigen::MatrixXd& inputs, Eigen::MatrixXd& out) const {
  for (const auto& t : terms_) {
    out.row(t.output) += (static_cast<double>(t.sign) * lipschitz_) * inputs.row(t.input);
  }
}

double MonotoneNetwork::forward(const Eigen::VectorXd& input) const {
  return forward_batch(Eigen::MatrixXd(input))(0, 0);
}

Eigen::MatrixXd MonotoneNetwork::forward_batch(const Eigen::MatrixXd& inputs) const {
  Eigen::MatrixXd out = base_.forward_batch(inputs);
  add_residual(inputs, out);
  return out;
}

Eigen::MatrixXd MonotoneNetwork::forward_batch(const Eigen::MatrixXd& inputs,
                                               nn::ForwardTape& tape) const {
  Eigen::MatrixXd out = base_.forward_batch(inputs, tape);
  add_residual(inputs, out);
  return out;
}

nn::Gradients MonotoneNetwork::backward(const nn::ForwardTape& tape,
                                        const Eigen::MatrixXd& upstream) const {
  nn::Gradients grads = base_.backward(tape, upstream);
  for (const auto& t : terms_) {
    grads.input.row(t.input) += (static_cast<double>(t.sign) * lipschitz_) * upstream.row(t.output);
  }
  return grads;
}

nlohmann::json MonotoneNetwork::to_json() const {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : terms_) terms.push_back({t.output, t.input, t.sign});
  return {{"kind", "monotone"},
          {"lipschitz", lipschitz_},
          {"monotone_features", monotone_features()},
          {"terms", terms},
          {"network", base_.to_json()}};
}

MonotoneNetwork MonotoneNetwork::from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("kind").get<std::string>() != "monotone") {
      throw DataError("monotone network JSON: kind must be 'monotone'");
    }
    std::vector<MonotoneTerm> terms;
    for (const auto& t : doc.at("terms")) {
      terms.push_back({t.at(0).get<Index>(), t.at(1).get<Index>(), t.at(2).get<int>()});
    }
    return MonotoneNetwork(nn::DenseNetwork::from_json(doc.at("network")),
                           doc.at("lipschitz").get<double>(), std::move(terms));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("monotone network JSON: ") + e.what());
  }
}

}  // namespace atlasnam
