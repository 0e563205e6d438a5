#include "atlasnam/nn/dense_network.hpp"

#include "atlasnam/error.hpp"

#include <cmath>
#include <string>

namespace atlasnam::nn {

namespace {

void apply_hidden(const ActivationSpec& spec, const Eigen::MatrixXd& z, Eigen::MatrixXd& a,
                  Eigen::MatrixXi* order) {
  switch (spec.kind) {
    case Activation::kLinear: a = z; return;
    case Activation::kGelu: a = z.unaryExpr([](double v) { return gelu(v); }); return;
    case Activation::kSoftplus: a = z.unaryExpr([](double v) { return softplus(v); }); return;
    case Activation::kGroupSort: {
      Eigen::MatrixXi scratch;
      group_sort(z, spec.group_size, a, order ? *order : scratch);
      return;
    }
  }
}

// delta_out is d loss / d activation output; returns d loss / d preactivation.
Eigen::MatrixXd hidden_backward(const ActivationSpec& spec, const Eigen::MatrixXd& z,
                                const Eigen::MatrixXi& order, const Eigen::MatrixXd& delta_out) {
  switch (spec.kind) {
    case Activation::kLinear: return delta_out;
    case Activation::kGelu:
      return delta_out.cwiseProduct(z.unaryExpr([](double v) { return gelu_derivative(v); }));
    case Activation::kSoftplus:
      return delta_out.cwiseProduct(z.unaryExpr([](double v) { return sigmoid(v); }));
    case Activation::kGroupSort: {
      Eigen::MatrixXd delta_in(z.rows(), z.cols());
      for (Index c = 0; c < z.cols(); ++c) {
        for (Index r = 0; r < z.rows(); ++r) delta_in(order(r, c), c) = delta_out(r, c);
      }
      return delta_in;
    }
  }
  return delta_out;
}

}  // namespace

DenseNetwork::DenseNetwork(std::vector<Index> widths, ActivationSpec hidden,
                           std::vector<Activation> output_heads)
    : widths_(std::move(widths)), hidden_(hidden), heads_(std::move(output_heads)) {
  if (widths_.size() < 2) throw ConfigError("DenseNetwork needs at least input and output widths");
  for (Index w : widths_) {
    if (w < 1) throw ConfigError("DenseNetwork: layer widths must be positive");
  }
  if (static_cast<Index>(heads_.size()) != widths_.back()) {
    throw ConfigError("DenseNetwork: " + std::to_string(heads_.size()) +
                      " head activations for output width " + std::to_string(widths_.back()));
  }
  for (Activation head : heads_) {
    if (head != Activation::kLinear && head != Activation::kSoftplus) {
      throw ConfigError("DenseNetwork: output heads must be linear or softplus");
    }
  }
  if (hidden_.kind == Activation::kGroupSort) {
    for (std::size_t k = 1; k + 1 < widths_.size(); ++k) {
      if (hidden_.group_size < 1 || widths_[k] % hidden_.group_size != 0) {
        throw ConfigError("DenseNetwork: hidden width " + std::to_string(widths_[k]) +
                          " not divisible by GroupSort group size " +
                          std::to_string(hidden_.group_size));
      }
    }
  }
  Index offset = 0;
  for (Index k = 0; k < num_layers(); ++k) {
    const Index in = widths_[static_cast<std::size_t>(k)];
    const Index out = widths_[static_cast<std::size_t>(k) + 1];
    weight_offset_.push_back(offset);
    offset += in * out;
    bias_offset_.push_back(offset);
    offset += out;
  }
  params_ = Eigen::VectorXd::Zero(offset);
}

void DenseNetwork::init_uniform(Rng& rng) {
  for (Index k = 0; k < num_layers(); ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths_[static_cast<std::size_t>(k)]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto w = weight(k);
    for (Index j = 0; j < w.cols(); ++j) {
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
    auto b = bias(k);
    for (Index i = 0; i < b.size(); ++i) b(i) = dist(rng);
  }
}

Eigen::Map<Eigen::MatrixXd> DenseNetwork::weight(Index layer) {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + weight_offset_[k], widths_[k + 1], widths_[k]};
}

Eigen::Map<const Eigen::MatrixXd> DenseNetwork::weight(Index layer) const {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + weight_offset_[k], widths_[k + 1], widths_[k]};
}

Eigen::Map<Eigen::VectorXd> DenseNetwork::bias(Index layer) {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + bias_offset_[k], widths_[k + 1]};
}

Eigen::Map<const Eigen::VectorXd> DenseNetwork::bias(Index layer) const {
  const auto k = static_cast<std::size_t>(layer);
  return {params_.data() + bias_offset_[k], widths_[k + 1]};
}

Eigen::VectorXd DenseNetwork::forward(const Eigen::VectorXd& input) const {
  return run(input, nullptr).col(0);
}

Eigen::MatrixXd DenseNetwork::forward_batch(const Eigen::MatrixXd& inputs) const {
  return run(inputs, nullptr);
}

Eigen::MatrixXd DenseNetwork::forward_batch(const Eigen::MatrixXd& inputs,
                                            ForwardTape& tape) const {
  return run(inputs, &tape);
}

Eigen::MatrixXd DenseNetwork::run(const Eigen::MatrixXd& inputs, ForwardTape* tape) const {
  if (inputs.rows() != input_dim()) {
    throw ConfigError("DenseNetwork: input has " + std::to_string(inputs.rows()) +
                      " rows, expected " + std::to_string(input_dim()));
  }
  if (tape) {
    tape->inputs.assign(static_cast<std::size_t>(num_layers()), {});
    tape->preactivations.assign(static_cast<std::size_t>(num_layers()), {});
    tape->sort_order.assign(static_cast<std::size_t>(num_layers()), {});
  }
  Eigen::MatrixXd a = inputs;
  for (Index k = 0; k < num_layers(); ++k) {
    const auto ks = static_cast<std::size_t>(k);
    Eigen::MatrixXd z = weight(k) * a;
    z.colwise() += bias(k);
    if (tape) tape->inputs[ks] = a;
    if (k + 1 < num_layers()) {
      apply_hidden(hidden_, z, a, tape ? &tape->sort_order[ks] : nullptr);
    } else {
      a = z;
      for (Index r = 0; r < z.rows(); ++r) {
        if (heads_[static_cast<std::size_t>(r)] == Activation::kSoftplus) {
          a.row(r) = z.row(r).unaryExpr([](double v) { return softplus(v); });
        }
      }
    }
    if (tape) tape->preactivations[ks] = std::move(z);
  }
  return a;
}

Gradients DenseNetwork::backward(const ForwardTape& tape, const Eigen::MatrixXd& upstream) const {
  const Index last = num_layers() - 1;
  if (static_cast<Index>(tape.inputs.size()) != num_layers()) {
    throw ConfigError("DenseNetwork::backward: tape does not belong to this network");
  }
  const auto& z_last = tape.preactivations[static_cast<std::size_t>(last)];
  if (upstream.rows() != output_dim() || upstream.cols() != z_last.cols()) {
    throw ConfigError("DenseNetwork::backward: upstream gradient shape mismatch");
  }
  Gradients grads;
  grads.parameters = Eigen::VectorXd::Zero(num_parameters());

  Eigen::MatrixXd delta = upstream;
  for (Index r = 0; r < delta.rows(); ++r) {
    if (heads_[static_cast<std::size_t>(r)] == Activation::kSoftplus) {
      delta.row(r) = delta.row(r).cwiseProduct(
          z_last.row(r).unaryExpr([](double v) { return sigmoid(v); }));
    }
  }
  for (Index k = last; k >= 0; --k) {
    const auto ks = static_cast<std::size_t>(k);
    const auto& a = tape.inputs[ks];
    Eigen::Map<Eigen::MatrixXd> gw(grads.parameters.data() + weight_offset_[ks], widths_[ks + 1],
                                   widths_[ks]);
    Eigen::Map<Eigen::VectorXd> gb(grads.parameters.data() + bias_offset_[ks], widths_[ks + 1]);
    gw.noalias() = delta * a.transpose();
    gb = delta.rowwise().sum();
    Eigen::MatrixXd delta_in = weight(k).transpose() * delta;
    if (k > 0) {
      delta = hidden_backward(hidden_, tape.preactivations[ks - 1], tape.sort_order[ks - 1],
                              delta_in);
    } else {
      grads.input = std::move(delta_in);
    }
  }
  if (!grads.parameters.allFinite()) {
    throw NumericalError("DenseNetwork::backward: non-finite parameter gradient");
  }
  return grads;
}

nlohmann::json DenseNetwork::to_json() const {
  nlohmann::json heads = nlohmann::json::array();
  for (Activation h : heads_) heads.push_back(to_string(h));
  return {
      {"widths", widths_},
      {"hidden", to_string(hidden_.kind)},
      {"group_size", hidden_.group_size},
      {"heads", heads},
      {"params", std::vector<double>(params_.data(), params_.data() + params_.size())},
  };
}

DenseNetwork DenseNetwork::from_json(const nlohmann::json& doc) {
  try {
    ActivationSpec hidden{activation_from_string(doc.at("hidden").get<std::string>()),
                          doc.at("group_size").get<int>()};
    std::vector<Activation> heads;
    for (const auto& h : doc.at("heads")) heads.push_back(activation_from_string(h.get<std::string>()));
    DenseNetwork net(doc.at("widths").get<std::vector<Index>>(), hidden, std::move(heads));
    const auto params = doc.at("params").get<std::vector<double>>();
    if (static_cast<Index>(params.size()) != net.num_parameters()) {
      throw DataError("network JSON: expected " + std::to_string(net.num_parameters()) +
                      " parameters, found " + std::to_string(params.size()));
    }
    net.params_ = Eigen::Map<const Eigen::VectorXd>(params.data(), net.num_parameters());
    net.check_finite();
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("network JSON: ") + e.what());
  }
}

void DenseNetwork::check_finite() const {
  if (!params_.allFinite()) throw NumericalError("DenseNetwork: non-finite parameter");
}

}  // namespace atlasnam::nn
