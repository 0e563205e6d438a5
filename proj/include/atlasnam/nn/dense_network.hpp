#pragma once

#include "atlasnam/nn/activation.hpp"
#include "atlasnam/rng.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <vector>

namespace atlasnam::nn {

using Eigen::Index;

/// Records the intermediate values of a batched forward pass.
struct ForwardTape {
  std::vector<Eigen::MatrixXd> inputs;          // input to layer k, one column per sample
  std::vector<Eigen::MatrixXd> preactivations;  // W_k a_k + b_k
  std::vector<Eigen::MatrixXi> sort_order;      // GroupSort routing for hidden layers
};

struct Gradients {
  Eigen::VectorXd parameters;  // same layout as DenseNetwork::parameters()
  Eigen::MatrixXd input;       // d loss / d input, one column per sample
};

/// Fully connected feedforward network. Layer k computes z = W_k a + b_k with
/// W_k stored column-major (out x in). Hidden layers share one activation; the
/// last layer applies a per-output head activation (Linear or Softplus).
///
/// All parameters live in one flat vector so optimizers and serializers can
/// treat the network as a single block.
class DenseNetwork {
 public:
  DenseNetwork() = default;
  DenseNetwork(std::vector<Index> widths, ActivationSpec hidden,
               std::vector<Activation> output_heads);

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  void init_uniform(Rng& rng);
  void set_zero() { params_.setZero(); }

  Index input_dim() const { return widths_.front(); }
  Index output_dim() const { return widths_.back(); }
  Index num_layers() const { return static_cast<Index>(widths_.size()) - 1; }
  Index num_parameters() const { return params_.size(); }
  const std::vector<Index>& widths() const { return widths_; }
  const ActivationSpec& hidden_activation() const { return hidden_; }
  const std::vector<Activation>& output_heads() const { return heads_; }

  Eigen::VectorXd& parameters() { return params_; }
  const Eigen::VectorXd& parameters() const { return params_; }

  Eigen::Map<Eigen::MatrixXd> weight(Index layer);
  Eigen::Map<const Eigen::MatrixXd> weight(Index layer) const;
  Eigen::Map<Eigen::VectorXd> bias(Index layer);
  Eigen::Map<const Eigen::VectorXd> bias(Index layer) const;

  Eigen::VectorXd forward(const Eigen::VectorXd& input) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs, ForwardTape& tape) const;

  /// Reverse-mode pass for a recorded batch. `upstream` is d loss / d output
  /// (output_dim x batch). Parameter gradients are summed over the batch.
  Gradients backward(const ForwardTape& tape, const Eigen::MatrixXd& upstream) const;

  nlohmann::json to_json() const;
  static DenseNetwork from_json(const nlohmann::json& doc);

 private:
  Eigen::MatrixXd run(const Eigen::MatrixXd& inputs, ForwardTape* tape) const;
  void check_finite() const;

  std::vector<Index> widths_;
  ActivationSpec hidden_;
  std::vector<Activation> heads_;
  std::vector<Index> weight_offset_;
  std::vector<Index> bias_offset_;
  Eigen::VectorXd params_;
};

}  // namespace atlasnam::nn
