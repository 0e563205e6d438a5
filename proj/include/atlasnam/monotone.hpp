#pragma once

#include "atlasnam/nn/dense_network.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace atlasnam {

using Eigen::Index;

/// Scales every weight column by 1 / max(1, lambda^(-1/D) * sum_rows |w|), D the
/// depth. Afterwards each layer's L1 operator norm is at most lambda^(1/D), so
/// the network (with 1-Lipschitz activations) is Lipschitz with constant
/// <= lambda from the L1 input norm to every output coordinate.
void normalize_lipschitz(nn::DenseNetwork& net, double lipschitz);
nn::DenseNetwork normalized_lipschitz(nn::DenseNetwork net, double lipschitz);

/// Product over layers of the largest column L1 norm.
double lipschitz_bound(const nn::DenseNetwork& net);

/// One residual term: output `output` gains sign * lambda * input[`input`].
struct MonotoneTerm {
  Index output = 0;
  Index input = 0;
  int sign = 1;  // +1 non-decreasing, -1 non-increasing

  friend bool operator==(const MonotoneTerm&, const MonotoneTerm&) = default;
};

/// f(x) = g(x) + lambda * sum_{(k, j, s)} s * x_j on output k, with g a
/// Lipschitz-normalized GroupSort network. Because |dg_k/dx_j| <= lambda, each
/// residual term makes output k monotone in x_j by construction.
class MonotoneNetwork {
 public:
  MonotoneNetwork() = default;

  /// Scalar-output network increasing in each feature listed in `monotone_features`.
  MonotoneNetwork(nn::DenseNetwork base, double lipschitz, std::vector<Index> monotone_features);

  MonotoneNetwork(nn::DenseNetwork base, double lipschitz, std::vector<MonotoneTerm> terms);

  void normalize_weights() { normalize_lipschitz(base_, lipschitz_); }

  double lipschitz() const { return lipschitz_; }
  const std::vector<MonotoneTerm>& terms() const { return terms_; }
  std::vector<Index> monotone_features() const;
  nn::DenseNetwork& base() { return base_; }
  const nn::DenseNetwork& base() const { return base_; }
  Index input_dim() const { return base_.input_dim(); }
  Index output_dim() const { return base_.output_dim(); }

  /// Scalar output (output 0).
  double forward(const Eigen::VectorXd& input) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs, nn::ForwardTape& tape) const;
  nn::Gradients backward(const nn::ForwardTape& tape, const Eigen::MatrixXd& upstream) const;

  nlohmann::json to_json() const;
  static MonotoneNetwork from_json(const nlohmann::json& doc);

 private:
  void add_residual(const Eigen::MatrixXd& inputs, Eigen::MatrixXd& out) const;
  void check() const;

  nn::DenseNetwork base_;
  double lipschitz_ = 1.0;
  std::vector<MonotoneTerm> terms_;
};

}  // namespace atlasnam
