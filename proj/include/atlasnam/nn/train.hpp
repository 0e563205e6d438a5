#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace atlasnam::nn {

using Eigen::Index;

/// A parameter vector together with the buffer its gradient is written into.
struct ParameterBlock {
  Eigen::VectorXd* values = nullptr;
  Eigen::VectorXd* gradient = nullptr;
};

/// Anything trainable with mini-batch gradient descent. Rows index into the
/// objective's own training table.
class Objective {
 public:
  virtual ~Objective() = default;

  virtual std::vector<ParameterBlock> parameter_blocks() = 0;

  /// Overwrites every block's gradient with d(mean loss over rows)/d params and
  /// returns the mean loss.
  virtual double loss_and_gradient(std::span<const Index> rows) = 0;

  virtual double mean_loss(std::span<const Index> rows) const = 0;

  /// Called after each optimizer step (projection onto constraint sets).
  virtual void after_step() {}
};

struct TrainConfig {
  double learning_rate = 1e-2;
  double min_learning_rate = 0.0;
  int max_epochs = 500;
  Index batch_size = 32;
  int patience = 20;
  double validation_fraction = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& doc, const TrainConfig& defaults);
};

struct EpochRecord {
  int epoch = 0;  // 0 is the untrained initialization
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_validation_loss = 0.0;
  bool stopped_early = false;
};

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over a fixed set of blocks.
class Adam {
 public:
  explicit Adam(std::vector<ParameterBlock> blocks, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);
  void step(double learning_rate);

 private:
  std::vector<ParameterBlock> blocks_;
  std::vector<Eigen::VectorXd> first_;
  std::vector<Eigen::VectorXd> second_;
  double beta1_, beta2_, epsilon_;
  long steps_ = 0;
};

/// Cosine annealing from `initial` to `minimum` over `total_epochs`.
double cosine_annealed_rate(double initial, double minimum, int epoch, int total_epochs);

/// Mini-batch Adam with per-epoch cosine annealing and early stopping on the
/// validation loss. The returned parameters (left in the objective) are the
/// best ones seen, including the initialization. An empty validation set
/// falls back to the training rows.
TrainHistory train_loop(Objective& objective, std::span<const Index> train_rows,
                        std::span<const Index> validation_rows, const TrainConfig& config);

}  // namespace atlasnam::nn
