#include "atlasnam/nn/train.hpp"

#include "atlasnam/error.hpp"
#include "atlasnam/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace atlasnam::nn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (min_learning_rate < 0.0 || min_learning_rate > learning_rate) {
    throw ConfigError("min_learning_rate must lie in [0, learning_rate]");
  }
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"min_learning_rate", min_learning_rate},
          {"max_epochs", max_epochs},       {"batch_size", batch_size},
          {"patience", patience},           {"validation_fraction", validation_fraction}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc, const TrainConfig& defaults) {
  TrainConfig cfg = defaults;
  for (const auto& [key, value] : doc.items()) {
    if (key == "learning_rate") cfg.learning_rate = value.get<double>();
    else if (key == "min_learning_rate") cfg.min_learning_rate = value.get<double>();
    else if (key == "max_epochs") cfg.max_epochs = value.get<int>();
    else if (key == "batch_size") cfg.batch_size = value.get<Index>();
    else if (key == "patience") cfg.patience = value.get<int>();
    else if (key == "validation_fraction") cfg.validation_fraction = value.get<double>();
    else throw ConfigError("unknown training key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

Adam::Adam(std::vector<ParameterBlock> blocks, double beta1, double beta2, double epsilon)
    : blocks_(std::move(blocks)), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  for (const auto& b : blocks_) {
    first_.push_back(Eigen::VectorXd::Zero(b.values->size()));
    second_.push_back(Eigen::VectorXd::Zero(b.values->size()));
  }
}

void Adam::step(double learning_rate) {
  ++steps_;
  const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    const Eigen::VectorXd& g = *blocks_[k].gradient;
    first_[k] = beta1_ * first_[k] + (1.0 - beta1_) * g;
    second_[k] = beta2_ * second_[k] + (1.0 - beta2_) * g.cwiseProduct(g);
    *blocks_[k].values -= (learning_rate / correction1) *
                          first_[k].cwiseQuotient(
                              ((second_[k] / correction2).cwiseSqrt().array() + epsilon_).matrix());
  }
}

double cosine_annealed_rate(double initial, double minimum, int epoch, int total_epochs) {
  const double t = static_cast<double>(epoch) / static_cast<double>(std::max(total_epochs, 1));
  return minimum + 0.5 * (initial - minimum) * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

std::vector<Eigen::VectorXd> snapshot(const std::vector<ParameterBlock>& blocks) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back(*b.values);
  return out;
}

void restore(const std::vector<ParameterBlock>& blocks, const std::vector<Eigen::VectorXd>& saved) {
  for (std::size_t k = 0; k < blocks.size(); ++k) *blocks[k].values = saved[k];
}

}  // namespace

TrainHistory train_loop(Objective& objective, std::span<const Index> train_rows,
                        std::span<const Index> validation_rows, const TrainConfig& config) {
  config.validate();
  if (train_rows.empty()) throw ConfigError("train_loop: empty training set");
  const std::span<const Index> monitor = validation_rows.empty() ? train_rows : validation_rows;

  auto blocks = objective.parameter_blocks();
  Adam adam(blocks);
  Rng rng = make_rng(config.seed, "train_loop/shuffle");
  std::vector<Index> order(train_rows.begin(), train_rows.end());

  TrainHistory history;
  const double initial_val = objective.mean_loss(monitor);
  if (!std::isfinite(initial_val)) throw NumericalError("train_loop: non-finite initial loss");
  history.epochs.push_back({0, config.learning_rate, objective.mean_loss(train_rows), initial_val});
  history.best_validation_loss = initial_val;
  auto best = snapshot(blocks);
  int since_improvement = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double lr = cosine_annealed_rate(config.learning_rate, config.min_learning_rate,
                                           epoch - 1, config.max_epochs);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    Index seen = 0;
    Index batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size), ++batch_index) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const Index> batch(order.data() + start, stop - start);
      auto where = [&] {
        return " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index);
      };
      double loss = 0.0;
      try {
        loss = objective.loss_and_gradient(batch);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + where());
      }
      if (!std::isfinite(loss)) throw NumericalError("train_loop: non-finite loss" + where());
      adam.step(lr);
      objective.after_step();
      loss_sum += loss * static_cast<double>(batch.size());
      seen += static_cast<Index>(batch.size());
    }
    const double val = objective.mean_loss(monitor);
    if (!std::isfinite(val)) {
      throw NumericalError("train_loop: non-finite validation loss at epoch " +
                           std::to_string(epoch));
    }
    history.epochs.push_back({epoch, lr, loss_sum / static_cast<double>(seen), val});
    if (val < history.best_validation_loss) {
      history.best_validation_loss = val;
      history.best_epoch = epoch;
      best = snapshot(blocks);
      since_improvement = 0;
    } else if (++since_improvement >= config.patience) {
      history.stopped_early = true;
      break;
    }
  }
  restore(blocks, best);
  return history;
}

}  // namespace atlasnam::nn
