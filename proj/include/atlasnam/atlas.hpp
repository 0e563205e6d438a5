#pragma once

#include "atlasnam/data.hpp"
#include "atlasnam/gaussian.hpp"
#include "atlasnam/monotone.hpp"
#include "atlasnam/nn/dense_network.hpp"
#include "atlasnam/nn/train.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace atlasnam {

enum class MonotonePrior { kNone, kIncreasing, kDecreasing };

std::string to_string(MonotonePrior prior);
MonotonePrior prior_from_string(std::string_view tag);

/// Min-max map of one covariate onto [0, 1], plus quartiles for range checks.
struct CovariateScaling {
  double min = 0.0;
  double max = 1.0;
  double q25 = 0.0;
  double q75 = 1.0;

  double range() const { return max > min ? max - min : 1.0; }
  double normalize(double c) const { return (c - min) / range(); }
  double denormalize(double u) const { return min + u * range(); }
  double iqr() const { return q75 - q25; }

  static CovariateScaling fit(std::vector<double> values);
  nlohmann::json to_json() const;
  static CovariateScaling from_json(const nlohmann::json& doc);
};

struct ResponseScaling {
  double mean = 0.0;
  double sd = 1.0;
};

struct AtlasConfig {
  nn::TrainConfig train;
  Index hidden_width = 128;
  int group_size = 2;
  double lipschitz = 1.0;         // monotone mean heads
  double variance_floor = 1e-6;   // standardized response units, split across heads

  void validate() const;
};

/// Layout shared by the atlas and the joint baseline.
struct ModelSchema {
  std::vector<std::string> covariate_names;
  std::vector<MonotonePrior> priors;  // one per covariate
  bool spatial = false;
  std::vector<CovariateScaling> covariate_scaling;
  ResponseScaling response_scaling;

  Index num_covariates() const { return static_cast<Index>(covariate_names.size()); }
  /// Normalized network input for covariate i; decreasing priors flip the axis.
  double network_input(Index i, double c) const;
  void check_location(std::optional<double> x) const;
  /// Fits scaling statistics on complete records.
  static ModelSchema from_dataset(const Dataset& ds, std::vector<MonotonePrior> priors);
  nlohmann::json to_json() const;
  static ModelSchema from_json(const nlohmann::json& doc);
};

/// Anything that yields p(y | c, x) as a Gaussian in response units.
class PredictiveModel {
 public:
  virtual ~PredictiveModel() = default;
  virtual const ModelSchema& schema() const = 0;
  /// `covariates` is N x batch; `x` has one entry per column (ignored when not spatial).
  virtual void predict_batch(const Eigen::MatrixXd& covariates, const Eigen::VectorXd& x,
                             Eigen::VectorXd& mean, Eigen::VectorXd& variance) const = 0;
  virtual nlohmann::json to_json() const = 0;

  GaussianParams predict(std::span<const double> covariates, std::optional<double> x) const;
  /// Rejects missing entries with an error that points at imputation.
  GaussianParams predict(const std::vector<std::optional<double>>& covariates,
                         std::optional<double> x) const;
};

/// Covariate subnetwork f_i(c_i, x): a mean head (plain GeLU MLP, or monotone
/// Lipschitz network under a prior) and a variance head that reads
/// (f^m_i, c_i, x) and ends in softplus.
struct Subnetwork {
  std::variant<nn::DenseNetwork, MonotoneNetwork> mean_head;
  nn::DenseNetwork variance_head;

  bool monotone() const { return std::holds_alternative<MonotoneNetwork>(mean_head); }
  Eigen::VectorXd& mean_parameters();
  Eigen::MatrixXd mean_forward(const Eigen::MatrixXd& in) const;
  Eigen::MatrixXd mean_forward(const Eigen::MatrixXd& in, nn::ForwardTape& tape) const;
  nn::Gradients mean_backward(const nn::ForwardTape& tape, const Eigen::MatrixXd& upstream) const;
  void project();
};

/// Additive Gaussian atlas: mean = beta + sum_i f^m_i(c_i, x), variance =
/// sum_i f^v_i(c_i, x). Internally all networks work in standardized units;
/// every public quantity is in original response units.
class AtlasModel final : public PredictiveModel {
 public:
  struct Contribution {
    double mean = 0.0;
    double variance = 0.0;
  };

  AtlasModel() = default;
  /// Freshly initialized (untrained) model.
  AtlasModel(ModelSchema schema, const AtlasConfig& config, std::uint64_t seed);

  const ModelSchema& schema() const override { return schema_; }
  Index num_covariates() const { return schema_.num_covariates(); }
  bool spatial() const { return schema_.spatial; }

  double intercept() const;
  double& intercept_standardized() { return intercept_(0); }
  std::vector<Subnetwork>& subnetworks() { return subnets_; }
  const std::vector<Subnetwork>& subnetworks() const { return subnets_; }
  double variance_floor() const { return variance_floor_; }

  void predict_batch(const Eigen::MatrixXd& covariates, const Eigen::VectorXd& x,
                     Eigen::VectorXd& mean, Eigen::VectorXd& variance) const override;

  /// Covariate i's additive contribution. Summing over i and adding the
  /// intercept reproduces predict().
  Contribution disentangle(Index i, double c_i, std::optional<double> x) const;
  void contributions_batch(Index i, const Eigen::VectorXd& c_i, std::optional<double> x,
                           Eigen::VectorXd& mean, Eigen::VectorXd& variance) const;

  nlohmann::json to_json() const override;
  static AtlasModel from_json(const nlohmann::json& doc);

  /// Normalization after each optimizer step keeps monotone heads constrained.
  void project();

 private:
  friend class AtlasObjective;
  Eigen::MatrixXd head_input(Index i, const Eigen::VectorXd& c, std::optional<double> x) const;

  ModelSchema schema_;
  Eigen::VectorXd intercept_ = Eigen::VectorXd::Zero(1);
  std::vector<Subnetwork> subnets_;
  double variance_floor_ = 1e-6;
};

/// Single network on (c, x) emitting mean and variance jointly; no additive
/// structure.
class JointMlpModel final : public PredictiveModel {
 public:
  JointMlpModel() = default;
  JointMlpModel(ModelSchema schema, const AtlasConfig& config, std::uint64_t seed);

  const ModelSchema& schema() const override { return schema_; }
  nn::DenseNetwork& network() { return net_; }
  double variance_floor() const { return variance_floor_; }

  void predict_batch(const Eigen::MatrixXd& covariates, const Eigen::VectorXd& x,
                     Eigen::VectorXd& mean, Eigen::VectorXd& variance) const override;
  nlohmann::json to_json() const override;
  static JointMlpModel from_json(const nlohmann::json& doc);

 private:
  friend class JointMlpObjective;
  ModelSchema schema_;
  nn::DenseNetwork net_;
  double variance_floor_ = 1e-6;
};

/// Standardized training table shared by the NLL objectives.
struct TrainingTable {
  Eigen::MatrixXd inputs;  // N x n normalized covariates (prior flips applied)
  Eigen::VectorXd x;       // n (zeros when not spatial)
  Eigen::VectorXd y;       // n standardized responses

  static TrainingTable build(const ModelSchema& schema, const Dataset& ds);
};

/// Mean Gaussian NLL (standardized units) of an AtlasModel over table rows.
class AtlasObjective final : public nn::Objective {
 public:
  AtlasObjective(AtlasModel& model, TrainingTable table);

  std::vector<nn::ParameterBlock> parameter_blocks() override;
  double loss_and_gradient(std::span<const Index> rows) override;
  double mean_loss(std::span<const Index> rows) const override;
  void after_step() override { model_.project(); }

 private:
  AtlasModel& model_;
  TrainingTable table_;
  Eigen::VectorXd intercept_grad_ = Eigen::VectorXd::Zero(1);
  std::vector<Eigen::VectorXd> mean_grads_;
  std::vector<Eigen::VectorXd> variance_grads_;
};

class JointMlpObjective final : public nn::Objective {
 public:
  JointMlpObjective(JointMlpModel& model, TrainingTable table);

  std::vector<nn::ParameterBlock> parameter_blocks() override;
  double loss_and_gradient(std::span<const Index> rows) override;
  double mean_loss(std::span<const Index> rows) const override;

 private:
  Eigen::MatrixXd batch_inputs(std::span<const Index> rows) const;
  JointMlpModel& model_;
  TrainingTable table_;
  Eigen::VectorXd grad_;
};

struct AtlasFit {
  AtlasModel model;
  nn::TrainHistory history;
};

struct JointMlpFit {
  JointMlpModel model;
  nn::TrainHistory history;
};

/// Trains an additive atlas by minimizing the Gaussian NLL with early stopping
/// on `validation`. Records must have complete covariates.
AtlasFit fit_atlas(const Dataset& train, const Dataset& validation, const AtlasConfig& config,
                   std::vector<MonotonePrior> priors);
/// Carves the validation subjects out of `dataset` first.
AtlasFit fit_atlas(const Dataset& dataset, const AtlasConfig& config,
                   std::vector<MonotonePrior> priors);

JointMlpFit fit_joint_mlp(const Dataset& train, const Dataset& validation,
                          const AtlasConfig& config);

/// Dispatches on the "kind" tag ("additive" or "joint_mlp").
std::unique_ptr<PredictiveModel> predictive_model_from_json(const nlohmann::json& doc);

}  // namespace atlasnam
