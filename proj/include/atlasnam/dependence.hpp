#pragma once

#include "atlasnam/atlas.hpp"
#include "atlasnam/data.hpp"
#include "atlasnam/gaussian.hpp"
#include "atlasnam/monotone.hpp"
#include "atlasnam/nn/train.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace atlasnam {

/// p(c_{-i} | c_i): mean and covariance of the other covariates, listed in
/// `others` (ascending), in original covariate units.
struct ConditionalGaussian {
  Index given = 0;
  double value = 0.0;
  std::vector<Index> others;
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;

  /// Position of covariate k inside `others`; throws ConfigError for k == given.
  Index position(Index k) const;
};

struct BivariateGaussian {
  Eigen::Vector2d mean;
  Eigen::Matrix2d covariance;
};

/// Square-root factor A with A A^T = covariance. Uses Cholesky and falls back to
/// a clamped eigendecomposition for semi-definite input.
Eigen::MatrixXd covariance_sqrt(const Eigen::MatrixXd& covariance);

/// Columns of mean + A * normals, one sample per column of `normals`.
Eigen::MatrixXd sample_conditional(const ConditionalGaussian& cond, const Eigen::MatrixXd& normals);

/// Source of conditional covariate distributions for marginalization and imputation.
class CovariateDependence {
 public:
  virtual ~CovariateDependence() = default;
  virtual const std::vector<std::string>& covariate_names() const = 0;
  virtual ConditionalGaussian conditional(Index i, double c_i) const = 0;
  virtual nlohmann::json to_json() const = 0;

  Index num_covariates() const { return static_cast<Index>(covariate_names().size()); }
  /// Throws ConfigError unless the covariate names match the atlas schema.
  void check_compatible(const ModelSchema& schema) const;
};

/// Entry k of the mean and diagonal (k, k) of the covariance.
GaussianParams conditional_1d(const CovariateDependence& dep, Index i, Index k, double c_i);
/// The (k1, k2) sub-block; indices must be pairwise distinct from each other and i.
BivariateGaussian conditional_2d(const CovariateDependence& dep, Index i, Index k1, Index k2,
                                 double c_i);

/// Declared monotone relation between a pair of covariates, e.g. weight
/// non-decreasing in age.
struct PairPrior {
  Index given = 0;
  Index target = 0;
  int sign = 1;

  friend bool operator==(const PairPrior&, const PairPrior&) = default;
};

struct DependenceConfig {
  nn::TrainConfig train{.learning_rate = 2e-2, .max_epochs = 300, .batch_size = 64, .patience = 100};
  Index hidden_width = 32;
  Index hidden_layers = 2;
  int group_size = 2;
  // In normalized covariate units, shared by all mean and Cholesky outputs;
  // exp-like dependence needs slopes near 4 on the mean alone.
  double lipschitz = 32.0;
  /// Epochs of squared-error fitting of the means (unit scale) before the full
  /// likelihood; stops the variance from absorbing an unfit mean.
  int mean_warmup_epochs = 50;
  std::vector<PairPrior> pair_priors;

  void validate() const;
};

/// Closed-form Gaussian dependence. In conditional mode p(c_{-i} | c_i) comes
/// from the Schur complement of a joint Gaussian; in unconditional mode the
/// other covariates keep their joint marginal whatever c_i is (dependence
/// ignored).
class GaussianDependence final : public CovariateDependence {
 public:
  enum class Mode { kConditional, kUnconditional };

  GaussianDependence(std::vector<std::string> names, Eigen::VectorXd mean,
                     Eigen::MatrixXd covariance, Mode mode);
  /// Sample mean and covariance of the complete records.
  static GaussianDependence from_dataset(const Dataset& ds, Mode mode);

  const std::vector<std::string>& covariate_names() const override { return names_; }
  ConditionalGaussian conditional(Index i, double c_i) const override;
  nlohmann::json to_json() const override;
  static GaussianDependence from_json(const nlohmann::json& doc);

  Mode mode() const { return mode_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& covariance() const { return cov_; }

 private:
  std::vector<std::string> names_;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd cov_;
  Mode mode_;
};

/// Learned networks g_i(c_i) -> (mu(c_i), Cholesky factor of Sigma(c_i)) over the
/// remaining covariates. Each g_i is a Lipschitz GroupSort network on the
/// min-max normalized c_i; outputs live in normalized units of the targets.
/// The Cholesky diagonal is softplus(z) + 0.01 so every conditional variance is
/// at least 1e-4 in normalized units.
class DependenceModel final : public CovariateDependence {
 public:
  static constexpr double kDiagonalOffset = 0.01;

  DependenceModel() = default;
  /// Freshly initialized networks; `scaling` normalizes each covariate.
  DependenceModel(std::vector<std::string> names, std::vector<CovariateScaling> scaling,
                  const DependenceConfig& config, std::uint64_t seed);

  const std::vector<std::string>& covariate_names() const override { return names_; }
  ConditionalGaussian conditional(Index i, double c_i) const override;
  nlohmann::json to_json() const override;
  static DependenceModel from_json(const nlohmann::json& doc);

  bool trained() const { return !networks_.empty() || names_.size() == 1; }

  /// Sample mean and covariance of the training covariates, used when
  /// dependence is switched off. Set by fit_dependence.
  void set_moments(Eigen::VectorXd mean, Eigen::MatrixXd covariance);
  bool has_moments() const { return moments_mean_.size() == num_covariates() && num_covariates() > 0; }
  /// The other covariates at their joint marginal regardless of c_i.
  GaussianDependence unconditional() const;
  const std::vector<CovariateScaling>& scaling() const { return scaling_; }
  std::vector<MonotoneNetwork>& networks() { return networks_; }
  const std::vector<MonotoneNetwork>& networks() const { return networks_; }

  /// Number of network outputs for N covariates: (N-1) means plus the lower triangle.
  static Index output_dim(Index num_covariates);

  /// Normalized-unit negative log-likelihood of `targets` ((N-1) x B, normalized)
  /// given network outputs (output_dim x B). Optionally returns d loss / d outputs.
  static double batch_nll(const Eigen::MatrixXd& outputs, const Eigen::MatrixXd& targets,
                          Eigen::MatrixXd* d_outputs);

 private:
  void project();

  friend class DependenceObjective;
  std::vector<std::string> names_;
  std::vector<CovariateScaling> scaling_;
  std::vector<MonotoneNetwork> networks_;  // one per conditioning covariate
  Eigen::VectorXd moments_mean_;
  Eigen::MatrixXd moments_cov_;
};

/// Sum over conditioning covariates of the conditional NLL (normalized units).
class DependenceObjective final : public nn::Objective {
 public:
  DependenceObjective(DependenceModel& model, Eigen::MatrixXd normalized);

  /// When set, the loss is 0.5 * |target - mean|^2 and the scale outputs get
  /// zero gradient.
  void set_mean_only(bool mean_only) { mean_only_ = mean_only; }

  std::vector<nn::ParameterBlock> parameter_blocks() override;
  double loss_and_gradient(std::span<const Index> rows) override;
  double mean_loss(std::span<const Index> rows) const override;
  void after_step() override { model_.project(); }

 private:
  DependenceModel& model_;
  Eigen::MatrixXd data_;  // N x n normalized covariates
  std::vector<Eigen::VectorXd> grads_;
  bool mean_only_ = false;
};

struct DependenceFit {
  DependenceModel model;
  nn::TrainHistory history;
};

/// Trains g_1..g_N on the complete records of `ds`, deduplicated by
/// (subject, time) so spatial datasets count each visit once. Refuses fewer
/// than N + 2 complete rows.
DependenceFit fit_dependence(const Dataset& ds, const DependenceConfig& config);

/// Dispatches on "model": "learned" or "gaussian".
std::unique_ptr<CovariateDependence> dependence_from_json(const nlohmann::json& doc);

}  // namespace atlasnam
