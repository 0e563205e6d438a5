#pragma once

#include "atlasnam/atlas.hpp"
#include "atlasnam/data.hpp"
#include "atlasnam/gaussian.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <vector>

namespace atlasnam {

/// Symmetric mean absolute relative percent difference:
/// mean of 100 |p - t| / ((|p| + |t|) / 2).
double marpd(std::span<const double> predictions, std::span<const double> truths);

/// Mean Gaussian negative log-likelihood.
double mean_nll(std::span<const GaussianParams> params, std::span<const double> truths);

/// Quantile-calibration error: for levels p_j = (j + 0.5) / levels, the mean
/// of |fraction{F(y) <= p_j} - p_j|. Requires at least `levels` samples.
double ece(std::span<const GaussianParams> params, std::span<const double> truths, int levels = 10);

/// Fraction of truths inside mean +/- z * sd.
double interval_coverage(std::span<const GaussianParams> params, std::span<const double> truths,
                         double z = 2.0);

struct GroupMetrics {
  std::string name;
  Index count = 0;
  double marpd = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  double coverage = 0.0;  // +/- 2 sd
};

struct EvalReport {
  GroupMetrics overall;
  std::vector<GroupMetrics> landmarks;  // spatial datasets with named landmarks only

  nlohmann::json to_json() const;
  /// Aligned columns, one row per group.
  std::string to_text() const;
};

/// Predicts every record (covariates must be complete) and scores the result.
/// Each landmark is matched to the nearest observed depth.
EvalReport evaluate(const PredictiveModel& model, const Dataset& ds);

GroupMetrics score_group(std::string name, std::span<const GaussianParams> params,
                         std::span<const double> truths);

}  // namespace atlasnam
