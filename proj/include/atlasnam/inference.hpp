#pragma once

#include "atlasnam/atlas.hpp"
#include "atlasnam/dependence.hpp"
#include "atlasnam/gaussian.hpp"

#include <optional>
#include <vector>

namespace atlasnam {

struct ImputedEntry {
  Index covariate = 0;
  Index source = 0;       // observed covariate the value was predicted from
  double value = 0.0;
  double variance = 0.0;  // conditional variance of the chosen source, covariate units^2
};

struct Imputation {
  std::vector<double> covariates;
  std::vector<ImputedEntry> imputed;  // ascending covariate index
};

/// Fills each missing c_i with the conditional mean given the observed
/// covariate whose conditional variance for c_i is smallest. Ties go to the
/// lowest index. Throws DataError when nothing is observed.
Imputation impute(const CovariateDependence& dep, const std::vector<std::optional<double>>& partial);

/// Imputes every incomplete record; complete records pass through untouched.
Dataset impute_dataset(const CovariateDependence& dep, const Dataset& ds,
                       Index* imputed_records = nullptr);

struct SubjectObservation {
  std::vector<double> covariates;  // c^t
  std::optional<double> x;
  double response = 0.0;  // y^t
  int time = 0;
};

struct IndividualPrediction {
  double response = 0.0;    // predicted y^{t+1}
  double percentile = 0.0;  // shared by y^t and the prediction
  GaussianParams current;
  GaussianParams next;
  bool large_change = false;  // some covariate moved by more than its training IQR
};

/// Keeps the subject's population percentile fixed between c^t and c^{t+1}:
/// y^{t+1} = m1 + sqrt(v1 / v0) (y^t - m0).
IndividualPrediction individualized_predict(const PredictiveModel& model,
                                            const SubjectObservation& obs,
                                            const std::vector<double>& next_covariates);

struct ImputedAtlasFit {
  DependenceFit dependence;
  AtlasFit atlas;
  Index imputed_records = 0;
};

/// Training with incomplete records: the dependence model is fit on complete
/// rows first, incomplete rows are imputed with it, then the atlas is trained
/// on everything.
ImputedAtlasFit fit_atlas_with_imputation(const Dataset& train, const Dataset& validation,
                                          const AtlasConfig& atlas_config,
                                          std::vector<MonotonePrior> priors,
                                          const DependenceConfig& dependence_config);

}  // namespace atlasnam
