#include "atlasnam/inference.hpp"

#include "atlasnam/error.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>

namespace atlasnam {

Imputation impute(const CovariateDependence& dep, const std::vector<std::optional<double>>& partial) {
  const Index n = dep.num_covariates();
  if (static_cast<Index>(partial.size()) != n) {
    throw ConfigError("impute: expected " + std::to_string(n) + " covariates, got " +
                      std::to_string(partial.size()));
  }
  std::vector<Index> observed;
  for (Index k = 0; k < n; ++k) {
    if (partial[static_cast<std::size_t>(k)]) observed.push_back(k);
  }
  if (observed.empty()) throw DataError("impute: all covariates are missing; nothing to impute from");

  Imputation out;
  out.covariates.resize(static_cast<std::size_t>(n));
  std::vector<std::optional<ConditionalGaussian>> cache(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    if (const auto& v = partial[static_cast<std::size_t>(i)]) {
      out.covariates[static_cast<std::size_t>(i)] = *v;
      continue;
    }
    ImputedEntry best{i, -1, 0.0, std::numeric_limits<double>::infinity()};
    for (Index k : observed) {
      auto& cond = cache[static_cast<std::size_t>(k)];
      if (!cond) cond = dep.conditional(k, *partial[static_cast<std::size_t>(k)]);
      const Index p = cond->position(i);
      const double variance = cond->covariance(p, p);
      if (variance < best.variance) best = {i, k, cond->mean(p), variance};
    }
    out.covariates[static_cast<std::size_t>(i)] = best.value;
    out.imputed.push_back(best);
  }
  return out;
}

Dataset impute_dataset(const CovariateDependence& dep, const Dataset& ds, Index* imputed_records) {
  if (dep.covariate_names() != ds.covariate_names) {
    throw ConfigError("impute: dependence model covariates do not match the dataset");
  }
  Dataset out = ds;
  Index count = 0;
  for (auto& r : out.records) {
    if (r.complete()) continue;
    const Imputation imp = impute(dep, r.covariates);
    for (std::size_t k = 0; k < imp.covariates.size(); ++k) r.covariates[k] = imp.covariates[k];
    ++count;
  }
  if (imputed_records) *imputed_records = count;
  return out;
}

IndividualPrediction individualized_predict(const PredictiveModel& model,
                                            const SubjectObservation& obs,
                                            const std::vector<double>& next_covariates) {
  if (!std::isfinite(obs.response)) throw DomainError("individualized_predict: y^t is not finite");
  IndividualPrediction out;
  out.current = model.predict(std::span<const double>(obs.covariates), obs.x);
  out.next = model.predict(std::span<const double>(next_covariates), obs.x);
  if (!(out.current.variance > 0.0) || !(out.next.variance > 0.0)) {
    throw DomainError("individualized_predict: predicted variance must be positive");
  }
  if (out.current.mean == out.next.mean && out.current.variance == out.next.variance) {
    out.response = obs.response;
  } else {
    out.response = out.next.mean + std::sqrt(out.next.variance / out.current.variance) *
                                       (obs.response - out.current.mean);
  }
  out.percentile = gaussian_cdf(obs.response, out.current);

  const auto& schema = model.schema();
  for (Index i = 0; i < schema.num_covariates(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double change = std::abs(next_covariates[k] - obs.covariates[k]);
    if (change > schema.covariate_scaling[k].iqr()) {
      out.large_change = true;
      spdlog::warn("{} changes by {} between visits, more than its training interquartile range {}; "
                   "the stationary-percentile assumption may not hold",
                   schema.covariate_names[k], change, schema.covariate_scaling[k].iqr());
    }
  }
  return out;
}

ImputedAtlasFit fit_atlas_with_imputation(const Dataset& train, const Dataset& validation,
                                          const AtlasConfig& atlas_config,
                                          std::vector<MonotonePrior> priors,
                                          const DependenceConfig& dependence_config) {
  ImputedAtlasFit out{fit_dependence(train, dependence_config), {}, 0};
  Index imputed_val = 0;
  const Dataset train_full = impute_dataset(out.dependence.model, train, &out.imputed_records);
  const Dataset val_full = impute_dataset(out.dependence.model, validation, &imputed_val);
  out.imputed_records += imputed_val;
  out.atlas = fit_atlas(train_full, val_full, atlas_config, std::move(priors));
  return out;
}

}  // namespace atlasnam
