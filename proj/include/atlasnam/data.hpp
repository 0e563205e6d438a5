#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace atlasnam {

using Eigen::Index;

/// One observation. Covariate entries may be missing (std::nullopt).
struct Record {
  std::string subject_id;
  int time = 0;
  std::vector<std::optional<double>> covariates;
  std::optional<double> x;
  double response = 0.0;

  bool complete() const;
  /// Covariates as plain values; throws DataError if any entry is missing.
  std::vector<double> complete_covariates() const;
};

struct Landmark {
  std::string name;
  double x = 0.0;
};

struct Dataset {
  std::vector<std::string> covariate_names;
  bool spatial = false;
  std::vector<Landmark> landmarks;
  std::vector<Record> records;

  Index num_covariates() const { return static_cast<Index>(covariate_names.size()); }
  Index size() const { return static_cast<Index>(records.size()); }
  bool empty() const { return records.empty(); }

  /// Index of the named covariate; throws ConfigError naming it if absent.
  Index covariate_index(std::string_view name) const;
  /// Distinct subject ids in first-appearance order.
  std::vector<std::string> subjects() const;
  /// Records of the listed subjects, in original order.
  Dataset select_subjects(const std::vector<std::string>& subject_ids) const;
  /// Copy with the same schema and no records.
  Dataset empty_like() const;
  /// Checks vector lengths, ids, and the x-range contract.
  void validate() const;
};

/// Column contract: subject_id, time, response are mandatory; x is optional
/// and makes the dataset spatial; every other column is a covariate unless
/// `covariates` names an explicit subset. Empty cells mean missing.
struct CsvSchema {
  std::vector<std::string> covariates;
};

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
Dataset parse_csv(std::istream& in, const CsvSchema& schema = {},
                  std::string_view source = "<stream>");
void write_csv(const Dataset& ds, const std::filesystem::path& path);
void write_csv(const Dataset& ds, std::ostream& out);

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

struct SplitSpec {
  double train_fraction = 0.8;
  double validation_fraction = 0.15;  // of the training subjects
  std::uint64_t seed = 0;
  bool longitudinal_to_test = true;

  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Partitions subjects (never records). With the longitudinal rule on, every
/// subject observed at more than one time goes to the test set.
DatasetSplit split_by_subject(const Dataset& ds, const SplitSpec& spec);

/// Moves `fraction` of the subjects (at least one when there are two or more)
/// into a validation set.
std::pair<Dataset, Dataset> carve_validation(const Dataset& ds, double fraction,
                                             std::uint64_t seed);

/// c1 ~ U[-2, 2]; c2 = exp(c1) + N(0, 0.01); y = sin(c1) + c2 + N(0, 0.04).
Dataset gen_toy_dependent(Index n, std::uint64_t seed);

/// Closed-form pieces of gen_spatial_population.
struct SpatialGroundTruth {
  static constexpr int kCovariates = 3;
  static constexpr int kDepths = 50;
  /// Additive mean contribution of covariate i (0-based) at depth x.
  static double mean_component(Index i, double c, double x);
  static double sigma(double c1, double x);
  static double mean(const std::vector<double>& c, double x);
};

/// Three dependent covariates (age-, weight-, height-like; the second and
/// third are increasing noisy functions of the first), 50 depths per subject,
/// y = sum_i m_i(c_i, x) + sigma(c1, x) * eps. Ten percent of subjects get a
/// second visit one time unit later.
Dataset gen_spatial_population(Index n_subjects, std::uint64_t seed);

/// y = c1 + (0.1 + |c1|) * eps with c1 ~ U[-2, 2] and an unrelated c2 ~ U[-2, 2].
Dataset gen_heteroscedastic(Index n, std::uint64_t seed);

/// Three independent U[-2, 2] covariates,
/// y = sin(c1) + 0.5 c2 + 0.25 c3^2 + sqrt(0.02 + 0.02 c1^2 + 0.01 (c2 + 2)) * eps.
Dataset gen_independent(Index n, std::uint64_t seed);

/// c1 ~ U[-2, 2]; c2 = exp(c1) + N(0, noise_variance); c3 ~ U[-2, 2] independent;
/// y = sin(c1) + c2 + c3 + N(0, 0.04).
Dataset gen_imputation_benchmark(Index n, double noise_variance, std::uint64_t seed);

}  // namespace atlasnam
