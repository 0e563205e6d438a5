#include "atlasnam/data.hpp"

#include "atlasnam/error.hpp"
#include "atlasnam/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace atlasnam {

bool Record::complete() const {
  return std::all_of(covariates.begin(), covariates.end(),
                     [](const auto& c) { return c.has_value(); });
}

std::vector<double> Record::complete_covariates() const {
  std::vector<double> out;
  out.reserve(covariates.size());
  for (std::size_t i = 0; i < covariates.size(); ++i) {
    if (!covariates[i]) {
      throw DataError("record of subject '" + subject_id + "' is missing covariate " +
                      std::to_string(i) + "; impute it first");
    }
    out.push_back(*covariates[i]);
  }
  return out;
}

Index Dataset::covariate_index(std::string_view name) const {
  const auto it = std::find(covariate_names.begin(), covariate_names.end(), name);
  if (it == covariate_names.end()) {
    throw ConfigError("unknown covariate '" + std::string(name) + "'");
  }
  return static_cast<Index>(it - covariate_names.begin());
}

std::vector<std::string> Dataset::subjects() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    if (seen.insert(r.subject_id).second) out.push_back(r.subject_id);
  }
  return out;
}

Dataset Dataset::select_subjects(const std::vector<std::string>& subject_ids) const {
  const std::unordered_set<std::string> keep(subject_ids.begin(), subject_ids.end());
  Dataset out = empty_like();
  for (const auto& r : records) {
    if (keep.count(r.subject_id)) out.records.push_back(r);
  }
  return out;
}

Dataset Dataset::empty_like() const {
  Dataset out;
  out.covariate_names = covariate_names;
  out.spatial = spatial;
  out.landmarks = landmarks;
  return out;
}

void Dataset::validate() const {
  const auto n = covariate_names.size();
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    if (r.covariates.size() != n) {
      throw DataError("record " + std::to_string(k) + " has " + std::to_string(r.covariates.size()) +
                      " covariates, expected " + std::to_string(n));
    }
    if (r.subject_id.empty()) throw DataError("record " + std::to_string(k) + " has an empty subject id");
    if (!std::isfinite(r.response)) throw DataError("record " + std::to_string(k) + " has a non-finite response");
    if (spatial) {
      if (!r.x || !(*r.x >= 0.0 && *r.x <= 1.0)) {
        throw DataError("record " + std::to_string(k) + ": spatial location x must lie in [0, 1]");
      }
    } else if (r.x) {
      throw DataError("record " + std::to_string(k) + " has x in a non-spatial dataset");
    }
    for (const auto& c : r.covariates) {
      if (c && !std::isfinite(*c)) throw DataError("record " + std::to_string(k) + " has a non-finite covariate");
    }
  }
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string_view rest(line);
  while (true) {
    const auto comma = rest.find(',');
    cells.push_back(trim(rest.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return cells;
}

template <class T>
std::optional<T> parse_number(const std::string& cell) {
  T value{};
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  if (!cell.empty() && *begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return value;
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw NumericalError("format_double: conversion failed");
  return std::string(buf, ptr);
}

Dataset parse_csv(std::istream& in, const CsvSchema& schema, std::string_view source) {
  const std::string src(source);
  std::string line;
  if (!std::getline(in, line)) throw DataError(src + ": empty file (no header row)");
  const auto header = split_line(line);

  std::map<std::string, std::size_t> column;
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (header[k].empty()) throw DataError(src + ": empty column name at position " + std::to_string(k + 1));
    if (!column.emplace(header[k], k).second) {
      throw DataError(src + ": duplicate column \"" + header[k] + "\"");
    }
  }
  for (const char* required : {"subject_id", "time", "response"}) {
    if (!column.count(required)) {
      throw DataError(src + ": missing mandatory column \"" + std::string(required) + "\"");
    }
  }

  Dataset ds;
  ds.spatial = column.count("x") > 0;
  std::vector<std::size_t> cov_columns;
  if (schema.covariates.empty()) {
    const std::set<std::string> reserved{"subject_id", "time", "response", "x"};
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (!reserved.count(header[k])) {
        ds.covariate_names.push_back(header[k]);
        cov_columns.push_back(k);
      }
    }
  } else {
    for (const auto& name : schema.covariates) {
      const auto it = column.find(name);
      if (it == column.end()) throw DataError(src + ": missing covariate column \"" + name + "\"");
      ds.covariate_names.push_back(name);
      cov_columns.push_back(it->second);
    }
  }

  const std::size_t c_subject = column.at("subject_id");
  const std::size_t c_time = column.at("time");
  const std::size_t c_response = column.at("response");
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    const auto where = [&](const std::string& col) {
      return src + ": row " + std::to_string(row) + ", column \"" + col + "\"";
    };
    if (cells.size() != header.size()) {
      throw DataError(src + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " cells, header has " + std::to_string(header.size()));
    }
    Record r;
    r.subject_id = cells[c_subject];
    if (r.subject_id.empty()) throw DataError(where("subject_id") + ": empty subject id");
    const auto time = parse_number<int>(cells[c_time]);
    if (!time) throw DataError(where("time") + ": expected an integer, got '" + cells[c_time] + "'");
    r.time = *time;
    const auto response = parse_number<double>(cells[c_response]);
    if (!response || !std::isfinite(*response)) {
      throw DataError(where("response") + ": expected a number, got '" + cells[c_response] + "'");
    }
    r.response = *response;
    if (ds.spatial) {
      const auto& cell = cells[column.at("x")];
      const auto x = parse_number<double>(cell);
      if (!x) throw DataError(where("x") + ": expected a number, got '" + cell + "'");
      if (!(*x >= 0.0 && *x <= 1.0)) throw DataError(where("x") + ": location must lie in [0, 1]");
      r.x = *x;
    }
    for (std::size_t i = 0; i < cov_columns.size(); ++i) {
      const auto& cell = cells[cov_columns[i]];
      if (cell.empty()) {
        r.covariates.emplace_back(std::nullopt);
        continue;
      }
      const auto v = parse_number<double>(cell);
      if (!v || !std::isfinite(*v)) {
        throw DataError(where(ds.covariate_names[i]) + ": expected a number, got '" + cell + "'");
      }
      r.covariates.emplace_back(*v);
    }
    ds.records.push_back(std::move(r));
  }
  return ds;
}

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path.string() + "'");
  return parse_csv(in, schema, path.string());
}

void write_csv(const Dataset& ds, std::ostream& out) {
  out << "subject_id,time";
  if (ds.spatial) out << ",x";
  out << ",response";
  for (const auto& name : ds.covariate_names) out << ',' << name;
  out << '\n';
  for (const auto& r : ds.records) {
    out << r.subject_id << ',' << r.time;
    if (ds.spatial) out << ',' << format_double(r.x.value_or(0.0));
    out << ',' << format_double(r.response);
    for (const auto& c : r.covariates) {
      out << ',';
      if (c) out << format_double(*c);
    }
    out << '\n';
  }
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_csv(ds, out);
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Splitting

void SplitSpec::validate() const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
}

namespace {

std::vector<std::string> shuffled_subjects(std::vector<std::string> ids, std::uint64_t seed,
                                           std::string_view tag) {
  // Sort first so the split depends only on the subject set, not on row order.
  std::sort(ids.begin(), ids.end());
  Rng rng = make_rng(seed, tag);
  std::shuffle(ids.begin(), ids.end(), rng);
  return ids;
}

}  // namespace

std::pair<Dataset, Dataset> carve_validation(const Dataset& ds, double fraction,
                                             std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
  auto ids = shuffled_subjects(ds.subjects(), seed, "split/validation");
  auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  if (ids.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, ids.size() - 1);
  else n_val = 0;
  std::vector<std::string> val(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::string> train(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  return {ds.select_subjects(train), ds.select_subjects(val)};
}

DatasetSplit split_by_subject(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  const auto all = ds.subjects();
  if (all.size() < 3) {
    throw ConfigError("split_by_subject: need at least 3 subjects, got " + std::to_string(all.size()));
  }
  std::unordered_map<std::string, std::set<int>> times;
  for (const auto& r : ds.records) times[r.subject_id].insert(r.time);

  std::vector<std::string> test;
  std::vector<std::string> pool;
  for (const auto& id : all) {
    if (spec.longitudinal_to_test && times[id].size() > 1) test.push_back(id);
    else pool.push_back(id);
  }
  std::sort(test.begin(), test.end());
  pool = shuffled_subjects(std::move(pool), spec.seed, "split/test");
  const auto target_test = static_cast<std::size_t>(
      std::llround((1.0 - spec.train_fraction) * static_cast<double>(all.size())));
  std::size_t extra = target_test > test.size() ? target_test - test.size() : 0;
  extra = std::min(extra, pool.empty() ? 0 : pool.size() - 1);
  test.insert(test.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(extra));
  std::vector<std::string> remaining(pool.begin() + static_cast<std::ptrdiff_t>(extra), pool.end());

  const auto train_val = ds.select_subjects(remaining);
  auto [train, validation] = carve_validation(train_val, spec.validation_fraction, spec.seed);
  return {std::move(train), std::move(validation), ds.select_subjects(test)};
}

// ---------------------------------------------------------------------------
// Generators

namespace {

std::string subject_name(Index k) {
  std::ostringstream os;
  os << 's';
  os.width(6);
  os.fill('0');
  os << k;
  return os.str();
}

void require_min(Index n, Index minimum, const char* what) {
  if (n < minimum) {
    throw ConfigError(std::string(what) + ": need at least " + std::to_string(minimum) +
                      ", got " + std::to_string(n));
  }
}

}  // namespace

Dataset gen_toy_dependent(Index n, std::uint64_t seed) {
  require_min(n, 100, "gen_toy_dependent");
  Rng rng = make_rng(seed, "gen/toy");
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.covariate_names = {"c1", "c2"};
  for (Index k = 0; k < n; ++k) {
    const double c1 = unif(rng);
    const double c2 = std::exp(c1) + 0.1 * normal(rng);
    const double y = std::sin(c1) + c2 + 0.2 * normal(rng);
    ds.records.push_back({subject_name(k), 0, {c1, c2}, std::nullopt, y});
  }
  return ds;
}

double SpatialGroundTruth::mean_component(Index i, double c, double x) {
  constexpr double kPi = 3.14159265358979323846;
  switch (i) {
    case 0: return 1.0 + 0.5 * std::sin(kPi * x) + 0.08 * c * (1.0 + 0.5 * std::cos(kPi * x));
    case 1: return 0.03 * c * (0.6 + 0.4 * x);
    case 2: return 0.012 * (c - 60.0) * (1.0 + 0.3 * std::sin(2.0 * kPi * x));
    default: throw ConfigError("SpatialGroundTruth: covariate index out of range");
  }
}

double SpatialGroundTruth::sigma(double c1, double x) { return 0.08 + 0.02 * c1 * (1.0 + 0.5 * x); }

double SpatialGroundTruth::mean(const std::vector<double>& c, double x) {
  double m = 0.0;
  for (Index i = 0; i < kCovariates; ++i) m += mean_component(i, c[static_cast<std::size_t>(i)], x);
  return m;
}

Dataset gen_spatial_population(Index n_subjects, std::uint64_t seed) {
  require_min(n_subjects, 50, "gen_spatial_population");
  Rng rng = make_rng(seed, "gen/spatial");
  std::uniform_real_distribution<double> age(0.0, 10.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset ds;
  ds.covariate_names = {"age", "weight", "height"};
  ds.spatial = true;
  ds.landmarks = {{"nasal_spine", 0.0},  {"choana", 0.12},    {"epiglottic_tip", 0.42},
                  {"tvc", 0.63},         {"subglottis", 0.71}, {"carina", 1.0}};
  for (Index s = 0; s < n_subjects; ++s) {
    const std::string id = subject_name(s);
    const double c1 = age(rng);
    const double weight_dev = normal(rng);
    const double height_dev = normal(rng);
    const double subject_effect = normal(rng);
    const int visits = unit(rng) < 0.1 ? 2 : 1;
    for (int t = 0; t < visits; ++t) {
      const double a = c1 + static_cast<double>(t);
      const std::vector<double> c{a, 5.0 + 2.0 * a + 1.5 * weight_dev,
                                  60.0 + 8.0 * a - 0.2 * a * a + 4.0 * height_dev};
      for (int j = 0; j < SpatialGroundTruth::kDepths; ++j) {
        const double x = static_cast<double>(j) / (SpatialGroundTruth::kDepths - 1);
        const double eps = 0.8 * subject_effect + 0.6 * normal(rng);
        const double y = SpatialGroundTruth::mean(c, x) + SpatialGroundTruth::sigma(a, x) * eps;
        ds.records.push_back({id, t, {c[0], c[1], c[2]}, x, y});
      }
    }
  }
  return ds;
}

Dataset gen_heteroscedastic(Index n, std::uint64_t seed) {
  require_min(n, 100, "gen_heteroscedastic");
  Rng rng = make_rng(seed, "gen/heteroscedastic");
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.covariate_names = {"c1", "c2"};
  for (Index k = 0; k < n; ++k) {
    const double c1 = unif(rng);
    const double c2 = unif(rng);
    const double y = c1 + (0.1 + std::abs(c1)) * normal(rng);
    ds.records.push_back({subject_name(k), 0, {c1, c2}, std::nullopt, y});
  }
  return ds;
}

Dataset gen_independent(Index n, std::uint64_t seed) {
  require_min(n, 100, "gen_independent");
  Rng rng = make_rng(seed, "gen/independent");
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.covariate_names = {"c1", "c2", "c3"};
  for (Index k = 0; k < n; ++k) {
    const double c1 = unif(rng);
    const double c2 = unif(rng);
    const double c3 = unif(rng);
    const double sd = std::sqrt(0.02 + 0.02 * c1 * c1 + 0.01 * (c2 + 2.0));
    const double y = std::sin(c1) + 0.5 * c2 + 0.25 * c3 * c3 + sd * normal(rng);
    ds.records.push_back({subject_name(k), 0, {c1, c2, c3}, std::nullopt, y});
  }
  return ds;
}

Dataset gen_imputation_benchmark(Index n, double noise_variance, std::uint64_t seed) {
  require_min(n, 100, "gen_imputation_benchmark");
  if (!(noise_variance >= 0.0)) throw ConfigError("gen_imputation_benchmark: noise variance must be >= 0");
  Rng rng = make_rng(seed, "gen/imputation");
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noise_sd = std::sqrt(noise_variance);
  Dataset ds;
  ds.covariate_names = {"c1", "c2", "c3"};
  for (Index k = 0; k < n; ++k) {
    const double c1 = unif(rng);
    const double c2 = std::exp(c1) + noise_sd * normal(rng);
    const double c3 = unif(rng);
    const double y = std::sin(c1) + c2 + c3 + 0.2 * normal(rng);
    ds.records.push_back({subject_name(k), 0, {c1, c2, c3}, std::nullopt, y});
  }
  return ds;
}

}  // namespace atlasnam
