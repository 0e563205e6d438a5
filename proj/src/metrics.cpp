#include "atlasnam/metrics.hpp"

#include "atlasnam/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace atlasnam {

namespace {

template <class A, class B>
void check_lengths(const A& a, const B& b, const char* what) {
  if (a.size() != b.size()) throw ConfigError(std::string(what) + ": length mismatch");
  if (a.empty()) throw ConfigError(std::string(what) + ": empty input");
}

}  // namespace

double marpd(std::span<const double> predictions, std::span<const double> truths) {
  check_lengths(predictions, truths, "marpd");
  double total = 0.0;
  for (std::size_t k = 0; k < truths.size(); ++k) {
    const double denom = 0.5 * (std::abs(predictions[k]) + std::abs(truths[k]));
    if (denom == 0.0) {
      throw DomainError("marpd: prediction and truth are both zero at index " + std::to_string(k));
    }
    total += 100.0 * std::abs(predictions[k] - truths[k]) / denom;
  }
  return total / static_cast<double>(truths.size());
}

double mean_nll(std::span<const GaussianParams> params, std::span<const double> truths) {
  check_lengths(params, truths, "mean_nll");
  double total = 0.0;
  for (std::size_t k = 0; k < truths.size(); ++k) total += nll_loss(params[k], truths[k]);
  return total / static_cast<double>(truths.size());
}

double ece(std::span<const GaussianParams> params, std::span<const double> truths, int levels) {
  check_lengths(params, truths, "ece");
  if (levels < 1) throw ConfigError("ece: need at least one level");
  if (truths.size() < static_cast<std::size_t>(levels)) {
    throw ConfigError("ece: need at least " + std::to_string(levels) + " samples, got " +
                      std::to_string(truths.size()));
  }
  std::vector<double> cdf(truths.size());
  for (std::size_t k = 0; k < truths.size(); ++k) cdf[k] = gaussian_cdf(truths[k], params[k]);
  std::sort(cdf.begin(), cdf.end());
  double total = 0.0;
  for (int j = 0; j < levels; ++j) {
    const double p = (j + 0.5) / levels;
    const auto below = std::upper_bound(cdf.begin(), cdf.end(), p) - cdf.begin();
    total += std::abs(static_cast<double>(below) / static_cast<double>(cdf.size()) - p);
  }
  return total / levels;
}

double interval_coverage(std::span<const GaussianParams> params, std::span<const double> truths,
                         double z) {
  check_lengths(params, truths, "interval_coverage");
  std::size_t inside = 0;
  for (std::size_t k = 0; k < truths.size(); ++k) {
    if (std::abs(truths[k] - params[k].mean) <= z * params[k].stddev()) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(truths.size());
}

GroupMetrics score_group(std::string name, std::span<const GaussianParams> params,
                         std::span<const double> truths) {
  GroupMetrics g;
  g.name = std::move(name);
  g.count = static_cast<Index>(truths.size());
  std::vector<double> means;
  for (const auto& p : params) means.push_back(p.mean);
  g.marpd = marpd(means, truths);
  g.nll = mean_nll(params, truths);
  g.ece = truths.size() >= 10 ? ece(params, truths) : std::nan("");
  g.coverage = interval_coverage(params, truths);
  return g;
}

EvalReport evaluate(const PredictiveModel& model, const Dataset& ds) {
  if (ds.empty()) throw DataError("evaluate: empty dataset");
  if (ds.covariate_names != model.schema().covariate_names) {
    throw ConfigError("evaluate: dataset covariates do not match the model");
  }
  const Index n = ds.size();
  Eigen::MatrixXd covariates(ds.num_covariates(), n);
  Eigen::VectorXd xs = Eigen::VectorXd::Zero(n);
  std::vector<double> truths(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) {
    const auto& r = ds.records[static_cast<std::size_t>(k)];
    const auto c = r.complete_covariates();
    for (Index i = 0; i < ds.num_covariates(); ++i) covariates(i, k) = c[static_cast<std::size_t>(i)];
    if (model.schema().spatial) {
      if (!r.x) throw DataError("evaluate: spatial model needs x in every record");
      xs(k) = *r.x;
    }
    truths[static_cast<std::size_t>(k)] = r.response;
  }
  Eigen::VectorXd mean, variance;
  model.predict_batch(covariates, xs, mean, variance);
  std::vector<GaussianParams> params(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) params[static_cast<std::size_t>(k)] = {mean(k), variance(k)};

  EvalReport report;
  report.overall = score_group("overall", params, truths);
  if (!ds.spatial || ds.landmarks.empty()) return report;

  std::set<double> depths;
  for (const auto& r : ds.records) depths.insert(*r.x);
  for (const auto& lm : ds.landmarks) {
    const double nearest = *std::min_element(depths.begin(), depths.end(), [&](double a, double b) {
      return std::abs(a - lm.x) < std::abs(b - lm.x);
    });
    std::vector<GaussianParams> p;
    std::vector<double> t;
    for (Index k = 0; k < n; ++k) {
      if (*ds.records[static_cast<std::size_t>(k)].x == nearest) {
        p.push_back(params[static_cast<std::size_t>(k)]);
        t.push_back(truths[static_cast<std::size_t>(k)]);
      }
    }
    report.landmarks.push_back(score_group(lm.name, p, t));
  }
  return report;
}

namespace {

nlohmann::json group_json(const GroupMetrics& g) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"name", g.name}, {"count", g.count}, {"marpd", num(g.marpd)}, {"nll", num(g.nll)},
          {"ece", num(g.ece)}, {"coverage_2sd", num(g.coverage)}};
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json lm = nlohmann::json::array();
  for (const auto& g : landmarks) lm.push_back(group_json(g));
  return {{"overall", group_json(overall)}, {"landmarks", lm}};
}

std::string EvalReport::to_text() const {
  std::vector<const GroupMetrics*> rows{&overall};
  for (const auto& g : landmarks) rows.push_back(&g);
  std::size_t width = 5;
  for (const auto* g : rows) width = std::max(width, g->name.size());
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s %8s %10s %10s %8s %8s\n", static_cast<int>(width), "group",
                "count", "MARPD(%)", "NLL", "ECE", "cov2sd");
  out << line;
  for (const auto* g : rows) {
    std::snprintf(line, sizeof line, "%-*s %8lld %10.4f %10.4f %8.4f %8.4f\n",
                  static_cast<int>(width), g->name.c_str(), static_cast<long long>(g->count),
                  g->marpd, g->nll, g->ece, g->coverage);
    out << line;
  }
  return out.str();
}

}  // namespace atlasnam
