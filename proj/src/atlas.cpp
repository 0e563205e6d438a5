#include "atlasnam/atlas.hpp"

#include "atlasnam/error.hpp"
#include "atlasnam/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace atlasnam {

namespace {

constexpr int kFormatVersion = 1;
constexpr Index kEvalChunk = 4096;

double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - w) + sorted[hi] * w;
}

// Per-sample Gaussian NLL and its derivatives with respect to mean and variance.
double gaussian_nll_terms(const Eigen::ArrayXd& y, const Eigen::ArrayXd& m, const Eigen::ArrayXd& v,
                          Eigen::ArrayXd* d_mean, Eigen::ArrayXd* d_var) {
  const Eigen::ArrayXd r = y - m;
  const Eigen::ArrayXd loss = 0.5 * (2.0 * std::numbers::pi * v).log() + r.square() / (2.0 * v);
  if (d_mean) *d_mean = -r / v;
  if (d_var) *d_var = 0.5 / v - r.square() / (2.0 * v.square());
  return loss.sum();
}

std::vector<Index> iota_rows(Index begin, Index end) {
  std::vector<Index> rows(static_cast<std::size_t>(end - begin));
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

void check_complete_training_data(const Dataset& ds, const char* what) {
  if (ds.empty()) throw DataError(std::string(what) + ": empty dataset");
  for (Index i = 0; i < ds.num_covariates(); ++i) {
    const bool any = std::any_of(ds.records.begin(), ds.records.end(),
                                 [&](const Record& r) { return r.covariates[static_cast<std::size_t>(i)].has_value(); });
    if (!any) {
      throw DataError(std::string(what) + ": covariate '" + ds.covariate_names[static_cast<std::size_t>(i)] +
                      "' has no observed values");
    }
  }
  for (const auto& r : ds.records) {
    if (!r.complete()) {
      throw DataError(std::string(what) + ": subject '" + r.subject_id +
                      "' has missing covariates; impute before training");
    }
  }
}

}  // namespace

std::string to_string(MonotonePrior prior) {
  switch (prior) {
    case MonotonePrior::kNone: return "none";
    case MonotonePrior::kIncreasing: return "increasing";
    case MonotonePrior::kDecreasing: return "decreasing";
  }
  return "none";
}

MonotonePrior prior_from_string(std::string_view tag) {
  if (tag == "none") return MonotonePrior::kNone;
  if (tag == "increasing") return MonotonePrior::kIncreasing;
  if (tag == "decreasing") return MonotonePrior::kDecreasing;
  throw ConfigError("unknown monotone prior '" + std::string(tag) +
                    "' (expected none, increasing, decreasing)");
}

// ---------------------------------------------------------------------------

CovariateScaling CovariateScaling::fit(std::vector<double> values) {
  if (values.empty()) throw DataError("cannot fit covariate scaling on zero values");
  std::sort(values.begin(), values.end());
  return {values.front(), values.back(), quantile_sorted(values, 0.25), quantile_sorted(values, 0.75)};
}

nlohmann::json CovariateScaling::to_json() const {
  return {{"min", min}, {"max", max}, {"q25", q25}, {"q75", q75}};
}

CovariateScaling CovariateScaling::from_json(const nlohmann::json& doc) {
  return {doc.at("min").get<double>(), doc.at("max").get<double>(), doc.at("q25").get<double>(),
          doc.at("q75").get<double>()};
}

void AtlasConfig::validate() const {
  train.validate();
  if (hidden_width < 1) throw ConfigError("hidden_width must be >= 1");
  if (group_size < 1 || hidden_width % group_size != 0) {
    throw ConfigError("hidden_width must be divisible by group_size");
  }
  if (!(lipschitz > 0.0)) throw ConfigError("lipschitz must be > 0");
  if (!(variance_floor >= 0.0)) throw ConfigError("variance_floor must be >= 0");
}

double ModelSchema::network_input(Index i, double c) const {
  const auto k = static_cast<std::size_t>(i);
  const double u = covariate_scaling[k].normalize(c);
  return priors[k] == MonotonePrior::kDecreasing ? 1.0 - u : u;
}

void ModelSchema::check_location(std::optional<double> x) const {
  if (spatial) {
    if (!x) throw ConfigError("model is spatial: a location x in [0, 1] is required");
    if (!(*x >= 0.0 && *x <= 1.0)) throw DomainError("location x must lie in [0, 1]");
  }
}

ModelSchema ModelSchema::from_dataset(const Dataset& ds, std::vector<MonotonePrior> priors) {
  ModelSchema s;
  s.covariate_names = ds.covariate_names;
  s.spatial = ds.spatial;
  if (priors.empty()) priors.assign(ds.covariate_names.size(), MonotonePrior::kNone);
  if (priors.size() != ds.covariate_names.size()) {
    throw ConfigError("expected one monotone prior per covariate");
  }
  s.priors = std::move(priors);
  for (Index i = 0; i < ds.num_covariates(); ++i) {
    std::vector<double> values;
    for (const auto& r : ds.records) {
      if (const auto& c = r.covariates[static_cast<std::size_t>(i)]) values.push_back(*c);
    }
    s.covariate_scaling.push_back(CovariateScaling::fit(std::move(values)));
  }
  double sum = 0.0;
  for (const auto& r : ds.records) sum += r.response;
  const double mean = sum / static_cast<double>(ds.size());
  double ss = 0.0;
  for (const auto& r : ds.records) ss += (r.response - mean) * (r.response - mean);
  const double sd = std::sqrt(ss / static_cast<double>(ds.size()));
  s.response_scaling = {mean, sd > 0.0 ? sd : 1.0};
  return s;
}

nlohmann::json ModelSchema::to_json() const {
  nlohmann::json covs = nlohmann::json::array();
  for (std::size_t k = 0; k < covariate_names.size(); ++k) {
    covs.push_back({{"name", covariate_names[k]},
                    {"prior", to_string(priors[k])},
                    {"scaling", covariate_scaling[k].to_json()}});
  }
  return {{"covariates", covs},
          {"spatial", spatial},
          {"response", {{"mean", response_scaling.mean}, {"sd", response_scaling.sd}}}};
}

ModelSchema ModelSchema::from_json(const nlohmann::json& doc) {
  ModelSchema s;
  for (const auto& c : doc.at("covariates")) {
    s.covariate_names.push_back(c.at("name").get<std::string>());
    s.priors.push_back(prior_from_string(c.at("prior").get<std::string>()));
    s.covariate_scaling.push_back(CovariateScaling::from_json(c.at("scaling")));
  }
  s.spatial = doc.at("spatial").get<bool>();
  s.response_scaling = {doc.at("response").at("mean").get<double>(),
                        doc.at("response").at("sd").get<double>()};
  return s;
}

// ---------------------------------------------------------------------------

GaussianParams PredictiveModel::predict(std::span<const double> covariates,
                                        std::optional<double> x) const {
  const auto& s = schema();
  if (static_cast<Index>(covariates.size()) != s.num_covariates()) {
    throw ConfigError("predict: expected " + std::to_string(s.num_covariates()) + " covariates, got " +
                      std::to_string(covariates.size()));
  }
  s.check_location(x);
  Eigen::MatrixXd c = Eigen::Map<const Eigen::VectorXd>(covariates.data(),
                                                        static_cast<Index>(covariates.size()));
  Eigen::VectorXd xs = Eigen::VectorXd::Constant(1, x.value_or(0.0));
  Eigen::VectorXd mean, variance;
  predict_batch(c, xs, mean, variance);
  return {mean(0), variance(0)};
}

GaussianParams PredictiveModel::predict(const std::vector<std::optional<double>>& covariates,
                                        std::optional<double> x) const {
  std::vector<double> values;
  for (std::size_t k = 0; k < covariates.size(); ++k) {
    if (!covariates[k]) {
      const auto& names = schema().covariate_names;
      throw DataError("predict: covariate '" + (k < names.size() ? names[k] : std::to_string(k)) +
                      "' is missing; impute it with the dependence model first");
    }
    values.push_back(*covariates[k]);
  }
  return predict(std::span<const double>(values), x);
}

// ---------------------------------------------------------------------------

Eigen::VectorXd& Subnetwork::mean_parameters() {
  if (auto* plain = std::get_if<nn::DenseNetwork>(&mean_head)) return plain->parameters();
  return std::get<MonotoneNetwork>(mean_head).base().parameters();
}

Eigen::MatrixXd Subnetwork::mean_forward(const Eigen::MatrixXd& in) const {
  return std::visit([&](const auto& head) { return head.forward_batch(in); }, mean_head);
}

Eigen::MatrixXd Subnetwork::mean_forward(const Eigen::MatrixXd& in, nn::ForwardTape& tape) const {
  return std::visit([&](const auto& head) { return head.forward_batch(in, tape); }, mean_head);
}

nn::Gradients Subnetwork::mean_backward(const nn::ForwardTape& tape,
                                        const Eigen::MatrixXd& upstream) const {
  return std::visit([&](const auto& head) { return head.backward(tape, upstream); }, mean_head);
}

void Subnetwork::project() {
  if (auto* mono = std::get_if<MonotoneNetwork>(&mean_head)) mono->normalize_weights();
}

AtlasModel::AtlasModel(ModelSchema schema, const AtlasConfig& config, std::uint64_t seed)
    : schema_(std::move(schema)), variance_floor_(config.variance_floor) {
  config.validate();
  if (schema_.num_covariates() < 1) throw ConfigError("atlas needs at least one covariate");
  const Index in_dim = schema_.spatial ? 2 : 1;
  const Index h = config.hidden_width;
  for (Index i = 0; i < schema_.num_covariates(); ++i) {
    Rng rng(derive_seed(derive_seed(seed, "atlas/init"), static_cast<std::uint64_t>(i)));
    Subnetwork sub;
    if (schema_.priors[static_cast<std::size_t>(i)] == MonotonePrior::kNone) {
      nn::DenseNetwork mean({in_dim, h, 1}, {nn::Activation::kGelu}, {nn::Activation::kLinear});
      mean.init_uniform(rng);
      sub.mean_head = std::move(mean);
    } else {
      nn::DenseNetwork base({in_dim, h, 1}, {nn::Activation::kGroupSort, config.group_size},
                            {nn::Activation::kLinear});
      base.init_uniform(rng);
      MonotoneNetwork mono(std::move(base), config.lipschitz, std::vector<Index>{0});
      mono.normalize_weights();
      sub.mean_head = std::move(mono);
    }
    sub.variance_head = nn::DenseNetwork({in_dim + 1, h, 1}, {nn::Activation::kGelu},
                                         {nn::Activation::kSoftplus});
    sub.variance_head.init_uniform(rng);
    subnets_.push_back(std::move(sub));
  }
}

double AtlasModel::intercept() const {
  return schema_.response_scaling.mean + schema_.response_scaling.sd * intercept_(0);
}

void AtlasModel::project() {
  for (auto& s : subnets_) s.project();
}

Eigen::MatrixXd AtlasModel::head_input(Index i, const Eigen::VectorXd& c,
                                       std::optional<double> x) const {
  Eigen::MatrixXd in(schema_.spatial ? 2 : 1, c.size());
  for (Index b = 0; b < c.size(); ++b) in(0, b) = schema_.network_input(i, c(b));
  if (schema_.spatial) in.row(1).setConstant(x.value_or(0.0));
  return in;
}

namespace {

// Standardized (f^m_i, f^v_i) rows for a prepared input block.
void subnetwork_raw(const Subnetwork& sub, const Eigen::MatrixXd& in, double floor_share,
                    Eigen::RowVectorXd& fm, Eigen::RowVectorXd& fv) {
  fm = sub.mean_forward(in).row(0);
  Eigen::MatrixXd vin(in.rows() + 1, in.cols());
  vin.row(0) = fm;
  vin.bottomRows(in.rows()) = in;
  fv = sub.variance_head.forward_batch(vin).row(0).array() + floor_share;
}

}  // namespace

void AtlasModel::contributions_batch(Index i, const Eigen::VectorXd& c_i, std::optional<double> x,
                                     Eigen::VectorXd& mean, Eigen::VectorXd& variance) const {
  if (i < 0 || i >= num_covariates()) {
    throw ConfigError("covariate index " + std::to_string(i) + " out of range [0, " +
                      std::to_string(num_covariates()) + ")");
  }
  schema_.check_location(x);
  const double sd = schema_.response_scaling.sd;
  const double floor_share = variance_floor_ / static_cast<double>(num_covariates());
  mean.resize(c_i.size());
  variance.resize(c_i.size());
  for (Index start = 0; start < c_i.size(); start += kEvalChunk) {
    const Index len = std::min(kEvalChunk, c_i.size() - start);
    Eigen::RowVectorXd fm, fv;
    subnetwork_raw(subnets_[static_cast<std::size_t>(i)],
                   head_input(i, c_i.segment(start, len), x), floor_share, fm, fv);
    mean.segment(start, len) = sd * fm.transpose();
    variance.segment(start, len) = (sd * sd) * fv.transpose();
  }
}

AtlasModel::Contribution AtlasModel::disentangle(Index i, double c_i, std::optional<double> x) const {
  Eigen::VectorXd mean, variance;
  contributions_batch(i, Eigen::VectorXd::Constant(1, c_i), x, mean, variance);
  return {mean(0), variance(0)};
}

void AtlasModel::predict_batch(const Eigen::MatrixXd& covariates, const Eigen::VectorXd& x,
                               Eigen::VectorXd& mean, Eigen::VectorXd& variance) const {
  if (covariates.rows() != num_covariates()) {
    throw ConfigError("predict_batch: covariate matrix must have one row per covariate");
  }
  if (schema_.spatial && x.size() != covariates.cols()) {
    throw ConfigError("predict_batch: need one location per column");
  }
  const Index n = covariates.cols();
  const double sd = schema_.response_scaling.sd;
  const double floor_share = variance_floor_ / static_cast<double>(num_covariates());
  mean.resize(n);
  variance.resize(n);
  for (Index start = 0; start < n; start += kEvalChunk) {
    const Index len = std::min(kEvalChunk, n - start);
    Eigen::RowVectorXd m = Eigen::RowVectorXd::Constant(len, intercept_(0));
    Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(len);
    for (Index i = 0; i < num_covariates(); ++i) {
      Eigen::MatrixXd in(schema_.spatial ? 2 : 1, len);
      for (Index b = 0; b < len; ++b) in(0, b) = schema_.network_input(i, covariates(i, start + b));
      if (schema_.spatial) {
        in.row(1) = x.segment(start, len).transpose();
        if ((in.row(1).array() < 0.0).any() || (in.row(1).array() > 1.0).any()) {
          throw DomainError("location x must lie in [0, 1]");
        }
      }
      Eigen::RowVectorXd fm, fv;
      subnetwork_raw(subnets_[static_cast<std::size_t>(i)], in, floor_share, fm, fv);
      m += fm;
      v += fv;
    }
    mean.segment(start, len) = (schema_.response_scaling.mean + sd * m.array()).transpose();
    variance.segment(start, len) = (sd * sd) * v.transpose();
  }
}

nlohmann::json AtlasModel::to_json() const {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : subnets_) {
    nlohmann::json mean;
    if (const auto* plain = std::get_if<nn::DenseNetwork>(&s.mean_head)) {
      mean = {{"kind", "plain"}, {"network", plain->to_json()}};
    } else {
      mean = std::get<MonotoneNetwork>(s.mean_head).to_json();
    }
    subs.push_back({{"mean_head", mean}, {"variance_head", s.variance_head.to_json()}});
  }
  return {{"format", "atlasnam-model"}, {"version", kFormatVersion},
          {"kind", "additive"},         {"schema", schema_.to_json()},
          {"intercept", intercept_(0)}, {"variance_floor", variance_floor_},
          {"subnetworks", subs}};
}

AtlasModel AtlasModel::from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("kind").get<std::string>() != "additive") {
      throw DataError("model JSON: kind is not 'additive'");
    }
    if (doc.at("version").get<int>() != kFormatVersion) {
      throw DataError("model JSON: unsupported version");
    }
    AtlasModel m;
    m.schema_ = ModelSchema::from_json(doc.at("schema"));
    m.intercept_(0) = doc.at("intercept").get<double>();
    m.variance_floor_ = doc.at("variance_floor").get<double>();
    for (const auto& s : doc.at("subnetworks")) {
      Subnetwork sub;
      const auto& mean = s.at("mean_head");
      if (mean.at("kind").get<std::string>() == "plain") {
        sub.mean_head = nn::DenseNetwork::from_json(mean.at("network"));
      } else {
        sub.mean_head = MonotoneNetwork::from_json(mean);
      }
      sub.variance_head = nn::DenseNetwork::from_json(s.at("variance_head"));
      m.subnets_.push_back(std::move(sub));
    }
    if (static_cast<Index>(m.subnets_.size()) != m.schema_.num_covariates()) {
      throw DataError("model JSON: subnetwork count does not match covariates");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

JointMlpModel::JointMlpModel(ModelSchema schema, const AtlasConfig& config, std::uint64_t seed)
    : schema_(std::move(schema)), variance_floor_(config.variance_floor) {
  config.validate();
  const Index in_dim = schema_.num_covariates() + (schema_.spatial ? 1 : 0);
  net_ = nn::DenseNetwork({in_dim, config.hidden_width, 2}, {nn::Activation::kGelu},
                          {nn::Activation::kLinear, nn::Activation::kSoftplus});
  Rng rng(derive_seed(seed, "joint_mlp/init"));
  net_.init_uniform(rng);
}

void JointMlpModel::predict_batch(const Eigen::MatrixXd& covariates, const Eigen::VectorXd& x,
                                  Eigen::VectorXd& mean, Eigen::VectorXd& variance) const {
  const Index n_cov = schema_.num_covariates();
  if (covariates.rows() != n_cov) throw ConfigError("predict_batch: covariate row mismatch");
  if (schema_.spatial && x.size() != covariates.cols()) {
    throw ConfigError("predict_batch: need one location per column");
  }
  Eigen::MatrixXd in(net_.input_dim(), covariates.cols());
  for (Index b = 0; b < covariates.cols(); ++b) {
    for (Index i = 0; i < n_cov; ++i) in(i, b) = schema_.network_input(i, covariates(i, b));
    if (schema_.spatial) in(n_cov, b) = x(b);
  }
  const Eigen::MatrixXd out = net_.forward_batch(in);
  const double sd = schema_.response_scaling.sd;
  mean = (schema_.response_scaling.mean + sd * out.row(0).array()).transpose();
  variance = ((sd * sd) * (out.row(1).array() + variance_floor_)).transpose();
}

nlohmann::json JointMlpModel::to_json() const {
  return {{"format", "atlasnam-model"}, {"version", kFormatVersion},
          {"kind", "joint_mlp"},        {"schema", schema_.to_json()},
          {"variance_floor", variance_floor_}, {"network", net_.to_json()}};
}

JointMlpModel JointMlpModel::from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("kind").get<std::string>() != "joint_mlp") {
      throw DataError("model JSON: kind is not 'joint_mlp'");
    }
    JointMlpModel m;
    m.schema_ = ModelSchema::from_json(doc.at("schema"));
    m.variance_floor_ = doc.at("variance_floor").get<double>();
    m.net_ = nn::DenseNetwork::from_json(doc.at("network"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model JSON: ") + e.what());
  }
}

std::unique_ptr<PredictiveModel> predictive_model_from_json(const nlohmann::json& doc) {
  std::string kind;
  try {
    kind = doc.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model JSON: ") + e.what());
  }
  if (kind == "additive") return std::make_unique<AtlasModel>(AtlasModel::from_json(doc));
  if (kind == "joint_mlp") return std::make_unique<JointMlpModel>(JointMlpModel::from_json(doc));
  throw DataError("model JSON: unknown kind '" + kind + "'");
}

// ---------------------------------------------------------------------------

TrainingTable TrainingTable::build(const ModelSchema& schema, const Dataset& ds) {
  TrainingTable t;
  const Index n = ds.size();
  t.inputs.resize(schema.num_covariates(), n);
  t.x = Eigen::VectorXd::Zero(n);
  t.y.resize(n);
  for (Index k = 0; k < n; ++k) {
    const auto& r = ds.records[static_cast<std::size_t>(k)];
    const auto c = r.complete_covariates();
    for (Index i = 0; i < schema.num_covariates(); ++i) {
      t.inputs(i, k) = schema.network_input(i, c[static_cast<std::size_t>(i)]);
    }
    if (schema.spatial) t.x(k) = r.x.value_or(0.0);
    t.y(k) = (r.response - schema.response_scaling.mean) / schema.response_scaling.sd;
  }
  return t;
}

AtlasObjective::AtlasObjective(AtlasModel& model, TrainingTable table)
    : model_(model), table_(std::move(table)) {
  for (auto& s : model_.subnets_) {
    mean_grads_.push_back(Eigen::VectorXd::Zero(s.mean_parameters().size()));
    variance_grads_.push_back(Eigen::VectorXd::Zero(s.variance_head.num_parameters()));
  }
}

std::vector<nn::ParameterBlock> AtlasObjective::parameter_blocks() {
  std::vector<nn::ParameterBlock> blocks{{&model_.intercept_, &intercept_grad_}};
  for (std::size_t i = 0; i < model_.subnets_.size(); ++i) {
    blocks.push_back({&model_.subnets_[i].mean_parameters(), &mean_grads_[i]});
    blocks.push_back({&model_.subnets_[i].variance_head.parameters(), &variance_grads_[i]});
  }
  return blocks;
}

namespace {

Eigen::MatrixXd gather_input(const TrainingTable& t, Index i, bool spatial,
                             std::span<const Index> rows) {
  Eigen::MatrixXd in(spatial ? 2 : 1, static_cast<Index>(rows.size()));
  for (Index b = 0; b < in.cols(); ++b) {
    const Index r = rows[static_cast<std::size_t>(b)];
    in(0, b) = t.inputs(i, r);
    if (spatial) in(1, b) = t.x(r);
  }
  return in;
}

Eigen::ArrayXd gather_y(const TrainingTable& t, std::span<const Index> rows) {
  Eigen::ArrayXd y(static_cast<Index>(rows.size()));
  for (Index b = 0; b < y.size(); ++b) y(b) = t.y(rows[static_cast<std::size_t>(b)]);
  return y;
}

}  // namespace

double AtlasObjective::loss_and_gradient(std::span<const Index> rows) {
  const Index batch = static_cast<Index>(rows.size());
  const Index n_cov = model_.num_covariates();
  const bool spatial = model_.spatial();
  const double floor_share = model_.variance_floor_ / static_cast<double>(n_cov);

  std::vector<nn::ForwardTape> mean_tapes(static_cast<std::size_t>(n_cov));
  std::vector<nn::ForwardTape> var_tapes(static_cast<std::size_t>(n_cov));
  Eigen::ArrayXd m = Eigen::ArrayXd::Constant(batch, model_.intercept_(0));
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(batch);
  for (Index i = 0; i < n_cov; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const auto& sub = model_.subnets_[k];
    const Eigen::MatrixXd in = gather_input(table_, i, spatial, rows);
    const Eigen::MatrixXd fm = sub.mean_forward(in, mean_tapes[k]);
    Eigen::MatrixXd vin(in.rows() + 1, batch);
    vin.row(0) = fm.row(0);
    vin.bottomRows(in.rows()) = in;
    const Eigen::MatrixXd fv = sub.variance_head.forward_batch(vin, var_tapes[k]);
    m += fm.row(0).transpose().array();
    v += fv.row(0).transpose().array() + floor_share;
  }
  Eigen::ArrayXd d_mean, d_var;
  const double total = gaussian_nll_terms(gather_y(table_, rows), m, v, &d_mean, &d_var);
  const double scale = 1.0 / static_cast<double>(batch);
  const Eigen::RowVectorXd gm = (d_mean * scale).matrix().transpose();
  const Eigen::RowVectorXd gv = (d_var * scale).matrix().transpose();

  intercept_grad_(0) = gm.sum();
  for (Index i = 0; i < n_cov; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const auto& sub = model_.subnets_[k];
    nn::Gradients vg = sub.variance_head.backward(var_tapes[k], gv);
    variance_grads_[k] = std::move(vg.parameters);
    const Eigen::RowVectorXd upstream_mean = gm + vg.input.row(0);
    mean_grads_[k] = sub.mean_backward(mean_tapes[k], upstream_mean).parameters;
  }
  return total * scale;
}

double AtlasObjective::mean_loss(std::span<const Index> rows) const {
  const Index n_cov = model_.num_covariates();
  const double floor_share = model_.variance_floor_ / static_cast<double>(n_cov);
  double total = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += kEvalChunk) {
    const auto chunk = rows.subspan(start, std::min<std::size_t>(kEvalChunk, rows.size() - start));
    Eigen::ArrayXd m = Eigen::ArrayXd::Constant(static_cast<Index>(chunk.size()), model_.intercept_(0));
    Eigen::ArrayXd v = Eigen::ArrayXd::Zero(static_cast<Index>(chunk.size()));
    for (Index i = 0; i < n_cov; ++i) {
      Eigen::RowVectorXd fm, fv;
      subnetwork_raw(model_.subnets_[static_cast<std::size_t>(i)],
                     gather_input(table_, i, model_.spatial(), chunk), floor_share, fm, fv);
      m += fm.transpose().array();
      v += fv.transpose().array();
    }
    total += gaussian_nll_terms(gather_y(table_, chunk), m, v, nullptr, nullptr);
  }
  return total / static_cast<double>(rows.size());
}

JointMlpObjective::JointMlpObjective(JointMlpModel& model, TrainingTable table)
    : model_(model), table_(std::move(table)),
      grad_(Eigen::VectorXd::Zero(model.net_.num_parameters())) {}

std::vector<nn::ParameterBlock> JointMlpObjective::parameter_blocks() {
  return {{&model_.net_.parameters(), &grad_}};
}

Eigen::MatrixXd JointMlpObjective::batch_inputs(std::span<const Index> rows) const {
  const Index n_cov = model_.schema_.num_covariates();
  Eigen::MatrixXd in(model_.net_.input_dim(), static_cast<Index>(rows.size()));
  for (Index b = 0; b < in.cols(); ++b) {
    const Index r = rows[static_cast<std::size_t>(b)];
    in.col(b).head(n_cov) = table_.inputs.col(r);
    if (model_.schema_.spatial) in(n_cov, b) = table_.x(r);
  }
  return in;
}

double JointMlpObjective::loss_and_gradient(std::span<const Index> rows) {
  nn::ForwardTape tape;
  const Eigen::MatrixXd out = model_.net_.forward_batch(batch_inputs(rows), tape);
  const Eigen::ArrayXd m = out.row(0).transpose().array();
  const Eigen::ArrayXd v = out.row(1).transpose().array() + model_.variance_floor_;
  Eigen::ArrayXd d_mean, d_var;
  const double total = gaussian_nll_terms(gather_y(table_, rows), m, v, &d_mean, &d_var);
  const double scale = 1.0 / static_cast<double>(rows.size());
  Eigen::MatrixXd upstream(2, out.cols());
  upstream.row(0) = (d_mean * scale).matrix().transpose();
  upstream.row(1) = (d_var * scale).matrix().transpose();
  grad_ = model_.net_.backward(tape, upstream).parameters;
  return total * scale;
}

double JointMlpObjective::mean_loss(std::span<const Index> rows) const {
  double total = 0.0;
  for (std::size_t start = 0; start < rows.size(); start += kEvalChunk) {
    const auto chunk = rows.subspan(start, std::min<std::size_t>(kEvalChunk, rows.size() - start));
    const Eigen::MatrixXd out = model_.net_.forward_batch(batch_inputs(chunk));
    total += gaussian_nll_terms(gather_y(table_, chunk), out.row(0).transpose().array(),
                                out.row(1).transpose().array() + model_.variance_floor_, nullptr,
                                nullptr);
  }
  return total / static_cast<double>(rows.size());
}

// ---------------------------------------------------------------------------

namespace {

Dataset concatenate(const Dataset& a, const Dataset& b) {
  Dataset out = a;
  out.records.insert(out.records.end(), b.records.begin(), b.records.end());
  return out;
}

}  // namespace

AtlasFit fit_atlas(const Dataset& train, const Dataset& validation, const AtlasConfig& config,
                   std::vector<MonotonePrior> priors) {
  config.validate();
  check_complete_training_data(train, "fit_atlas");
  if (!validation.empty()) check_complete_training_data(validation, "fit_atlas (validation)");
  train.validate();
  ModelSchema schema = ModelSchema::from_dataset(train, std::move(priors));
  AtlasFit fit{AtlasModel(schema, config, config.train.seed), {}};
  AtlasObjective objective(fit.model, TrainingTable::build(schema, concatenate(train, validation)));
  const auto train_rows = iota_rows(0, train.size());
  const auto val_rows = iota_rows(train.size(), train.size() + validation.size());
  fit.history = nn::train_loop(objective, train_rows, val_rows, config.train);
  return fit;
}

AtlasFit fit_atlas(const Dataset& dataset, const AtlasConfig& config,
                   std::vector<MonotonePrior> priors) {
  if (dataset.empty()) throw DataError("fit_atlas: empty dataset");
  auto [train, validation] =
      carve_validation(dataset, config.train.validation_fraction, config.train.seed);
  return fit_atlas(train, validation, config, std::move(priors));
}

JointMlpFit fit_joint_mlp(const Dataset& train, const Dataset& validation,
                          const AtlasConfig& config) {
  config.validate();
  check_complete_training_data(train, "fit_joint_mlp");
  if (!validation.empty()) check_complete_training_data(validation, "fit_joint_mlp (validation)");
  ModelSchema schema = ModelSchema::from_dataset(train, {});
  JointMlpFit fit{JointMlpModel(schema, config, config.train.seed), {}};
  JointMlpObjective objective(fit.model,
                              TrainingTable::build(schema, concatenate(train, validation)));
  const auto train_rows = iota_rows(0, train.size());
  const auto val_rows = iota_rows(train.size(), train.size() + validation.size());
  fit.history = nn::train_loop(objective, train_rows, val_rows, config.train);
  return fit;
}

}  // namespace atlasnam
