#include "atlasnam/dependence.hpp"

#include "atlasnam/error.hpp"
#include "atlasnam/nn/activation.hpp"
#include "atlasnam/rng.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

namespace atlasnam {

namespace {

constexpr int kFormatVersion = 1;

std::vector<Index> others_of(Index n, Index i) {
  std::vector<Index> out;
  for (Index k = 0; k < n; ++k) {
    if (k != i) out.push_back(k);
  }
  return out;
}

void check_index(Index idx, Index n, const char* what) {
  if (idx < 0 || idx >= n) {
    throw ConfigError(std::string(what) + " index " + std::to_string(idx) + " out of range [0, " +
                      std::to_string(n) + ")");
  }
}

nlohmann::json vector_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& doc) {
  const auto v = doc.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& doc, Index n) {
  const auto rows = doc.get<std::vector<std::vector<double>>>();
  if (static_cast<Index>(rows.size()) != n) throw DataError("dependence JSON: covariance shape");
  Eigen::MatrixXd m(n, n);
  for (Index r = 0; r < n; ++r) {
    const auto& row = rows[static_cast<std::size_t>(r)];
    if (static_cast<Index>(row.size()) != n) throw DataError("dependence JSON: covariance shape");
    for (Index c = 0; c < n; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

// Lower-triangular slot of (r, c), c <= r, after the d mean outputs.
Index tri_slot(Index d, Index r, Index c) { return d + r * (r + 1) / 2 + c; }

}  // namespace

Index ConditionalGaussian::position(Index k) const {
  if (k == given) {
    throw ConfigError("covariate " + std::to_string(k) + " is the conditioning covariate");
  }
  for (std::size_t p = 0; p < others.size(); ++p) {
    if (others[p] == k) return static_cast<Index>(p);
  }
  throw ConfigError("covariate index " + std::to_string(k) + " out of range");
}

Eigen::MatrixXd covariance_sqrt(const Eigen::MatrixXd& covariance) {
  Eigen::LLT<Eigen::MatrixXd> llt(covariance);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(covariance);
  if (eig.info() != Eigen::Success) throw NumericalError("covariance factorization failed");
  const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  if (eig.eigenvalues().minCoeff() < -1e-8 * scale) {
    throw NumericalError("covariance is not positive semi-definite");
  }
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

Eigen::MatrixXd sample_conditional(const ConditionalGaussian& cond, const Eigen::MatrixXd& normals) {
  if (normals.rows() != cond.mean.size()) {
    throw ConfigError("sample_conditional: normals must have one row per conditioned covariate");
  }
  if (normals.rows() == 0) return Eigen::MatrixXd(0, normals.cols());
  return (covariance_sqrt(cond.covariance) * normals).colwise() + cond.mean;
}

void CovariateDependence::check_compatible(const ModelSchema& schema) const {
  if (covariate_names() != schema.covariate_names) {
    throw ConfigError("dependence model covariates do not match the atlas covariates");
  }
}

GaussianParams conditional_1d(const CovariateDependence& dep, Index i, Index k, double c_i) {
  check_index(k, dep.num_covariates(), "target covariate");
  if (k == i) throw ConfigError("conditional_1d: target and conditioning covariate coincide");
  const ConditionalGaussian cond = dep.conditional(i, c_i);
  const Index p = cond.position(k);
  return {cond.mean(p), cond.covariance(p, p)};
}

BivariateGaussian conditional_2d(const CovariateDependence& dep, Index i, Index k1, Index k2,
                                 double c_i) {
  check_index(k1, dep.num_covariates(), "target covariate");
  check_index(k2, dep.num_covariates(), "target covariate");
  if (k1 == k2 || k1 == i || k2 == i) {
    throw ConfigError("conditional_2d: indices i, K1, K2 must be pairwise distinct");
  }
  const ConditionalGaussian cond = dep.conditional(i, c_i);
  const Index p1 = cond.position(k1), p2 = cond.position(k2);
  BivariateGaussian out;
  out.mean << cond.mean(p1), cond.mean(p2);
  out.covariance << cond.covariance(p1, p1), cond.covariance(p1, p2), cond.covariance(p2, p1),
      cond.covariance(p2, p2);
  return out;
}

void DependenceConfig::validate() const {
  train.validate();
  if (hidden_width < 1 || group_size < 1 || hidden_width % group_size != 0) {
    throw ConfigError("dependence hidden_width must be a positive multiple of group_size");
  }
  if (hidden_layers < 1) throw ConfigError("dependence hidden_layers must be >= 1");
  if (!(lipschitz > 0.0)) throw ConfigError("dependence lipschitz must be > 0");
  if (mean_warmup_epochs < 0) throw ConfigError("dependence mean_warmup_epochs must be >= 0");
  for (const auto& p : pair_priors) {
    if (p.given == p.target) throw ConfigError("pair prior relates a covariate to itself");
    if (p.sign != 1 && p.sign != -1) throw ConfigError("pair prior sign must be +1 or -1");
  }
}

// ---------------------------------------------------------------------------

Index DependenceModel::output_dim(Index num_covariates) {
  const Index d = num_covariates - 1;
  return d + d * (d + 1) / 2;
}

DependenceModel::DependenceModel(std::vector<std::string> names,
                                 std::vector<CovariateScaling> scaling,
                                 const DependenceConfig& config, std::uint64_t seed)
    : names_(std::move(names)), scaling_(std::move(scaling)) {
  config.validate();
  const Index n = static_cast<Index>(names_.size());
  if (n < 1) throw ConfigError("dependence model needs at least one covariate");
  if (static_cast<Index>(scaling_.size()) != n) throw ConfigError("one scaling per covariate required");
  for (const auto& p : config.pair_priors) {
    check_index(p.given, n, "pair prior");
    check_index(p.target, n, "pair prior");
  }
  if (n == 1) return;
  for (Index i = 0; i < n; ++i) {
    Rng rng(derive_seed(derive_seed(seed, "dependence/init"), static_cast<std::uint64_t>(i)));
    std::vector<Index> widths{1};
    widths.insert(widths.end(), static_cast<std::size_t>(config.hidden_layers), config.hidden_width);
    widths.push_back(output_dim(n));
    nn::DenseNetwork base(widths,
                          {nn::Activation::kGroupSort, config.group_size},
                          std::vector<nn::Activation>(static_cast<std::size_t>(output_dim(n)),
                                                      nn::Activation::kLinear));
    base.init_uniform(rng);
    std::vector<MonotoneTerm> terms;
    const auto others = others_of(n, i);
    for (const auto& p : config.pair_priors) {
      if (p.given != i) continue;
      const auto pos = std::find(others.begin(), others.end(), p.target) - others.begin();
      terms.push_back({static_cast<Index>(pos), 0, p.sign});
    }
    MonotoneNetwork net(std::move(base), config.lipschitz, std::move(terms));
    net.normalize_weights();
    networks_.push_back(std::move(net));
  }
}

void DependenceModel::set_moments(Eigen::VectorXd mean, Eigen::MatrixXd covariance) {
  const Index n = num_covariates();
  if (mean.size() != n || covariance.rows() != n || covariance.cols() != n) {
    throw ConfigError("dependence moments do not match the covariate count");
  }
  moments_mean_ = std::move(mean);
  moments_cov_ = std::move(covariance);
}

GaussianDependence DependenceModel::unconditional() const {
  if (!has_moments()) {
    throw ConfigError("dependence model carries no covariate moments; refit it to switch dependence off");
  }
  return GaussianDependence(names_, moments_mean_, moments_cov_, GaussianDependence::Mode::kUnconditional);
}

void DependenceModel::project() {
  for (auto& net : networks_) net.normalize_weights();
}

double DependenceModel::batch_nll(const Eigen::MatrixXd& outputs, const Eigen::MatrixXd& targets,
                                  Eigen::MatrixXd* d_outputs) {
  const Index d = targets.rows();
  const Index batch = targets.cols();
  if (d_outputs) d_outputs->setZero(outputs.rows(), batch);
  double total = 0.0;
  const double log2pi = std::log(2.0 * std::numbers::pi);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(d, d);
  for (Index b = 0; b < batch; ++b) {
    for (Index r = 0; r < d; ++r) {
      for (Index c = 0; c < r; ++c) L(r, c) = outputs(tri_slot(d, r, c), b);
      L(r, r) = nn::softplus(outputs(tri_slot(d, r, r), b)) + kDiagonalOffset;
    }
    const Eigen::VectorXd resid = targets.col(b) - outputs.col(b).head(d);
    const Eigen::VectorXd a = L.triangularView<Eigen::Lower>().solve(resid);
    total += 0.5 * static_cast<double>(d) * log2pi + L.diagonal().array().log().sum() +
             0.5 * a.squaredNorm();
    if (!d_outputs) continue;
    const Eigen::VectorXd w = L.transpose().triangularView<Eigen::Upper>().solve(a);
    d_outputs->col(b).head(d) = -w;
    for (Index r = 0; r < d; ++r) {
      for (Index c = 0; c < r; ++c) (*d_outputs)(tri_slot(d, r, c), b) = -w(r) * a(c);
      const double g_diag = -w(r) * a(r) + 1.0 / L(r, r);
      (*d_outputs)(tri_slot(d, r, r), b) = g_diag * nn::sigmoid(outputs(tri_slot(d, r, r), b));
    }
  }
  return total;
}

ConditionalGaussian DependenceModel::conditional(Index i, double c_i) const {
  const Index n = num_covariates();
  if (n == 0 || (n > 1 && networks_.empty())) {
    throw ConfigError("dependence model is not trained");
  }
  check_index(i, n, "conditioning covariate");
  ConditionalGaussian out;
  out.given = i;
  out.value = c_i;
  out.others = others_of(n, i);
  const Index d = n - 1;
  out.mean.resize(d);
  out.covariance.resize(d, d);
  if (d == 0) return out;
  Eigen::MatrixXd in(1, 1);
  in(0, 0) = scaling_[static_cast<std::size_t>(i)].normalize(c_i);
  const Eigen::VectorXd z = networks_[static_cast<std::size_t>(i)].forward_batch(in).col(0);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(d, d);
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c < r; ++c) L(r, c) = z(tri_slot(d, r, c));
    L(r, r) = nn::softplus(z(tri_slot(d, r, r))) + kDiagonalOffset;
  }
  Eigen::VectorXd range(d);
  for (Index p = 0; p < d; ++p) {
    const auto& s = scaling_[static_cast<std::size_t>(out.others[static_cast<std::size_t>(p)])];
    range(p) = s.range();
    out.mean(p) = s.denormalize(z(p));
  }
  out.covariance = range.asDiagonal() * (L * L.transpose()) * range.asDiagonal();
  return out;
}

nlohmann::json DependenceModel::to_json() const {
  nlohmann::json covs = nlohmann::json::array();
  for (std::size_t k = 0; k < names_.size(); ++k) {
    covs.push_back({{"name", names_[k]}, {"scaling", scaling_[k].to_json()}});
  }
  nlohmann::json nets = nlohmann::json::object();
  for (std::size_t k = 0; k < networks_.size(); ++k) nets[names_[k]] = networks_[k].to_json();
  nlohmann::json doc = {{"format", "atlasnam-dependence"}, {"version", kFormatVersion},
                        {"model", "learned"}, {"covariates", covs}, {"networks", nets}};
  if (has_moments()) doc["moments"] = {{"mean", vector_json(moments_mean_)}, {"covariance", matrix_json(moments_cov_)}};
  return doc;
}

DependenceModel DependenceModel::from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("model").get<std::string>() != "learned") {
      throw DataError("dependence JSON: model is not 'learned'");
    }
    if (doc.at("version").get<int>() != kFormatVersion) {
      throw DataError("dependence JSON: unsupported version");
    }
    DependenceModel m;
    for (const auto& c : doc.at("covariates")) {
      m.names_.push_back(c.at("name").get<std::string>());
      m.scaling_.push_back(CovariateScaling::from_json(c.at("scaling")));
    }
    if (doc.contains("moments")) {
      m.set_moments(vector_from_json(doc.at("moments").at("mean")),
                    matrix_from_json(doc.at("moments").at("covariance"), static_cast<Index>(m.names_.size())));
    }
    const auto& nets = doc.at("networks");
    if (m.names_.size() > 1) {
      const Index n = static_cast<Index>(m.names_.size());
      for (const auto& name : m.names_) {
        MonotoneNetwork net = MonotoneNetwork::from_json(nets.at(name));
        if (net.input_dim() != 1 || net.output_dim() != output_dim(n)) {
          throw DataError("dependence JSON: network shape does not match covariate count");
        }
        m.networks_.push_back(std::move(net));
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dependence JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

GaussianDependence::GaussianDependence(std::vector<std::string> names, Eigen::VectorXd mean,
                                       Eigen::MatrixXd covariance, Mode mode)
    : names_(std::move(names)), mean_(std::move(mean)), cov_(std::move(covariance)), mode_(mode) {
  const Index n = static_cast<Index>(names_.size());
  if (mean_.size() != n || cov_.rows() != n || cov_.cols() != n) {
    throw ConfigError("Gaussian dependence: mean/covariance shape does not match covariates");
  }
  if (!cov_.isApprox(cov_.transpose(), 1e-12)) {
    throw ConfigError("Gaussian dependence: covariance is not symmetric");
  }
  if ((cov_.diagonal().array() <= 0.0).any()) {
    throw DomainError("Gaussian dependence: covariance diagonal must be positive");
  }
}

GaussianDependence GaussianDependence::from_dataset(const Dataset& ds, Mode mode) {
  const Index n = ds.num_covariates();
  std::vector<Eigen::VectorXd> rows;
  for (const auto& r : ds.records) {
    if (!r.complete()) continue;
    const auto c = r.complete_covariates();
    rows.push_back(Eigen::Map<const Eigen::VectorXd>(c.data(), n));
  }
  if (static_cast<Index>(rows.size()) < n + 2) {
    throw DataError("Gaussian dependence: need at least " + std::to_string(n + 2) +
                    " complete records, got " + std::to_string(rows.size()));
  }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  for (const auto& r : rows) mean += r;
  mean /= static_cast<double>(rows.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  for (const auto& r : rows) cov += (r - mean) * (r - mean).transpose();
  cov /= static_cast<double>(rows.size() - 1);
  return GaussianDependence(ds.covariate_names, mean, 0.5 * (cov + cov.transpose()), mode);
}

ConditionalGaussian GaussianDependence::conditional(Index i, double c_i) const {
  const Index n = num_covariates();
  check_index(i, n, "conditioning covariate");
  ConditionalGaussian out;
  out.given = i;
  out.value = c_i;
  out.others = others_of(n, i);
  const Index d = n - 1;
  out.mean.resize(d);
  out.covariance.resize(d, d);
  Eigen::VectorXd cross(d);
  for (Index p = 0; p < d; ++p) {
    const Index k = out.others[static_cast<std::size_t>(p)];
    out.mean(p) = mean_(k);
    cross(p) = cov_(k, i);
    for (Index q = 0; q < d; ++q) out.covariance(p, q) = cov_(k, out.others[static_cast<std::size_t>(q)]);
  }
  if (mode_ == Mode::kConditional) {
    out.mean += cross * ((c_i - mean_(i)) / cov_(i, i));
    out.covariance -= cross * cross.transpose() / cov_(i, i);
  }
  return out;
}

nlohmann::json GaussianDependence::to_json() const {
  return {{"format", "atlasnam-dependence"},
          {"version", kFormatVersion},
          {"model", "gaussian"},
          {"mode", mode_ == Mode::kConditional ? "conditional" : "unconditional"},
          {"covariates", names_},
          {"mean", vector_json(mean_)},
          {"covariance", matrix_json(cov_)}};
}

GaussianDependence GaussianDependence::from_json(const nlohmann::json& doc) {
  try {
    const auto names = doc.at("covariates").get<std::vector<std::string>>();
    const Index n = static_cast<Index>(names.size());
    const Eigen::MatrixXd cov = matrix_from_json(doc.at("covariance"), n);
    const auto mode_tag = doc.at("mode").get<std::string>();
    Mode mode;
    if (mode_tag == "conditional") mode = Mode::kConditional;
    else if (mode_tag == "unconditional") mode = Mode::kUnconditional;
    else throw DataError("dependence JSON: unknown mode '" + mode_tag + "'");
    return GaussianDependence(names, vector_from_json(doc.at("mean")), cov, mode);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dependence JSON: ") + e.what());
  }
}

std::unique_ptr<CovariateDependence> dependence_from_json(const nlohmann::json& doc) {
  std::string model;
  try {
    model = doc.at("model").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dependence JSON: ") + e.what());
  }
  if (model == "learned") return std::make_unique<DependenceModel>(DependenceModel::from_json(doc));
  if (model == "gaussian") {
    return std::make_unique<GaussianDependence>(GaussianDependence::from_json(doc));
  }
  throw DataError("dependence JSON: unknown model '" + model + "'");
}

// ---------------------------------------------------------------------------

DependenceObjective::DependenceObjective(DependenceModel& model, Eigen::MatrixXd normalized)
    : model_(model), data_(std::move(normalized)) {
  for (auto& net : model_.networks_) {
    grads_.push_back(Eigen::VectorXd::Zero(net.base().num_parameters()));
  }
}

std::vector<nn::ParameterBlock> DependenceObjective::parameter_blocks() {
  std::vector<nn::ParameterBlock> blocks;
  for (std::size_t k = 0; k < model_.networks_.size(); ++k) {
    blocks.push_back({&model_.networks_[k].base().parameters(), &grads_[k]});
  }
  return blocks;
}

namespace {

void gather(const Eigen::MatrixXd& data, Index i, std::span<const Index> rows, Eigen::MatrixXd& in,
            Eigen::MatrixXd& targets) {
  const Index n = data.rows();
  const Index batch = static_cast<Index>(rows.size());
  in.resize(1, batch);
  targets.resize(n - 1, batch);
  for (Index b = 0; b < batch; ++b) {
    const Index r = rows[static_cast<std::size_t>(b)];
    in(0, b) = data(i, r);
    Index p = 0;
    for (Index k = 0; k < n; ++k) {
      if (k != i) targets(p++, b) = data(k, r);
    }
  }
}

double mean_only_loss(const Eigen::MatrixXd& outputs, const Eigen::MatrixXd& targets,
                      Eigen::MatrixXd* d_outputs) {
  const Index d = targets.rows();
  const Eigen::MatrixXd resid = outputs.topRows(d) - targets;
  if (d_outputs) {
    d_outputs->setZero(outputs.rows(), outputs.cols());
    d_outputs->topRows(d) = resid;
  }
  return 0.5 * resid.squaredNorm();
}

}  // namespace

double DependenceObjective::loss_and_gradient(std::span<const Index> rows) {
  const double scale = 1.0 / static_cast<double>(rows.size());
  double total = 0.0;
  Eigen::MatrixXd in, targets, d_out;
  for (std::size_t k = 0; k < model_.networks_.size(); ++k) {
    const auto& net = model_.networks_[k];
    gather(data_, static_cast<Index>(k), rows, in, targets);
    nn::ForwardTape tape;
    const Eigen::MatrixXd out = net.forward_batch(in, tape);
    total += mean_only_ ? mean_only_loss(out, targets, &d_out)
                        : DependenceModel::batch_nll(out, targets, &d_out);
    grads_[k] = net.backward(tape, d_out * scale).parameters;
  }
  return total * scale;
}

double DependenceObjective::mean_loss(std::span<const Index> rows) const {
  double total = 0.0;
  Eigen::MatrixXd in, targets;
  for (std::size_t k = 0; k < model_.networks_.size(); ++k) {
    gather(data_, static_cast<Index>(k), rows, in, targets);
    const Eigen::MatrixXd out = model_.networks_[k].forward_batch(in);
    total += mean_only_ ? mean_only_loss(out, targets, nullptr)
                        : DependenceModel::batch_nll(out, targets, nullptr);
  }
  return total / static_cast<double>(rows.size());
}

DependenceFit fit_dependence(const Dataset& ds, const DependenceConfig& config) {
  config.validate();
  const Index n = ds.num_covariates();
  if (n < 1) throw DataError("fit_dependence: dataset has no covariates");
  Dataset visits = ds.empty_like();
  visits.spatial = false;
  std::set<std::pair<std::string, int>> seen;
  for (const auto& r : ds.records) {
    if (!r.complete()) continue;
    if (!seen.insert({r.subject_id, r.time}).second) continue;
    Record v = r;
    v.x.reset();
    visits.records.push_back(std::move(v));
  }
  if (visits.size() < n + 2) {
    throw DataError("fit_dependence: need at least " + std::to_string(n + 2) +
                    " complete records for " + std::to_string(n) + " covariates, got " +
                    std::to_string(visits.size()));
  }
  std::vector<CovariateScaling> scaling;
  for (Index i = 0; i < n; ++i) {
    std::vector<double> values;
    for (const auto& r : visits.records) values.push_back(*r.covariates[static_cast<std::size_t>(i)]);
    scaling.push_back(CovariateScaling::fit(std::move(values)));
  }
  DependenceFit fit{DependenceModel(ds.covariate_names, scaling, config, config.train.seed), {}};
  const auto moments = GaussianDependence::from_dataset(visits, GaussianDependence::Mode::kUnconditional);
  fit.model.set_moments(moments.mean(), moments.covariance());
  if (n == 1) return fit;

  auto [train, validation] =
      carve_validation(visits, config.train.validation_fraction, config.train.seed);
  Eigen::MatrixXd data(n, train.size() + validation.size());
  Index col = 0;
  for (const Dataset* part : {&train, &validation}) {
    for (const auto& r : part->records) {
      for (Index i = 0; i < n; ++i) {
        data(i, col) = scaling[static_cast<std::size_t>(i)].normalize(*r.covariates[static_cast<std::size_t>(i)]);
      }
      ++col;
    }
  }
  std::vector<Index> train_rows(static_cast<std::size_t>(train.size()));
  std::iota(train_rows.begin(), train_rows.end(), 0);
  std::vector<Index> val_rows(static_cast<std::size_t>(validation.size()));
  std::iota(val_rows.begin(), val_rows.end(), train.size());
  DependenceObjective objective(fit.model, std::move(data));
  if (config.mean_warmup_epochs > 0) {
    nn::TrainConfig warmup = config.train;
    warmup.max_epochs = config.mean_warmup_epochs;
    warmup.seed = derive_seed(config.train.seed, "dependence/warmup");
    objective.set_mean_only(true);
    nn::train_loop(objective, train_rows, val_rows, warmup);
    objective.set_mean_only(false);
  }
  fit.history = nn::train_loop(objective, train_rows, val_rows, config.train);
  return fit;
}

}  // namespace atlasnam
