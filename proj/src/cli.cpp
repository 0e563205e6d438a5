#include "atlasnam/cli.hpp"

#include "atlasnam/data.hpp"
#include "atlasnam/error.hpp"
#include "atlasnam/inference.hpp"
#include "atlasnam/metrics.hpp"
#include "atlasnam/rng.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace atlasnam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config parsing helpers

template <typename T>
T get_as(const json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

const json& object_at(const json& value, const std::string& key) {
  if (!value.is_object()) throw ConfigError("config key '" + key + "' must be an object");
  return value;
}

// TrainConfig has no seed key of its own; the CLI carries it alongside.
void parse_train(const json& doc, const std::string& where, nn::TrainConfig& cfg, bool& seeded) {
  json rest = json::object();
  for (const auto& [key, value] : object_at(doc, where).items()) {
    if (key == "seed") {
      cfg.seed = get_as<std::uint64_t>(value, where + ".seed");
      seeded = true;
    } else {
      rest[key] = value;
    }
  }
  try {
    cfg = nn::TrainConfig::from_json(rest, cfg);
  } catch (const json::exception&) {
    throw ConfigError("config section '" + where + "' has a value of the wrong type");
  }
}

json train_json(const nn::TrainConfig& cfg) {
  json doc = cfg.to_json();
  doc["seed"] = cfg.seed;
  return doc;
}

std::optional<std::string> optional_string(const json& value, const std::string& key) {
  if (value.is_null()) return std::nullopt;
  return get_as<std::string>(value, key);
}

json optional_json(const std::optional<std::string>& v) { return v ? json(*v) : json(nullptr); }
json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::uint64_t component_seed(std::uint64_t top_level, std::string_view tag) {
  return derive_seed(top_level, tag);
}

void RunConfig::reseed(std::uint64_t new_seed) {
  seed = new_seed;
  atlas.train.seed = component_seed(seed, "cli/atlas");
  dependence.train.seed = component_seed(seed, "cli/dependence");
  sampling.seed = component_seed(seed, "cli/sampling");
}

RunConfig RunConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  if (doc.contains("seed")) cfg.seed = get_as<std::uint64_t>(doc.at("seed"), "seed");
  cfg.reseed(cfg.seed);
  bool atlas_seeded = false, dependence_seeded = false;

  for (const auto& [key, value] : doc.items()) {
    if (key == "seed") {
      continue;
    } else if (key == "data") {
      cfg.data = optional_string(value, key);
    } else if (key == "covariates") {
      cfg.covariates = get_as<std::vector<std::string>>(value, key);
    } else if (key == "model") {
      cfg.model = optional_string(value, key);
    } else if (key == "dependence_model") {
      cfg.dependence_model = optional_string(value, key);
    } else if (key == "model_kind") {
      cfg.model_kind = get_as<std::string>(value, key);
    } else if (key == "priors") {
      for (const auto& [name, tag] : object_at(value, key).items()) {
        cfg.priors[name] = prior_from_string(get_as<std::string>(tag, "priors." + name));
      }
    } else if (key == "atlas") {
      for (const auto& [k, v] : object_at(value, key).items()) {
        const std::string where = "atlas." + k;
        if (k == "hidden_width") cfg.atlas.hidden_width = get_as<Index>(v, where);
        else if (k == "group_size") cfg.atlas.group_size = get_as<int>(v, where);
        else if (k == "lipschitz") cfg.atlas.lipschitz = get_as<double>(v, where);
        else if (k == "variance_floor") cfg.atlas.variance_floor = get_as<double>(v, where);
        else if (k == "train") parse_train(v, where, cfg.atlas.train, atlas_seeded);
        else throw ConfigError("unknown config key '" + where + "'");
      }
    } else if (key == "dependence") {
      for (const auto& [k, v] : object_at(value, key).items()) {
        const std::string where = "dependence." + k;
        if (k == "hidden_width") cfg.dependence.hidden_width = get_as<Index>(v, where);
        else if (k == "hidden_layers") cfg.dependence.hidden_layers = get_as<Index>(v, where);
        else if (k == "group_size") cfg.dependence.group_size = get_as<int>(v, where);
        else if (k == "lipschitz") cfg.dependence.lipschitz = get_as<double>(v, where);
        else if (k == "mean_warmup_epochs") cfg.dependence.mean_warmup_epochs = get_as<int>(v, where);
        else if (k == "train") parse_train(v, where, cfg.dependence.train, dependence_seeded);
        else throw ConfigError("unknown config key '" + where + "'");
      }
    } else if (key == "pair_priors") {
      if (!value.is_array()) throw ConfigError("config key 'pair_priors' must be an array");
      for (const auto& p : value) {
        NamedPairPrior prior;
        for (const auto& [k, v] : object_at(p, key).items()) {
          if (k == "given") prior.given = get_as<std::string>(v, "pair_priors.given");
          else if (k == "target") prior.target = get_as<std::string>(v, "pair_priors.target");
          else if (k == "sign") prior.sign = get_as<int>(v, "pair_priors.sign");
          else throw ConfigError("unknown config key 'pair_priors." + k + "'");
        }
        cfg.pair_priors.push_back(prior);
      }
    } else if (key == "impute_missing") {
      cfg.impute_missing = get_as<bool>(value, key);
    } else if (key == "sampling") {
      json sampling = object_at(value, key);
      if (!sampling.contains("seed")) sampling["seed"] = cfg.sampling.seed;
      try {
        cfg.sampling = SamplingConfig::from_json(sampling, cfg.sampling);
      } catch (const json::exception&) {
        throw ConfigError("config section 'sampling' has a value of the wrong type");
      }
    } else if (key == "covariate") {
      cfg.covariate = optional_string(value, key);
    } else if (key == "x") {
      if (!value.is_null()) cfg.x = get_as<double>(value, key);
    } else if (key == "use_dependence") {
      cfg.use_dependence = get_as<bool>(value, key);
    } else if (key == "grid_points") {
      cfg.grid_points = get_as<Index>(value, key);
    } else if (key == "grid_min") {
      if (!value.is_null()) cfg.grid_min = get_as<double>(value, key);
    } else if (key == "grid_max") {
      if (!value.is_null()) cfg.grid_max = get_as<double>(value, key);
    } else if (key == "threads") {
      cfg.threads = get_as<unsigned>(value, key);
    } else if (key == "generator") {
      cfg.generator = get_as<std::string>(value, key);
    } else if (key == "samples") {
      cfg.samples = get_as<Index>(value, key);
    } else if (key == "noise_variance") {
      cfg.noise_variance = get_as<double>(value, key);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

json RunConfig::to_json() const {
  json priors_doc = json::object();
  for (const auto& [name, prior] : priors) priors_doc[name] = atlasnam::to_string(prior);
  json pairs = json::array();
  for (const auto& p : pair_priors) pairs.push_back({{"given", p.given}, {"target", p.target}, {"sign", p.sign}});
  return {
      {"seed", seed},
      {"data", optional_json(data)},
      {"covariates", covariates},
      {"model", optional_json(model)},
      {"dependence_model", optional_json(dependence_model)},
      {"model_kind", model_kind},
      {"priors", priors_doc},
      {"atlas",
       {{"hidden_width", atlas.hidden_width},
        {"group_size", atlas.group_size},
        {"lipschitz", atlas.lipschitz},
        {"variance_floor", atlas.variance_floor},
        {"train", train_json(atlas.train)}}},
      {"dependence",
       {{"hidden_width", dependence.hidden_width},
        {"hidden_layers", dependence.hidden_layers},
        {"group_size", dependence.group_size},
        {"lipschitz", dependence.lipschitz},
        {"mean_warmup_epochs", dependence.mean_warmup_epochs},
        {"train", train_json(dependence.train)}}},
      {"pair_priors", pairs},
      {"impute_missing", impute_missing},
      {"sampling", sampling.to_json()},
      {"covariate", optional_json(covariate)},
      {"x", optional_json(x)},
      {"use_dependence", use_dependence},
      {"grid_points", grid_points},
      {"grid_min", optional_json(grid_min)},
      {"grid_max", optional_json(grid_max)},
      {"threads", threads},
      {"generator", generator},
      {"samples", samples},
      {"noise_variance", noise_variance},
  };
}

void RunConfig::validate() const {
  atlas.validate();
  dependence.validate();
  sampling.validate();
  if (model_kind != "additive" && model_kind != "joint_mlp") {
    throw ConfigError("model_kind must be 'additive' or 'joint_mlp', got '" + model_kind + "'");
  }
  if (grid_points < 1) throw ConfigError("grid_points must be >= 1");
  if (grid_min && grid_max && !(*grid_min < *grid_max)) throw ConfigError("grid_min must be < grid_max");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  for (const auto& p : pair_priors) {
    if (p.sign != 1 && p.sign != -1) throw ConfigError("pair prior sign must be +1 or -1");
  }
}

namespace {

// ---------------------------------------------------------------------------
// Outputs

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int k = 0; k < length; ++k) {
    out += hex[digest[k] >> 4];
    out += hex[digest[k] & 0xf];
  }
  return out;
}

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(std::string("cannot open ") + what + " '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

json read_json(const std::string& path, const char* what) {
  const std::string text = read_file(path, what);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + " '" + path + "' is not valid JSON: " + e.what());
  }
}

// Tracks files written by a command and deletes them unless committed.
class Outputs {
 public:
  Outputs() = default;
  Outputs(const Outputs&) = delete;
  Outputs& operator=(const Outputs&) = delete;
  ~Outputs() {
    if (committed_) return;
    std::error_code ec;
    for (auto it = files_.rbegin(); it != files_.rend(); ++it) fs::remove(*it, ec);
    for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) {
      if (fs::is_empty(*it, ec)) fs::remove(*it, ec);
    }
  }

  void ensure_dir(const fs::path& dir) {
    if (dir.empty() || fs::exists(dir)) return;
    ensure_dir(dir.parent_path());
    std::error_code ec;
    if (!fs::create_directory(dir, ec) && !fs::is_directory(dir)) {
      throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
    }
    dirs_.push_back(dir);
  }

  void write(const fs::path& path, const std::string& content) {
    ensure_dir(path.parent_path());
    files_.push_back(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
    out.close();
    if (!out) throw Error("cannot write '" + path.string() + "'");
  }

  void commit() { committed_ = true; }

 private:
  std::vector<fs::path> files_;
  std::vector<fs::path> dirs_;
  bool committed_ = false;
};

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

fs::path sidecar_path(const fs::path& output) {
  fs::path p = output;
  p.replace_extension(".json");
  if (p == output) p += ".sidecar.json";
  return p;
}

json file_record(const std::string& path) {
  return {{"path", path}, {"sha256", sha256_hex(read_file(path, "input"))}};
}

std::string history_csv(const nn::TrainHistory& history) {
  std::ostringstream out;
  out << "epoch,learning_rate,train_loss,validation_loss\n";
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << format_double(e.learning_rate) << ',' << format_double(e.train_loss)
        << ',' << format_double(e.validation_loss) << '\n';
  }
  return out.str();
}

json history_summary(const nn::TrainHistory& history) {
  return {{"initial_validation_loss", history.epochs.front().validation_loss},
          {"best_validation_loss", history.best_validation_loss},
          {"best_epoch", history.best_epoch},
          {"epochs_run", static_cast<int>(history.epochs.size()) - 1},
          {"stopped_early", history.stopped_early}};
}

// ---------------------------------------------------------------------------
// Shared loading

const std::string& require(const std::optional<std::string>& value, const char* flag) {
  if (!value || value->empty()) throw ConfigError(std::string("missing required input ") + flag);
  return *value;
}

Dataset load_data(const RunConfig& cfg) {
  return load_csv(require(cfg.data, "--data"), CsvSchema{cfg.covariates});
}

std::unique_ptr<PredictiveModel> load_model(const std::string& path) {
  const json doc = read_json(path, "model file");
  try {
    return predictive_model_from_json(doc);
  } catch (const json::exception& e) {
    throw DataError("model file '" + path + "' is malformed: " + e.what());
  }
}

std::unique_ptr<CovariateDependence> load_dependence(const std::string& path) {
  return dependence_from_json(read_json(path, "dependence model file"));
}

std::vector<MonotonePrior> resolve_priors(const RunConfig& cfg, const Dataset& ds) {
  std::vector<MonotonePrior> priors(static_cast<std::size_t>(ds.num_covariates()), MonotonePrior::kNone);
  for (const auto& [name, prior] : cfg.priors) {
    priors[static_cast<std::size_t>(ds.covariate_index(name))] = prior;
  }
  return priors;
}

DependenceConfig resolve_dependence(const RunConfig& cfg, const Dataset& ds) {
  DependenceConfig dep = cfg.dependence;
  dep.pair_priors.clear();
  for (const auto& p : cfg.pair_priors) {
    dep.pair_priors.push_back({ds.covariate_index(p.given), ds.covariate_index(p.target), p.sign});
  }
  return dep;
}

std::vector<std::optional<double>> parse_values(const std::string& text, const char* flag) {
  std::vector<std::optional<double>> values;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = text.find(',', start);
    std::string cell = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    cell.erase(0, cell.find_first_not_of(" \t"));
    cell.erase(cell.find_last_not_of(" \t") + 1);
    if (cell.empty()) {
      values.emplace_back();
    } else {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw ConfigError(std::string(flag) + ": '" + cell + "' is not a number");
      }
      values.emplace_back(v);
    }
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return values;
}

std::vector<double> parse_complete(const std::string& text, const char* flag, Index expected) {
  const auto values = parse_values(text, flag);
  if (static_cast<Index>(values.size()) != expected) {
    throw ConfigError(std::string(flag) + ": expected " + std::to_string(expected) + " values, got " +
                      std::to_string(values.size()));
  }
  std::vector<double> out;
  for (const auto& v : values) {
    if (!v) throw ConfigError(std::string(flag) + ": missing value (impute first)");
    out.push_back(*v);
  }
  return out;
}

// Location is required iff the model is spatial.
void check_location_flag(const ModelSchema& schema, std::optional<double> x) {
  if (!schema.spatial && x) throw ConfigError("model is not spatial: --x must not be given");
  schema.check_location(x);
}

json gaussian_json(const GaussianParams& g) { return {{"mean", g.mean}, {"variance", g.variance}}; }

// ---------------------------------------------------------------------------
// Commands

Dataset generate(const RunConfig& cfg) {
  const std::uint64_t seed = component_seed(cfg.seed, "cli/gen");
  if (cfg.generator == "toy") return gen_toy_dependent(cfg.samples, seed);
  if (cfg.generator == "spatial") return gen_spatial_population(cfg.samples, seed);
  if (cfg.generator == "heteroscedastic") return gen_heteroscedastic(cfg.samples, seed);
  if (cfg.generator == "independent") return gen_independent(cfg.samples, seed);
  if (cfg.generator == "imputation") return gen_imputation_benchmark(cfg.samples, cfg.noise_variance, seed);
  throw ConfigError("unknown generator '" + cfg.generator +
                    "' (expected toy, spatial, heteroscedastic, independent, imputation)");
}

void cmd_gen_data(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
  const Dataset ds = generate(cfg);
  std::ostringstream csv;
  write_csv(ds, csv);
  Outputs outputs;
  outputs.write(out_path, csv.str());
  json landmarks = json::array();
  for (const auto& l : ds.landmarks) landmarks.push_back({{"name", l.name}, {"x", l.x}});
  outputs.write(sidecar_path(out_path),
                dump({{"records", ds.size()}, {"landmarks", landmarks}, {"resolved_config", cfg.to_json()}}));
  outputs.commit();
  out << "wrote " << ds.size() << " records to " << out_path << "\n";
}

void cmd_train(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  const Dataset ds = load_data(cfg);
  auto [train, validation] = carve_validation(ds, cfg.atlas.train.validation_fraction, cfg.atlas.train.seed);
  Outputs outputs;
  outputs.ensure_dir(out_dir);
  const fs::path dir(out_dir);
  nn::TrainHistory history;
  std::unique_ptr<PredictiveModel> model;
  std::optional<DependenceModel> dependence;

  if (cfg.model_kind == "joint_mlp") {
    if (!cfg.priors.empty()) throw ConfigError("monotone priors need model_kind 'additive'");
    if (cfg.impute_missing) throw ConfigError("impute_missing needs model_kind 'additive'");
    auto fit = fit_joint_mlp(train, validation, cfg.atlas);
    history = fit.history;
    model = std::make_unique<JointMlpModel>(std::move(fit.model));
  } else if (cfg.impute_missing) {
    auto fit = fit_atlas_with_imputation(train, validation, cfg.atlas, resolve_priors(cfg, ds),
                                         resolve_dependence(cfg, ds));
    history = fit.atlas.history;
    model = std::make_unique<AtlasModel>(std::move(fit.atlas.model));
    dependence = std::move(fit.dependence.model);
    out << "imputed " << fit.imputed_records << " incomplete records\n";
  } else {
    auto fit = fit_atlas(train, validation, cfg.atlas, resolve_priors(cfg, ds));
    history = fit.history;
    model = std::make_unique<AtlasModel>(std::move(fit.model));
  }

  const Dataset scored = dependence ? impute_dataset(*dependence, validation) : validation;
  json metrics = history_summary(history);
  metrics["validation"] = evaluate(*model, scored).to_json();

  outputs.write(dir / "model.json", dump(model->to_json()));
  if (dependence) outputs.write(dir / "dependence.json", dump(dependence->to_json()));
  outputs.write(dir / "loss_history.csv", history_csv(history));
  outputs.write(dir / "metrics.json", dump(metrics));
  outputs.write(dir / "resolved_config.json", dump(cfg.to_json()));
  outputs.commit();
  out << "trained " << cfg.model_kind << " model: validation loss " << history.epochs.front().validation_loss
      << " -> " << history.best_validation_loss << " (epoch " << history.best_epoch << ")\n";
}

void cmd_train_dependence(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  const Dataset ds = load_data(cfg);
  const auto fit = fit_dependence(ds, resolve_dependence(cfg, ds));
  Outputs outputs;
  outputs.ensure_dir(out_dir);
  const fs::path dir(out_dir);
  outputs.write(dir / "dependence.json", dump(fit.model.to_json()));
  json metrics = json::object();
  if (!fit.history.epochs.empty()) {
    outputs.write(dir / "dependence_loss_history.csv", history_csv(fit.history));
    metrics = history_summary(fit.history);
  }
  outputs.write(dir / "dependence_metrics.json", dump(metrics));
  outputs.write(dir / "resolved_config.json", dump(cfg.to_json()));
  outputs.commit();
  out << "trained dependence model on " << ds.num_covariates() << " covariates\n";
}

void cmd_eval(const RunConfig& cfg, const std::vector<std::string>& landmark_flags,
              const std::optional<std::string>& out_path, std::ostream& out) {
  const auto model = load_model(require(cfg.model, "--model"));
  Dataset ds = load_data(cfg);
  for (const auto& flag : landmark_flags) {
    const auto eq = flag.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--landmark expects name=x, got '" + flag + "'");
    const auto value = parse_values(flag.substr(eq + 1), "--landmark");
    if (value.size() != 1 || !value[0]) throw ConfigError("--landmark expects name=x, got '" + flag + "'");
    ds.landmarks.push_back({flag.substr(0, eq), *value[0]});
  }
  const EvalReport report = evaluate(*model, ds);
  out << report.to_text();
  if (out_path) {
    Outputs outputs;
    json doc = report.to_json();
    doc["resolved_config"] = cfg.to_json();
    outputs.write(*out_path, dump(doc));
    outputs.commit();
  }
}

void cmd_marginalize(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
  const std::string& model_path = require(cfg.model, "--model");
  const auto loaded = load_model(model_path);
  const auto* atlas = dynamic_cast<const AtlasModel*>(loaded.get());
  if (!atlas) throw ConfigError("marginalization needs an additive model, '" + model_path + "' is not one");
  const std::string& name = require(cfg.covariate, "--covariate");
  const auto& names = atlas->schema().covariate_names;
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown covariate '" + name + "'");
  const Index i = it - names.begin();
  check_location_flag(atlas->schema(), cfg.x);

  std::unique_ptr<CovariateDependence> dep;
  json dep_record = nullptr;
  if (cfg.dependence_model) {
    dep = load_dependence(*cfg.dependence_model);
    dep_record = file_record(*cfg.dependence_model);
    if (!cfg.use_dependence) {
      if (const auto* learned = dynamic_cast<const DependenceModel*>(dep.get())) {
        dep = std::make_unique<GaussianDependence>(learned->unconditional());
      } else if (const auto* gauss = dynamic_cast<const GaussianDependence*>(dep.get())) {
        dep = std::make_unique<GaussianDependence>(gauss->covariate_names(), gauss->mean(),
                                                   gauss->covariance(), GaussianDependence::Mode::kUnconditional);
      }
    }
  } else if (!cfg.use_dependence && cfg.data) {
    dep = std::make_unique<GaussianDependence>(
        GaussianDependence::from_dataset(load_data(cfg), GaussianDependence::Mode::kUnconditional));
    dep_record = file_record(*cfg.data);
  } else {
    throw ConfigError("missing required input --dependence-model (or --data with --dependence off)");
  }

  std::vector<double> grid = default_grid(atlas->schema(), i, cfg.grid_points);
  if (cfg.grid_min || cfg.grid_max) {
    const double lo = cfg.grid_min.value_or(grid.front());
    const double hi = cfg.grid_max.value_or(grid.back());
    if (!(lo < hi)) throw ConfigError("grid_min must be < grid_max");
    for (Index g = 0; g < cfg.grid_points; ++g) {
      const double t = cfg.grid_points == 1 ? 0.5 : static_cast<double>(g) / static_cast<double>(cfg.grid_points - 1);
      grid[static_cast<std::size_t>(g)] = lo + t * (hi - lo);
    }
  }
  const MarginalCurve curve = marginal_curve(*atlas, *dep, i, cfg.x, grid, cfg.sampling, cfg.threads);
  std::ostringstream csv;
  write_curve_csv(curve, csv);

  Outputs outputs;
  outputs.write(out_path, csv.str());
  const json sidecar = {
      {"covariate", name},
      {"covariate_index", i},
      {"x", optional_json(cfg.x)},
      {"dependence", cfg.use_dependence ? "on" : "off"},
      {"grid_points", grid.size()},
      {"sampling", cfg.sampling.to_json()},
      {"columns",
       {{"c_i", "grid value of the covariate"},
        {"mu", "marginal mean E[y | c_i, x]"},
        {"var_E", "expected variance E[f^v | c_i]"},
        {"var_V", "variance of the conditional mean Var(f^m | c_i)"},
        {"var_total", "var_E + var_V"},
        {"se_mu", "Monte Carlo standard error of mu"},
        {"se_var_E", "Monte Carlo standard error of var_E"},
        {"se_var_V", "Monte Carlo standard error of var_V"}}},
      {"inputs", {{"model", file_record(model_path)}, {"dependence", dep_record}}},
      {"resolved_config", cfg.to_json()},
  };
  outputs.write(sidecar_path(out_path), dump(sidecar));
  outputs.commit();
  out << "wrote " << grid.size() << " grid points for " << name << " to " << out_path << "\n";
}

void cmd_impute(const RunConfig& cfg, const std::optional<std::string>& values,
                const std::optional<std::string>& out_path, std::ostream& out) {
  const auto dep = load_dependence(require(cfg.dependence_model, "--dependence-model"));
  if (values) {
    if (cfg.data || out_path) throw ConfigError("--values cannot be combined with --data or --out");
    const Imputation imp = impute(*dep, parse_values(*values, "--values"));
    json entries = json::array();
    for (const auto& e : imp.imputed) {
      entries.push_back({{"covariate", dep->covariate_names()[static_cast<std::size_t>(e.covariate)]},
                         {"source", dep->covariate_names()[static_cast<std::size_t>(e.source)]},
                         {"value", e.value},
                         {"variance", e.variance}});
    }
    json named = json::object();
    for (std::size_t k = 0; k < imp.covariates.size(); ++k) named[dep->covariate_names()[k]] = imp.covariates[k];
    out << dump({{"covariates", named}, {"imputed", entries}});
    return;
  }
  if (!out_path) throw ConfigError("missing required input --out (or use --values)");
  Index count = 0;
  const Dataset filled = impute_dataset(*dep, load_data(cfg), &count);
  std::ostringstream csv;
  write_csv(filled, csv);
  Outputs outputs;
  outputs.write(*out_path, csv.str());
  outputs.write(sidecar_path(*out_path), dump({{"imputed_records", count},
                                               {"inputs", {{"dependence", file_record(*cfg.dependence_model)},
                                                           {"data", file_record(*cfg.data)}}},
                                               {"resolved_config", cfg.to_json()}}));
  outputs.commit();
  out << "imputed " << count << " of " << filled.size() << " records\n";
}

std::vector<double> json_covariates(const json& doc, const char* key, Index expected) {
  if (!doc.contains(key)) throw ConfigError(std::string("prediction input lacks '") + key + "'");
  const auto values = get_as<std::vector<double>>(doc.at(key), key);
  if (static_cast<Index>(values.size()) != expected) {
    throw ConfigError(std::string(key) + ": expected " + std::to_string(expected) + " values, got " +
                      std::to_string(values.size()));
  }
  return values;
}

struct PredictInput {
  std::optional<std::string> file;
  std::optional<std::string> current, next;
  std::optional<double> response;
};

void cmd_predict_individual(const RunConfig& cfg, const PredictInput& in, std::ostream& out) {
  const auto model = load_model(require(cfg.model, "--model"));
  const Index n = model->schema().num_covariates();
  SubjectObservation obs;
  std::vector<double> next;
  if (in.file) {
    if (in.current || in.next || in.response) {
      throw ConfigError("--input cannot be combined with --covariates, --next or --response");
    }
    const json doc = read_json(*in.file, "prediction input");
    if (!doc.is_object()) throw ConfigError("prediction input must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
      if (key != "covariates_t" && key != "y_t" && key != "covariates_next" && key != "x") {
        throw ConfigError("unknown prediction input key '" + key + "'");
      }
    }
    obs.covariates = json_covariates(doc, "covariates_t", n);
    next = json_covariates(doc, "covariates_next", n);
    if (!doc.contains("y_t")) throw ConfigError("prediction input lacks 'y_t'");
    obs.response = get_as<double>(doc.at("y_t"), "y_t");
    if (doc.contains("x") && !doc.at("x").is_null()) obs.x = get_as<double>(doc.at("x"), "x");
    if (cfg.x) obs.x = cfg.x;
  } else {
    if (!in.current || !in.next || !in.response) {
      throw ConfigError("predict-individual needs --input, or all of --covariates, --next and --response");
    }
    obs.covariates = parse_complete(*in.current, "--covariates", n);
    next = parse_complete(*in.next, "--next", n);
    obs.response = *in.response;
    obs.x = cfg.x;
  }
  check_location_flag(model->schema(), obs.x);
  const auto pred = individualized_predict(*model, obs, next);
  out << dump({{"y_next", pred.response},
               {"percentile", pred.percentile},
               {"current", gaussian_json(pred.current)},
               {"next", gaussian_json(pred.next)},
               {"large_change", pred.large_change}});
}

// Routes spdlog output to the caller's error stream for the duration of a run.
class LogRedirect {
 public:
  LogRedirect(std::ostream& err, spdlog::level::level_enum level) : previous_(spdlog::default_logger()) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    sink->set_pattern("[%l] %v");
    auto logger = std::make_shared<spdlog::logger>("atlasnam-cli", sink);
    logger->set_level(level);
    spdlog::set_default_logger(logger);
  }
  ~LogRedirect() { spdlog::set_default_logger(previous_); }

 private:
  std::shared_ptr<spdlog::logger> previous_;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Uncertainty-aware additive atlas regression", "atlasnam"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::optional<std::string> config_path, data, model, dependence_model, covariate, out_path, values;
  std::optional<std::string> model_kind, method, generator, dependence_switch;
  std::optional<std::uint64_t> seed;
  PredictInput predict_input;
  std::optional<double> x, grid_min, grid_max, noise_variance;
  std::optional<Index> samples, grid_points, n_records;
  std::optional<unsigned> threads;
  std::vector<std::string> prior_flags, landmark_flags;
  bool impute_missing = false;
  std::string log_level = "warn";
  std::string out_dir;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration (unknown keys are rejected)");
    sub->add_option("--seed", seed, "Top-level seed; every sub-computation seed is derived from it");
    sub->add_option("--log-level", log_level, "trace, debug, info, warn, error, off")->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV");
  common(gen);
  gen->add_option("--kind", generator, "toy, spatial, heteroscedastic, independent, imputation");
  gen->add_option("--n", n_records, "Records (subjects for the spatial generator)");
  gen->add_option("--noise-variance", noise_variance, "Noise variance of c2 for the imputation generator");
  gen->add_option("--out", out_path, "Output CSV")->required();

  auto* train = app.add_subcommand("train", "Train an atlas model");
  common(train);
  train->add_option("--data", data, "Training CSV");
  train->add_option("--out-dir", out_dir, "Directory for model.json, loss_history.csv, metrics.json")->required();
  train->add_option("--model-kind", model_kind, "additive or joint_mlp");
  train->add_option("--prior", prior_flags, "Monotone prior name=increasing|decreasing (repeatable)");
  train->add_flag("--impute-missing", impute_missing, "Impute incomplete records with a dependence model first");

  auto* train_dep = app.add_subcommand("train-dependence", "Train the covariate dependence networks");
  common(train_dep);
  train_dep->add_option("--data", data, "Training CSV");
  train_dep->add_option("--out-dir", out_dir, "Directory for dependence.json")->required();

  auto* eval = app.add_subcommand("eval", "Score a model on a dataset (MARPD, NLL, ECE, coverage)");
  common(eval);
  eval->add_option("--model", model, "Model JSON");
  eval->add_option("--data", data, "Evaluation CSV");
  eval->add_option("--landmark", landmark_flags, "Named location name=x for per-landmark rows (repeatable)");
  eval->add_option("--out", out_path, "Optional JSON report");

  auto* marg = app.add_subcommand("marginalize", "Marginal response curve of one covariate");
  common(marg);
  marg->add_option("--model", model, "Additive model JSON");
  marg->add_option("--dependence-model", dependence_model, "Dependence model JSON");
  marg->add_option("--data", data, "CSV for covariate moments when --dependence off and no dependence model");
  marg->add_option("--covariate", covariate, "Covariate name");
  marg->add_option("--x", x, "Location in [0, 1]; required iff the model is spatial");
  marg->add_option("--dependence", dependence_switch, "on or off")->check(CLI::IsMember({"on", "off"}));
  marg->add_option("--grid-points", grid_points, "Grid size (default 200)");
  marg->add_option("--grid-min", grid_min, "Grid start (default: training minimum)");
  marg->add_option("--grid-max", grid_max, "Grid end (default: training maximum)");
  marg->add_option("--samples", samples, "Monte Carlo draws per grid point (even, >= 100)");
  marg->add_option("--method", method, "monte_carlo or gauss_hermite");
  marg->add_option("--threads", threads, "Worker threads (results do not depend on it)");
  marg->add_option("--out", out_path, "Output CSV; a JSON sidecar is written next to it")->required();

  auto* imp = app.add_subcommand("impute", "Fill missing covariates from the dependence model");
  common(imp);
  imp->add_option("--dependence-model", dependence_model, "Dependence model JSON");
  imp->add_option("--data", data, "CSV with missing cells");
  imp->add_option("--out", out_path, "Output CSV");
  imp->add_option("--values", values, "One comma-separated row, empty cells missing; prints JSON");

  auto* pred = app.add_subcommand("predict-individual", "Next-visit prediction at a fixed population percentile");
  common(pred);
  pred->add_option("--model", model, "Model JSON");
  pred->add_option("--input", predict_input.file, "JSON {covariates_t, y_t, covariates_next, x}");
  pred->add_option("--covariates", predict_input.current, "Current covariates, comma-separated");
  pred->add_option("--next", predict_input.next, "Next-visit covariates, comma-separated");
  pred->add_option("--response", predict_input.response, "Current response y^t");
  pred->add_option("--x", x, "Location in [0, 1] for spatial models");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  const auto level = spdlog::level::from_str(log_level);
  LogRedirect redirect(err, level);
  try {
    if (level == spdlog::level::off && log_level != "off") throw ConfigError("unknown --log-level '" + log_level + "'");
    RunConfig cfg = config_path ? RunConfig::from_json(read_json(*config_path, "config file")) : RunConfig{};
    if (seed) cfg.reseed(*seed);
    if (data) cfg.data = data;
    if (model) cfg.model = model;
    if (dependence_model) cfg.dependence_model = dependence_model;
    if (covariate) cfg.covariate = covariate;
    if (x) cfg.x = x;
    if (model_kind) cfg.model_kind = *model_kind;
    if (impute_missing) cfg.impute_missing = true;
    if (dependence_switch) cfg.use_dependence = *dependence_switch == "on";
    if (grid_points) cfg.grid_points = *grid_points;
    if (grid_min) cfg.grid_min = grid_min;
    if (grid_max) cfg.grid_max = grid_max;
    if (samples) cfg.sampling.samples = *samples;
    if (method) cfg.sampling.method = integration_method_from_string(*method);
    if (threads) cfg.threads = *threads;
    if (generator) cfg.generator = *generator;
    if (n_records) cfg.samples = *n_records;
    if (noise_variance) cfg.noise_variance = *noise_variance;
    for (const auto& flag : prior_flags) {
      const auto eq = flag.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--prior expects name=increasing|decreasing");
      cfg.priors[flag.substr(0, eq)] = prior_from_string(flag.substr(eq + 1));
    }
    cfg.validate();

    if (gen->parsed()) cmd_gen_data(cfg, *out_path, out);
    else if (train->parsed()) cmd_train(cfg, out_dir, out);
    else if (train_dep->parsed()) cmd_train_dependence(cfg, out_dir, out);
    else if (eval->parsed()) cmd_eval(cfg, landmark_flags, out_path, out);
    else if (marg->parsed()) cmd_marginalize(cfg, *out_path, out);
    else if (imp->parsed()) cmd_impute(cfg, values, out_path, out);
    else if (pred->parsed()) cmd_predict_individual(cfg, predict_input, out);
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace atlasnam::cli
