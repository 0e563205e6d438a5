#include "atlasnam/atlas.hpp"
#include "atlasnam/cli.hpp"
#include "atlasnam/data.hpp"
#include "atlasnam/dependence.hpp"
#include "atlasnam/error.hpp"
#include "atlasnam/gaussian.hpp"
#include "atlasnam/inference.hpp"
#include "atlasnam/marginal.hpp"
#include "atlasnam/metrics.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cmath>
#include <limits>
#include <sstream>

namespace py = pybind11;
using namespace atlasnam;
using nlohmann::json;

namespace {

// Python dicts cross the boundary as JSON text so the C++ validation (unknown
// keys, ranges) applies unchanged.
json to_json_doc(const py::object& obj) {
  if (obj.is_none()) return json::object();
  const auto dumps = py::module_::import("json").attr("dumps");
  return json::parse(dumps(obj).cast<std::string>());
}

py::object from_json_doc(const json& doc) {
  return py::module_::import("json").attr("loads")(doc.dump());
}

cli::RunConfig run_config(const py::object& config) { return cli::RunConfig::from_json(to_json_doc(config)); }

std::vector<MonotonePrior> resolve_priors(const Dataset& ds, const std::map<std::string, std::string>& priors) {
  std::vector<MonotonePrior> out(static_cast<std::size_t>(ds.num_covariates()), MonotonePrior::kNone);
  for (const auto& [name, tag] : priors) out[static_cast<std::size_t>(ds.covariate_index(name))] = prior_from_string(tag);
  return out;
}

DependenceConfig dependence_config(const Dataset& ds, const cli::RunConfig& cfg) {
  DependenceConfig dep = cfg.dependence;
  for (const auto& p : cfg.pair_priors) {
    dep.pair_priors.push_back({ds.covariate_index(p.given), ds.covariate_index(p.target), p.sign});
  }
  return dep;
}

Eigen::MatrixXd covariate_matrix(const Dataset& ds) {
  Eigen::MatrixXd m(ds.size(), ds.num_covariates());
  for (Index r = 0; r < ds.size(); ++r) {
    const auto& rec = ds.records[static_cast<std::size_t>(r)];
    for (Index k = 0; k < ds.num_covariates(); ++k) {
      const auto& v = rec.covariates[static_cast<std::size_t>(k)];
      m(r, k) = v ? *v : std::numeric_limits<double>::quiet_NaN();
    }
  }
  return m;
}

py::dict curve_dict(const MarginalCurve& curve) {
  const auto n = static_cast<Index>(curve.grid.size());
  Eigen::VectorXd mu(n), var_e(n), var_v(n), se_mu(n), se_e(n), se_v(n);
  for (Index g = 0; g < n; ++g) {
    const auto& p = curve.points[static_cast<std::size_t>(g)];
    mu(g) = p.mean;
    var_e(g) = p.var_expected;
    var_v(g) = p.var_of_mean;
    se_mu(g) = p.se_mean;
    se_e(g) = p.se_var_expected;
    se_v(g) = p.se_var_of_mean;
  }
  py::dict d;
  d["covariate"] = curve.covariate_name;
  d["x"] = curve.x;
  d["c_i"] = Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(curve.grid.data(), n));
  d["mu"] = mu;
  d["var_E"] = var_e;
  d["var_V"] = var_v;
  d["var_total"] = Eigen::VectorXd(var_e + var_v);
  d["se_mu"] = se_mu;
  d["se_var_E"] = se_e;
  d["se_var_V"] = se_v;
  return d;
}

std::vector<GaussianParams> params_from(const Eigen::VectorXd& mean, const Eigen::VectorXd& variance) {
  if (mean.size() != variance.size()) throw ConfigError("mean and variance lengths differ");
  std::vector<GaussianParams> out;
  for (Index k = 0; k < mean.size(); ++k) out.push_back({mean(k), variance(k)});
  return out;
}

std::vector<double> as_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Uncertainty-aware neural additive atlas models";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<GaussianParams>(m, "GaussianParams")
      .def(py::init<double, double>(), py::arg("mean") = 0.0, py::arg("variance") = 1.0)
      .def_readwrite("mean", &GaussianParams::mean)
      .def_readwrite("variance", &GaussianParams::variance)
      .def_property_readonly("stddev", &GaussianParams::stddev)
      .def("__repr__", [](const GaussianParams& g) {
        std::ostringstream s;
        s << "GaussianParams(mean=" << g.mean << ", variance=" << g.variance << ")";
        return s.str();
      });

  m.def("nll_loss", [](double mean, double variance, double y) { return nll_loss({mean, variance}, y); },
        py::arg("mean"), py::arg("variance"), py::arg("y"), "Gaussian negative log-likelihood of one observation.");
  m.def("gaussian_cdf", [](double y, double mean, double variance) { return gaussian_cdf(y, {mean, variance}); },
        py::arg("y"), py::arg("mean"), py::arg("variance"));

  // Data.
  py::class_<Dataset>(m, "Dataset")
      .def_readonly("covariate_names", &Dataset::covariate_names)
      .def_readonly("spatial", &Dataset::spatial)
      .def("__len__", &Dataset::size)
      .def("covariates", &covariate_matrix, "Rows x covariates; missing entries are NaN.")
      .def("responses",
           [](const Dataset& ds) {
             Eigen::VectorXd y(ds.size());
             for (Index r = 0; r < ds.size(); ++r) y(r) = ds.records[static_cast<std::size_t>(r)].response;
             return y;
           })
      .def("locations",
           [](const Dataset& ds) {
             Eigen::VectorXd x = Eigen::VectorXd::Constant(ds.size(), std::numeric_limits<double>::quiet_NaN());
             for (Index r = 0; r < ds.size(); ++r) {
               const auto& v = ds.records[static_cast<std::size_t>(r)].x;
               if (v) x(r) = *v;
             }
             return x;
           })
      .def("subjects", &Dataset::subjects)
      .def("landmarks", [](const Dataset& ds) {
        std::map<std::string, double> out;
        for (const auto& l : ds.landmarks) out[l.name] = l.x;
        return out;
      });

  m.def("load_csv", [](const std::filesystem::path& path, std::vector<std::string> covariates) {
    return load_csv(path, CsvSchema{std::move(covariates)});
  }, py::arg("path"), py::arg("covariates") = std::vector<std::string>{});
  m.def("write_csv", py::overload_cast<const Dataset&, const std::filesystem::path&>(&write_csv), py::arg("dataset"),
        py::arg("path"));
  m.def("gen_toy_dependent", &gen_toy_dependent, py::arg("n"), py::arg("seed"));
  m.def("gen_spatial_population", &gen_spatial_population, py::arg("n_subjects"), py::arg("seed"));
  m.def("gen_heteroscedastic", &gen_heteroscedastic, py::arg("n"), py::arg("seed"));
  m.def("gen_independent", &gen_independent, py::arg("n"), py::arg("seed"));
  m.def("gen_imputation_benchmark", &gen_imputation_benchmark, py::arg("n"), py::arg("noise_variance"),
        py::arg("seed"));
  m.def("carve_validation", &carve_validation, py::arg("dataset"), py::arg("fraction"), py::arg("seed"));

  // Models.
  py::class_<PredictiveModel>(m, "PredictiveModel")
      .def_property_readonly("covariate_names", [](const PredictiveModel& p) { return p.schema().covariate_names; })
      .def_property_readonly("spatial", [](const PredictiveModel& p) { return p.schema().spatial; })
      .def("predict",
           [](const PredictiveModel& p, std::vector<std::optional<double>> c, std::optional<double> x) {
             return p.predict(c, x);
           },
           py::arg("covariates"), py::arg("x") = std::nullopt)
      .def("predict_batch",
           [](const PredictiveModel& p, const Eigen::MatrixXd& c, std::optional<Eigen::VectorXd> x) {
             const Eigen::VectorXd loc = x ? *x : Eigen::VectorXd::Zero(c.rows());
             if (loc.size() != c.rows()) throw ConfigError("x must have one entry per row");
             Eigen::VectorXd mean, variance;
             p.predict_batch(c.transpose(), loc, mean, variance);
             return py::make_tuple(mean, variance);
           },
           py::arg("covariates"), py::arg("x") = std::nullopt, "Rows x covariates in; (mean, variance) arrays out.")
      .def("to_json", [](const PredictiveModel& p) { return from_json_doc(p.to_json()); });

  py::class_<AtlasModel, PredictiveModel>(m, "AtlasModel")
      .def_property_readonly("intercept", &AtlasModel::intercept)
      .def("disentangle",
           [](const AtlasModel& a, Index i, double c, std::optional<double> x) {
             const auto r = a.disentangle(i, c, x);
             return py::make_tuple(r.mean, r.variance);
           },
           py::arg("i"), py::arg("c"), py::arg("x") = std::nullopt,
           "Covariate i's additive (mean, variance) contribution.");
  py::class_<JointMlpModel, PredictiveModel>(m, "JointMlpModel");

  m.def("model_from_json", [](const py::object& doc) { return predictive_model_from_json(to_json_doc(doc)); },
        py::arg("doc"));

  m.def("fit_atlas",
        [](const Dataset& ds, std::map<std::string, std::string> priors, const py::object& config) {
          const auto cfg = run_config(config);
          auto [train, val] = carve_validation(ds, cfg.atlas.train.validation_fraction, cfg.atlas.train.seed);
          auto fit = fit_atlas(train, val, cfg.atlas, resolve_priors(ds, priors));
          py::list history;
          for (const auto& e : fit.history.epochs) history.append(py::make_tuple(e.epoch, e.train_loss, e.validation_loss));
          return py::make_tuple(std::move(fit.model), history);
        },
        py::arg("dataset"), py::arg("priors") = std::map<std::string, std::string>{},
        py::arg("config") = py::none(),
        "Returns (model, [(epoch, train_loss, validation_loss), ...]). `config` uses the CLI config layout.");
  m.def("fit_joint_mlp",
        [](const Dataset& ds, const py::object& config) {
          const auto cfg = run_config(config);
          auto [train, val] = carve_validation(ds, cfg.atlas.train.validation_fraction, cfg.atlas.train.seed);
          return fit_joint_mlp(train, val, cfg.atlas).model;
        },
        py::arg("dataset"), py::arg("config") = py::none());

  // Dependence.
  py::class_<CovariateDependence>(m, "CovariateDependence")
      .def_property_readonly("covariate_names", &CovariateDependence::covariate_names)
      .def("conditional",
           [](const CovariateDependence& d, Index i, double c) {
             const auto g = d.conditional(i, c);
             return py::make_tuple(g.mean, g.covariance, g.others);
           },
           py::arg("i"), py::arg("c"), "(mean, covariance, other indices) of p(c_-i | c_i).")
      .def("conditional_1d",
           [](const CovariateDependence& d, Index i, Index k, double c) { return conditional_1d(d, i, k, c); },
           py::arg("i"), py::arg("k"), py::arg("c"))
      .def("to_json", [](const CovariateDependence& d) { return from_json_doc(d.to_json()); });
  py::class_<GaussianDependence, CovariateDependence>(m, "GaussianDependence")
      .def(py::init([](std::vector<std::string> names, Eigen::VectorXd mean, Eigen::MatrixXd cov, bool conditional) {
             return GaussianDependence(std::move(names), std::move(mean), std::move(cov),
                                       conditional ? GaussianDependence::Mode::kConditional
                                                   : GaussianDependence::Mode::kUnconditional);
           }),
           py::arg("names"), py::arg("mean"), py::arg("covariance"), py::arg("conditional") = true)
      .def_static("from_dataset",
                  [](const Dataset& ds, bool conditional) {
                    return GaussianDependence::from_dataset(ds, conditional ? GaussianDependence::Mode::kConditional
                                                                            : GaussianDependence::Mode::kUnconditional);
                  },
                  py::arg("dataset"), py::arg("conditional") = true);
  py::class_<DependenceModel, CovariateDependence>(m, "DependenceModel")
      .def("unconditional", &DependenceModel::unconditional,
           "Independent-of-c_i Gaussian with the training moments (dependence off).");
  m.def("dependence_from_json", [](const py::object& doc) { return dependence_from_json(to_json_doc(doc)); },
        py::arg("doc"));
  m.def("fit_dependence",
        [](const Dataset& ds, const py::object& config) {
          const auto cfg = run_config(config);
          return fit_dependence(ds, dependence_config(ds, cfg)).model;
        },
        py::arg("dataset"), py::arg("config") = py::none());

  // Marginalization.
  m.def("marginal_curve",
        [](const AtlasModel& atlas, const CovariateDependence& dep, const std::string& covariate,
           std::optional<std::vector<double>> grid, std::optional<double> x, const py::object& sampling,
           unsigned threads) {
          const auto& names = atlas.schema().covariate_names;
          const auto it = std::find(names.begin(), names.end(), covariate);
          if (it == names.end()) throw ConfigError("unknown covariate '" + covariate + "'");
          const Index i = it - names.begin();
          const SamplingConfig cfg = SamplingConfig::from_json(to_json_doc(sampling), SamplingConfig{});
          const auto g = grid ? *grid : default_grid(atlas.schema(), i);
          py::gil_scoped_release release;
          const auto curve = marginal_curve(atlas, dep, i, x, g, cfg, threads);
          py::gil_scoped_acquire acquire;
          return curve_dict(curve);
        },
        py::arg("atlas"), py::arg("dependence"), py::arg("covariate"), py::arg("grid") = std::nullopt,
        py::arg("x") = std::nullopt, py::arg("sampling") = py::none(), py::arg("threads") = 1,
        "Marginal mean and total-variance decomposition of one covariate over a grid.");
  m.def("brute_force_marginal",
        [](const AtlasModel& atlas, const CovariateDependence& dep, Index i, double c, std::optional<double> x,
           Index samples, std::uint64_t seed) {
          const auto b = brute_force_marginal(atlas, dep, i, c, x, samples, seed);
          return py::make_tuple(b.mean, b.variance);
        },
        py::arg("atlas"), py::arg("dependence"), py::arg("i"), py::arg("c"), py::arg("x") = std::nullopt,
        py::arg("samples") = 100000, py::arg("seed") = 0);

  // Inference.
  m.def("impute",
        [](const CovariateDependence& dep, std::vector<std::optional<double>> partial) {
          const auto imp = impute(dep, partial);
          py::list entries;
          for (const auto& e : imp.imputed) {
            py::dict d;
            d["covariate"] = e.covariate;
            d["source"] = e.source;
            d["value"] = e.value;
            d["variance"] = e.variance;
            entries.append(d);
          }
          return py::make_tuple(imp.covariates, entries);
        },
        py::arg("dependence"), py::arg("covariates"), "None marks a missing covariate.");
  m.def("individualized_predict",
        [](const PredictiveModel& model, std::vector<double> current, double y, std::vector<double> next,
           std::optional<double> x) {
          const auto p = individualized_predict(model, SubjectObservation{std::move(current), x, y, 0}, next);
          py::dict d;
          d["y_next"] = p.response;
          d["percentile"] = p.percentile;
          d["current"] = p.current;
          d["next"] = p.next;
          d["large_change"] = p.large_change;
          return d;
        },
        py::arg("model"), py::arg("covariates"), py::arg("y"), py::arg("next_covariates"), py::arg("x") = std::nullopt);

  // Metrics.
  m.def("marpd", [](const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
    const auto a = as_vector(pred), b = as_vector(truth);
    return marpd(a, b);
  }, py::arg("predictions"), py::arg("truths"));
  m.def("mean_nll", [](const Eigen::VectorXd& mean, const Eigen::VectorXd& variance, const Eigen::VectorXd& truth) {
    const auto t = as_vector(truth);
    return mean_nll(params_from(mean, variance), t);
  }, py::arg("mean"), py::arg("variance"), py::arg("truths"));
  m.def("ece", [](const Eigen::VectorXd& mean, const Eigen::VectorXd& variance, const Eigen::VectorXd& truth) {
    const auto t = as_vector(truth);
    return ece(params_from(mean, variance), t);
  }, py::arg("mean"), py::arg("variance"), py::arg("truths"));
  m.def("interval_coverage",
        [](const Eigen::VectorXd& mean, const Eigen::VectorXd& variance, const Eigen::VectorXd& truth, double z) {
          const auto t = as_vector(truth);
          return interval_coverage(params_from(mean, variance), t, z);
        },
        py::arg("mean"), py::arg("variance"), py::arg("truths"), py::arg("z") = 2.0);
  m.def("evaluate", [](const PredictiveModel& model, const Dataset& ds) { return from_json_doc(evaluate(model, ds).to_json()); },
        py::arg("model"), py::arg("dataset"));

  // Command line.
  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code = 0;
          {
            py::gil_scoped_release release;
            code = cli::run(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs one command line; returns (exit_code, stdout, stderr).");
}
