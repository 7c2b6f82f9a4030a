#ifndef TRL_EXPERIMENT_HPP
#define TRL_EXPERIMENT_HPP

// Config-driven experiment pipeline: generate a toy task, train the MAP,
// fit the dense Gaussian baselines, build the tube, predict with every
// method, and score them all into plot-ready files.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trl/baselines.hpp"
#include "trl/common.hpp"
#include "trl/curvature.hpp"
#include "trl/datasets.hpp"
#include "trl/errors.hpp"
#include "trl/metrics.hpp"
#include "trl/nn.hpp"
#include "trl/rng.hpp"
#include "trl/sampling.hpp"
#include "trl/tube.hpp"

namespace trl::experiment {

namespace fs = std::filesystem;

struct TrainPhase {
  int epochs = 0;
  double lr = 0.0;
};

struct ExperimentConfig {
  // task
  std::string task_kind = "sine";  // sine | two_moons
  int n_train = 50;
  double noise = 0.1;
  double x_lo = -6.0;  // sine input range
  double x_hi = 6.0;

  // model
  std::vector<int> hidden = {50, 50};

  // prior
  double lambda = 0.1;

  // training; an empty schedule resolves to the task default
  std::vector<TrainPhase> schedule;

  // tube geometry
  tube::TubeConfig tube;
  curvature::CurvatureKind tube_kind = curvature::CurvatureKind::Ggn;

  // dense baselines
  curvature::CurvatureKind ela_kind = curvature::CurvatureKind::ExactHessian;
  curvature::CurvatureKind lla_kind = curvature::CurvatureKind::Ggn;

  // prediction and evaluation
  int samples = 100;
  int test_grid_n = 400;      // sine evaluation grid
  int n_test = 300;           // fresh two-moons evaluation draw
  int field_resolution = 200; // two-moons probability field edge length
  double validation_fraction = 0.2;

  // master seed; every stage derives its own fixed offset from it
  std::uint64_t seed = 1;

  bool save_tube_checkpoint = false;  // tube JSON is large at K ~ 2700
  bool save_posteriors = false;       // dense factors are large too

  bool classification() const { return task_kind == "two_moons"; }
  std::uint64_t data_seed() const { return seed; }
  std::uint64_t test_seed() const { return seed + 1000; }
  std::uint64_t init_seed() const { return seed + 77; }
  std::uint64_t tube_seed() const { return seed + 13; }
  std::uint64_t predict_seed() const { return seed + 29; }
  std::uint64_t split_seed() const { return seed + 5; }
};

namespace detail {

inline std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void reject_unknown_keys(const nlohmann::json& j, const char* where,
                                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown config field \"" + item.key() + "\" in " + where);
  }
}

inline std::vector<TrainPhase> default_schedule(const std::string& task_kind) {
  if (task_kind == "sine")
    return {{3000, 1e-2}, {3000, 3e-3}, {3000, 1e-3}, {3000, 3e-4},
            {3000, 1e-4}, {2000, 3e-5}, {2000, 1e-5}};
  return {{3000, 1e-2}, {2000, 3e-3}, {2000, 1e-3}, {2000, 3e-4}, {1000, 1e-4}};
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["task"] = {{"kind", c.task_kind},
               {"n_train", c.n_train},
               {"noise", c.noise},
               {"x_range", {c.x_lo, c.x_hi}}};
  j["model"] = {{"hidden", c.hidden}};
  j["prior"] = {{"lambda", c.lambda}};
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : c.schedule) phases.push_back({{"epochs", p.epochs}, {"lr", p.lr}});
  j["training"] = {{"schedule", phases}};
  j["tube"] = {{"T", c.tube.T},
               {"delta_s", c.tube.delta_s},
               {"eta_corr", c.tube.eta_corr},
               {"k_perp", c.tube.k_perp},
               {"beta_perp", c.tube.beta_perp},
               {"jitter", c.tube.jitter},
               {"map_grad_tol", c.tube.map_grad_tol},
               {"lanczos_iters", c.tube.lanczos.iters},
               {"lanczos_tol", c.tube.lanczos.tol},
               {"kind", curvature::curvature_kind_name(c.tube_kind)}};
  if (c.tube.drift_tol)
    j["tube"]["drift_tol"] = *c.tube.drift_tol;
  else
    j["tube"]["drift_tol"] = nullptr;
  j["baselines"] = {{"ela_kind", curvature::curvature_kind_name(c.ela_kind)},
                    {"lla_kind", curvature::curvature_kind_name(c.lla_kind)}};
  j["evaluation"] = {{"samples", c.samples},
                     {"test_grid_n", c.test_grid_n},
                     {"n_test", c.n_test},
                     {"field_resolution", c.field_resolution},
                     {"validation_fraction", c.validation_fraction}};
  j["seed"] = c.seed;
  j["save_tube_checkpoint"] = c.save_tube_checkpoint;
  j["save_posteriors"] = c.save_posteriors;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::reject_unknown_keys(j, "config",
                              {"task", "model", "prior", "training", "tube", "baselines",
                               "evaluation", "seed", "save_tube_checkpoint", "save_posteriors"});
  if (j.contains("task")) {
    const auto& t = j.at("task");
    detail::reject_unknown_keys(t, "task", {"kind", "n_train", "noise", "x_range"});
    c.task_kind = t.value("kind", c.task_kind);
    c.n_train = t.value("n_train", c.n_train);
    c.noise = t.value("noise", c.noise);
    if (t.contains("x_range")) {
      auto r = t.at("x_range").get<std::vector<double>>();
      if (r.size() != 2) throw ConfigError("task.x_range needs exactly two numbers");
      c.x_lo = r[0];
      c.x_hi = r[1];
    }
  }
  if (c.task_kind != "sine" && c.task_kind != "two_moons")
    throw ConfigError("task.kind must be sine or two_moons, got \"" + c.task_kind + "\"");
  if (j.contains("model")) {
    detail::reject_unknown_keys(j.at("model"), "model", {"hidden"});
    c.hidden = j.at("model").value("hidden", c.hidden);
    if (c.hidden.empty()) throw ConfigError("model.hidden needs at least one layer");
  }
  if (j.contains("prior")) {
    detail::reject_unknown_keys(j.at("prior"), "prior", {"lambda"});
    c.lambda = j.at("prior").value("lambda", c.lambda);
    if (c.lambda <= 0.0) throw ConfigError("prior.lambda must be positive");
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    detail::reject_unknown_keys(t, "training", {"schedule"});
    if (t.contains("schedule")) {
      for (const auto& p : t.at("schedule")) {
        detail::reject_unknown_keys(p, "training.schedule entry", {"epochs", "lr"});
        TrainPhase phase{p.at("epochs").get<int>(), p.at("lr").get<double>()};
        if (phase.epochs < 1 || phase.lr <= 0.0)
          throw ConfigError("training.schedule entries need positive epochs and lr");
        c.schedule.push_back(phase);
      }
    }
  }
  if (c.schedule.empty()) c.schedule = detail::default_schedule(c.task_kind);
  if (j.contains("tube")) {
    const auto& t = j.at("tube");
    detail::reject_unknown_keys(t, "tube",
                                {"T", "delta_s", "eta_corr", "k_perp", "beta_perp", "jitter",
                                 "map_grad_tol", "drift_tol", "lanczos_iters", "lanczos_tol",
                                 "kind"});
    c.tube.T = t.value("T", c.tube.T);
    c.tube.delta_s = t.value("delta_s", c.tube.delta_s);
    c.tube.eta_corr = t.value("eta_corr", c.tube.eta_corr);
    c.tube.k_perp = t.value("k_perp", c.tube.k_perp);
    c.tube.beta_perp = t.value("beta_perp", c.tube.beta_perp);
    c.tube.jitter = t.value("jitter", c.tube.jitter);
    c.tube.map_grad_tol = t.value("map_grad_tol", c.tube.map_grad_tol);
    if (t.contains("drift_tol") && !t.at("drift_tol").is_null())
      c.tube.drift_tol = t.at("drift_tol").get<double>();
    c.tube.lanczos.iters = t.value("lanczos_iters", 160);
    c.tube.lanczos.tol = t.value("lanczos_tol", c.tube.lanczos.tol);
    if (t.contains("kind"))
      c.tube_kind = curvature::curvature_kind_from_name(t.at("kind").get<std::string>());
  } else {
    c.tube.lanczos.iters = 160;
  }
  if (j.contains("baselines")) {
    const auto& b = j.at("baselines");
    detail::reject_unknown_keys(b, "baselines", {"ela_kind", "lla_kind"});
    if (b.contains("ela_kind"))
      c.ela_kind = curvature::curvature_kind_from_name(b.at("ela_kind").get<std::string>());
    if (b.contains("lla_kind"))
      c.lla_kind = curvature::curvature_kind_from_name(b.at("lla_kind").get<std::string>());
  }
  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    detail::reject_unknown_keys(e, "evaluation",
                                {"samples", "test_grid_n", "n_test", "field_resolution",
                                 "validation_fraction"});
    c.samples = e.value("samples", c.samples);
    c.test_grid_n = e.value("test_grid_n", c.test_grid_n);
    c.n_test = e.value("n_test", c.n_test);
    c.field_resolution = e.value("field_resolution", c.field_resolution);
    c.validation_fraction = e.value("validation_fraction", c.validation_fraction);
    if (c.samples < 2) throw ConfigError("evaluation.samples must be at least 2");
    if (c.validation_fraction <= 0.0 || c.validation_fraction >= 1.0)
      throw ConfigError("evaluation.validation_fraction must lie in (0, 1)");
  }
  c.seed = j.value("seed", c.seed);
  c.save_tube_checkpoint = j.value("save_tube_checkpoint", c.save_tube_checkpoint);
  c.save_posteriors = j.value("save_posteriors", c.save_posteriors);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error in ") + path + ": " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field error in ") + path + ": " + e.what());
  }
}

inline std::string config_hash(const ExperimentConfig& c) {
  return detail::hex64(detail::fnv1a64(config_to_json(c).dump()));
}

// --- pipeline pieces ---------------------------------------------------------

namespace detail {

inline nn::Dataset make_train_data(const ExperimentConfig& c) {
  if (c.task_kind == "sine")
    return data::gen_sine(c.n_train, c.noise, c.x_lo, c.x_hi, c.data_seed());
  return data::gen_two_moons(c.n_train, c.noise, c.data_seed());
}

// sine evaluates on an even grid with freshly drawn noisy targets; moons on a
// fresh draw from the same generative process
inline nn::Dataset make_test_data(const ExperimentConfig& c) {
  if (c.task_kind == "sine") {
    nn::Dataset d;
    d.task = nn::Task::Regression;
    int n = c.test_grid_n;
    d.inputs.resize(n, 1);
    d.targets.resize(n, 1);
    Pcg32 rng(c.test_seed());
    for (int i = 0; i < n; ++i) {
      double x = n > 1 ? c.x_lo + (c.x_hi - c.x_lo) * i / (n - 1.0) : c.x_lo;
      d.inputs(i, 0) = x;
      d.targets(i, 0) = std::sin(x) + c.noise * rng.normal();
    }
    return d;
  }
  return data::gen_two_moons(c.n_test, c.noise, c.test_seed());
}

inline nn::MlpModel make_model(const ExperimentConfig& c) {
  std::vector<int> widths;
  widths.push_back(c.classification() ? 2 : 1);
  widths.insert(widths.end(), c.hidden.begin(), c.hidden.end());
  widths.push_back(1);
  nn::Head head;
  if (c.classification()) {
    head.kind = nn::HeadKind::BernoulliLogit;
    head.noise_sigma = 0.0;
  } else {
    head.kind = nn::HeadKind::GaussianRegression;
    head.noise_sigma = c.noise;
  }
  return nn::MlpModel::create(widths, head, c.init_seed());
}

inline nn::MlpModel train_model(nn::MlpModel model, const nn::Dataset& train,
                                const nn::PriorSpec& prior,
                                const std::vector<TrainPhase>& schedule, bool verbose) {
  for (const auto& phase : schedule) {
    model = nn::train_map(model, train, prior, phase.epochs, phase.lr, 0);
    if (verbose) {
      double loss = nn::neg_log_posterior(model, train, prior);
      double g = nn::gradient(model, train, prior).norm();
      std::printf("  trained %5d epochs at lr %-8g loss %-12.4f |grad| %.4f\n", phase.epochs,
                  phase.lr, loss, g);
    }
  }
  return model;
}

inline sampling::PredictiveSummary map_summary(const nn::MlpModel& model, const Mat& x_star) {
  Mat f = nn::forward(model, x_star);
  sampling::PredictiveSummary s;
  s.sample_count = 0;
  if (model.head.kind == nn::HeadKind::BernoulliLogit) {
    s.task = nn::Task::Classification;
    s.mean = Vec(f.rows());
    s.entropy = Vec(f.rows());
    for (Index i = 0; i < f.rows(); ++i) {
      s.mean[i] = nn::detail::sigmoid(f(i, 0));
      s.entropy[i] = sampling::detail::entropy_nats(s.mean[i]);
    }
  } else {
    s.task = nn::Task::Regression;
    s.mean = f.col(0);
    s.variance = Vec::Zero(f.rows());
  }
  return s;
}

inline Mat field_grid(int resolution, double x0, double x1, double y0, double y1) {
  Mat g(static_cast<Index>(resolution) * resolution, 2);
  Index r = 0;
  for (int iy = 0; iy < resolution; ++iy)
    for (int ix = 0; ix < resolution; ++ix, ++r) {
      g(r, 0) = x0 + (x1 - x0) * ix / (resolution - 1.0);
      g(r, 1) = y0 + (y1 - y0) * iy / (resolution - 1.0);
    }
  return g;
}

struct FittedBaselines {
  baselines::GaussianPosterior ela;
  baselines::GaussianPosterior lla;
  bool ela_fell_back = false;
};

// the exact-Hessian fit falls back to the clamped spectrum when the mode
// turns out to be indefinite; the kind actually used is recorded in metadata
inline FittedBaselines fit_baselines(const ExperimentConfig& c, const nn::MlpModel& model,
                                     const nn::Dataset& train, const nn::PriorSpec& prior,
                                     bool verbose) {
  FittedBaselines out;
  try {
    out.ela = baselines::fit_laplace(model, train, prior, c.ela_kind);
  } catch (const NumericError&) {
    if (c.ela_kind != curvature::CurvatureKind::ExactHessian) throw;
    if (verbose) std::printf("  exact hessian indefinite at the mode, clamping its spectrum\n");
    out.ela = baselines::fit_laplace(model, train, prior,
                                     curvature::CurvatureKind::RectifiedHessian);
    out.ela_fell_back = true;
  }
  if (c.lla_kind == out.ela.kind_used)
    out.lla = out.ela;
  else
    out.lla = baselines::fit_laplace(model, train, prior, c.lla_kind);
  return out;
}

inline metrics::MetricsReport score(const ExperimentConfig& c, const std::string& method,
                                    const Vec& targets,
                                    const sampling::PredictiveSummary& summary,
                                    const std::string& hash) {
  metrics::MetricsReport r;
  if (summary.task == nn::Task::Regression)
    r = metrics::regression_scores(targets, summary, c.noise);
  else
    r = metrics::classification_scores(targets, summary);
  r.method = method;
  r.seed = c.seed;
  r.config_hash = hash;
  return r;
}

inline void print_summary_table(const std::vector<metrics::MetricsReport>& rows,
                                bool classification) {
  if (classification) {
    std::printf("\n  %-11s %10s %10s %10s %10s\n", "method", "NLL", "Brier", "ECE", "accuracy");
    for (const auto& r : rows)
      std::printf("  %-11s %10.4f %10.4f %10.4f %10.4f\n", r.method.c_str(), r.nll.value_or(0.0),
                  r.brier.value_or(0.0), r.ece.value_or(0.0), r.accuracy.value_or(0.0));
  } else {
    std::printf("\n  %-11s %10s %10s %10s %10s\n", "method", "RMSE", "NLL", "z-var", "cov1");
    for (const auto& r : rows)
      std::printf("  %-11s %10.4f %10.4f %10.4f %10.4f\n", r.method.c_str(), r.rmse.value_or(0.0),
                  r.nll.value_or(0.0), r.z_var.value_or(0.0), r.coverage_1s.value_or(0.0));
  }
  std::printf("\n");
}

inline const metrics::MetricsReport& find_row(const std::vector<metrics::MetricsReport>& rows,
                                              const std::string& method) {
  for (const auto& r : rows)
    if (r.method == method) return r;
  throw ConfigError("missing metrics row for method " + method);
}

}  // namespace detail

struct RunResult {
  std::vector<metrics::MetricsReport> rows;
  std::string hash;
  std::string ela_kind_used;
  std::vector<std::string> threshold_failures;
};

// the full pipeline; throws ConfigError / NumericError, returns threshold
// violations (when check is set) for the caller to map onto the exit code
inline RunResult run_experiment(const ExperimentConfig& c, const fs::path& out_dir,
                                bool check = false, bool verbose = true) {
  fs::create_directories(out_dir);
  RunResult result;
  result.hash = config_hash(c);

  {
    std::ofstream echo(out_dir / "resolved_config.json");
    if (!echo) throw ConfigError("cannot write into output directory " + out_dir.string());
    nlohmann::json j = config_to_json(c);
    j["config_hash"] = result.hash;
    echo << j.dump(2) << "\n";
  }

  nn::Dataset train = detail::make_train_data(c);
  nn::Dataset test = detail::make_test_data(c);
  nn::PriorSpec prior{c.lambda};
  data::export_dataset((out_dir / "train_data").string(), train,
                       {{"kind", c.task_kind}, {"seed", c.data_seed()}});

  if (verbose) std::printf("[%s] training the map (seed %llu)\n", c.task_kind.c_str(),
                           static_cast<unsigned long long>(c.seed));
  nn::MlpModel model = detail::train_model(detail::make_model(c), train, prior, c.schedule,
                                           verbose);
  nn::save_model((out_dir / "map_model.json").string(), model);

  if (verbose) std::printf("[%s] fitting dense laplace baselines (K = %lld)\n",
                           c.task_kind.c_str(), static_cast<long long>(model.param_count()));
  detail::FittedBaselines fitted = detail::fit_baselines(c, model, train, prior, verbose);
  result.ela_kind_used = curvature::curvature_kind_name(fitted.ela.kind_used);
  if (c.save_posteriors) {
    baselines::save_posterior((out_dir / "posterior_ela.json").string(), fitted.ela);
    baselines::save_posterior((out_dir / "posterior_lla.json").string(), fitted.lla);
  }

  if (verbose) std::printf("[%s] building the tube (T = %d)\n", c.task_kind.c_str(), c.tube.T);
  tube::Tube tube_obj = tube::build_tube(model, train, prior, c.tube, c.tube_seed(), c.tube_kind);
  tube::write_tube_diagnostics_csv((out_dir / "tube_diagnostics.csv").string(), tube_obj);
  if (c.save_tube_checkpoint) tube::save_tube((out_dir / "tube.json").string(), tube_obj);

  if (verbose) std::printf("[%s] sampling predictions (S = %d)\n", c.task_kind.c_str(),
                           c.samples);
  std::vector<std::pair<std::string, sampling::PredictiveSummary>> methods;
  methods.emplace_back("MAP", detail::map_summary(model, test.inputs));
  methods.emplace_back("ELA", baselines::ela_predict(model, fitted.ela, test.inputs, c.samples,
                                                     c.predict_seed()));
  if (c.classification()) {
    methods.emplace_back("LLA-MC",
                         baselines::lla_predict(model, fitted.lla, test.inputs,
                                                baselines::LlaMode::Mc, c.samples,
                                                c.predict_seed() + 1));
    methods.emplace_back("LLA-Probit", baselines::lla_predict(model, fitted.lla, test.inputs,
                                                              baselines::LlaMode::Probit));
  } else {
    methods.emplace_back("LLA", baselines::lla_predict(model, fitted.lla, test.inputs));
  }
  methods.emplace_back("TRL", sampling::predict(model, tube_obj, test.inputs, c.samples,
                                                c.predict_seed()));

  for (const auto& [name, summary] : methods) {
    sampling::write_predictions_csv((out_dir / ("predictions_" + name + ".csv")).string(),
                                    test.inputs, summary);
    result.rows.push_back(detail::score(c, name, test.targets.col(0), summary, result.hash));
    if (c.classification())
      metrics::write_reliability_csv(
          (out_dir / ("reliability_" + name + ".csv")).string(),
          metrics::reliability_bins(test.targets.col(0), summary));
  }

  if (c.classification() && c.field_resolution > 1) {
    if (verbose) std::printf("[%s] rendering %dx%d probability fields\n", c.task_kind.c_str(),
                             c.field_resolution, c.field_resolution);
    Mat grid = detail::field_grid(c.field_resolution, -1.5, 2.5, -1.0, 1.5);
    auto emit = [&](const std::string& name, const sampling::PredictiveSummary& s) {
      sampling::write_predictions_csv((out_dir / ("field_" + name + ".csv")).string(), grid, s);
    };
    emit("MAP", detail::map_summary(model, grid));
    emit("ELA", baselines::ela_predict(model, fitted.ela, grid, c.samples, c.predict_seed()));
    emit("LLA-Probit",
         baselines::lla_predict(model, fitted.lla, grid, baselines::LlaMode::Probit));
    emit("TRL", sampling::predict(model, tube_obj, grid, c.samples, c.predict_seed()));
  }

  nlohmann::json run_meta;
  run_meta["config_hash"] = result.hash;
  run_meta["ela_kind_used"] = result.ela_kind_used;
  run_meta["ela_fell_back"] = fitted.ela_fell_back;
  run_meta["lla_kind_used"] = curvature::curvature_kind_name(fitted.lla.kind_used);
  run_meta["tube_kind"] = curvature::curvature_kind_name(c.tube_kind);
  run_meta["param_count"] = model.param_count();
  run_meta["reports"] = nlohmann::json::array();
  for (const auto& r : result.rows) run_meta["reports"].push_back(metrics::report_to_json(r));
  {
    std::ofstream meta(out_dir / "run_meta.json");
    meta << run_meta.dump(2) << "\n";
  }
  metrics::write_metrics_csv((out_dir / "metrics.csv").string(), result.rows);

  if (verbose) {
    std::printf("[%s] config %s, posterior curvature %s\n", c.task_kind.c_str(),
                result.hash.c_str(), result.ela_kind_used.c_str());
    detail::print_summary_table(result.rows, c.classification());
  }

  if (check) {
    auto fail = [&result](const std::string& msg) { result.threshold_failures.push_back(msg); };
    char buf[160];
    if (c.classification()) {
      const auto& trl = detail::find_row(result.rows, "TRL");
      const auto& lla = detail::find_row(result.rows, "LLA-Probit");
      const auto& ela = detail::find_row(result.rows, "ELA");
      if (trl.nll.value() > 0.15) fail("TRL NLL above 0.15");
      if (trl.brier.value() > 0.05) fail("TRL Brier above 0.05");
      if (trl.accuracy.value() < 1.0) fail("TRL accuracy below 100%");
      if (lla.accuracy.value() < 1.0) fail("LLA accuracy below 100%");
      if (!(trl.nll.value() < lla.nll.value() && lla.nll.value() < ela.nll.value())) {
        std::snprintf(buf, sizeof(buf), "NLL ordering violated: TRL %.4f, LLA %.4f, ELA %.4f",
                      trl.nll.value(), lla.nll.value(), ela.nll.value());
        fail(buf);
      }
    } else {
      const auto& trl = detail::find_row(result.rows, "TRL");
      const auto& lla = detail::find_row(result.rows, "LLA");
      const auto& ela = detail::find_row(result.rows, "ELA");
      if (trl.rmse.value() > 0.35) fail("TRL RMSE above 0.35");
      if (trl.nll.value() > 0.3) fail("TRL NLL above 0.3");
      if (trl.coverage_1s.value() < 0.80) fail("TRL 1-sigma coverage below 0.80");
      if (trl.z_var.value() < 0.1 || trl.z_var.value() > 0.7)
        fail("TRL z-variance outside [0.1, 0.7]");
      if (!(trl.nll.value() < lla.nll.value() && lla.nll.value() < ela.nll.value())) {
        std::snprintf(buf, sizeof(buf), "NLL ordering violated: TRL %.4f, LLA %.4f, ELA %.4f",
                      trl.nll.value(), lla.nll.value(), ela.nll.value());
        fail(buf);
      }
    }
    for (const auto& m : result.threshold_failures)
      std::printf("threshold failure: %s\n", m.c_str());
  }
  return result;
}

// --- grid search ---------------------------------------------------------------

struct GridAxes {
  std::vector<int> T;
  std::vector<double> delta_s;
  std::vector<double> beta_perp;
  std::vector<int> k_perp;
};

inline GridAxes load_grid_axes(const std::string& path, const ExperimentConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open grid file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grid parse error in ") + path + ": " + e.what());
  }
  detail::reject_unknown_keys(j, "grid", {"T", "delta_s", "beta_perp", "k_perp"});
  GridAxes axes;
  axes.T = j.value("T", std::vector<int>{base.tube.T});
  axes.delta_s = j.value("delta_s", std::vector<double>{base.tube.delta_s});
  axes.beta_perp = j.value("beta_perp", std::vector<double>{base.tube.beta_perp});
  axes.k_perp = j.value("k_perp", std::vector<int>{base.tube.k_perp});
  if (axes.T.empty() || axes.delta_s.empty() || axes.beta_perp.empty() || axes.k_perp.empty())
    throw ConfigError("grid axes must be non-empty");
  return axes;
}

struct GridCell {
  int T = 0;
  double delta_s = 0.0;
  double beta_perp = 0.0;
  int k_perp = 0;

  std::string id() const {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "T%d_ds%g_bp%g_kp%d", T, delta_s, beta_perp, k_perp);
    return buf;
  }
};

struct GridCellResult {
  GridCell cell;
  bool ok = false;
  std::string error;
  double validation_nll = 0.0;
  metrics::MetricsReport report;
};

struct GridResult {
  std::vector<GridCellResult> cells;
  std::optional<GridCell> best;
  double best_nll = 0.0;
  int skipped = 0;  // completed in an earlier invocation
};

inline GridResult run_grid(const ExperimentConfig& base, const GridAxes& axes,
                           const fs::path& out_dir, int jobs = 1, bool verbose = true) {
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
  fs::create_directories(out_dir / "cells");
  std::string hash = config_hash(base);
  {
    std::ofstream echo(out_dir / "resolved_config.json");
    nlohmann::json j = config_to_json(base);
    j["config_hash"] = hash;
    echo << j.dump(2) << "\n";
  }

  // hold out part of the generated training set for cell selection
  nn::Dataset full = detail::make_train_data(base);
  Index n = full.size();
  Index n_val = std::max<Index>(1, static_cast<Index>(std::floor(
                                       static_cast<double>(n) * base.validation_fraction)));
  if (n_val >= n) throw ConfigError("validation split leaves no training data");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Pcg32 split_rng(base.split_seed());
  for (Index i = n - 1; i > 0; --i) {
    auto pick = static_cast<Index>(split_rng.uniform(0.0, static_cast<double>(i + 1)));
    if (pick > i) pick = i;
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick)]);
  }
  nn::Dataset train, val;
  train.task = val.task = full.task;
  train.inputs.resize(n - n_val, full.inputs.cols());
  train.targets.resize(n - n_val, 1);
  val.inputs.resize(n_val, full.inputs.cols());
  val.targets.resize(n_val, 1);
  for (Index i = 0; i < n - n_val; ++i) {
    train.inputs.row(i) = full.inputs.row(order[static_cast<std::size_t>(i)]);
    train.targets.row(i) = full.targets.row(order[static_cast<std::size_t>(i)]);
  }
  for (Index i = 0; i < n_val; ++i) {
    val.inputs.row(i) = full.inputs.row(order[static_cast<std::size_t>(n - n_val + i)]);
    val.targets.row(i) = full.targets.row(order[static_cast<std::size_t>(n - n_val + i)]);
  }

  nn::PriorSpec prior{base.lambda};
  if (verbose)
    std::printf("[grid] training the map on %lld of %lld points\n",
                static_cast<long long>(n - n_val), static_cast<long long>(n));
  nn::MlpModel model =
      detail::train_model(detail::make_model(base), train, prior, base.schedule, verbose);

  std::vector<GridCell> cells;
  for (int T : axes.T)
    for (double ds : axes.delta_s)
      for (int kp : axes.k_perp)
        for (double bp : axes.beta_perp) cells.push_back({T, ds, bp, kp});

  GridResult grid_result;
  grid_result.cells.resize(cells.size());

  // tubes are shared between cells that differ only in beta
  std::map<std::tuple<int, double, int>, std::shared_ptr<tube::Tube>> tube_cache;
  std::mutex cache_mutex, print_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<int> skipped{0};

  auto worker = [&]() {
    for (;;) {
      std::size_t idx = next.fetch_add(1);
      if (idx >= cells.size()) return;
      const GridCell& cell = cells[idx];
      GridCellResult& slot = grid_result.cells[idx];
      slot.cell = cell;
      fs::path cell_dir = out_dir / "cells" / cell.id();
      fs::path marker = cell_dir / "done.json";

      if (fs::exists(marker)) {
        try {
          nlohmann::json j;
          std::ifstream in(marker);
          in >> j;
          slot.ok = j.at("status").get<std::string>() == "ok";
          if (slot.ok)
            slot.validation_nll = j.at("validation_nll").get<double>();
          else
            slot.error = j.value("error", "unknown");
          ++skipped;
          continue;
        } catch (...) {
          // fall through and recompute a corrupt marker
        }
      }
      fs::create_directories(cell_dir);

      try {
        std::shared_ptr<tube::Tube> cell_tube;
        {
          std::lock_guard<std::mutex> lock(cache_mutex);
          auto key = std::make_tuple(cell.T, cell.delta_s, cell.k_perp);
          auto it = tube_cache.find(key);
          if (it != tube_cache.end()) cell_tube = it->second;
        }
        if (!cell_tube) {
          tube::TubeConfig tc = base.tube;
          tc.T = cell.T;
          tc.delta_s = cell.delta_s;
          tc.k_perp = cell.k_perp;
          tc.beta_perp = cell.beta_perp;
          cell_tube = std::make_shared<tube::Tube>(
              tube::build_tube(model, train, prior, tc, base.tube_seed(), base.tube_kind));
          std::lock_guard<std::mutex> lock(cache_mutex);
          tube_cache.emplace(std::make_tuple(cell.T, cell.delta_s, cell.k_perp), cell_tube);
        }

        auto summary = sampling::predict(model, *cell_tube, val.inputs, base.samples,
                                         base.predict_seed(), cell.beta_perp);
        metrics::MetricsReport report =
            detail::score(base, "TRL", val.targets.col(0), summary, hash);
        slot.ok = true;
        slot.validation_nll = report.nll.value();
        slot.report = report;
        metrics::write_metrics_csv((cell_dir / "metrics.csv").string(), {report});

        nlohmann::json done;
        done["status"] = "ok";
        done["cell"] = {{"T", cell.T},
                        {"delta_s", cell.delta_s},
                        {"beta_perp", cell.beta_perp},
                        {"k_perp", cell.k_perp}};
        done["validation_nll"] = slot.validation_nll;
        std::ofstream mk(marker);
        mk << done.dump(2) << "\n";
      } catch (const std::exception& e) {
        slot.ok = false;
        slot.error = e.what();
        nlohmann::json done;
        done["status"] = "failed";
        done["error"] = slot.error;
        std::ofstream mk(marker);
        mk << done.dump(2) << "\n";
      }
      if (verbose) {
        std::lock_guard<std::mutex> lock(print_mutex);
        if (slot.ok)
          std::printf("[grid] %-28s val NLL %.4f\n", cell.id().c_str(), slot.validation_nll);
        else
          std::printf("[grid] %-28s failed: %s\n", cell.id().c_str(), slot.error.c_str());
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  grid_result.skipped = skipped.load();

  for (const auto& slot : grid_result.cells) {
    if (!slot.ok) continue;
    if (!grid_result.best || slot.validation_nll < grid_result.best_nll) {
      grid_result.best = slot.cell;
      grid_result.best_nll = slot.validation_nll;
    }
  }

  std::ofstream table(out_dir / "grid_summary.csv");
  table << "T,delta_s,beta_perp,k_perp,status,validation_nll,error\n";
  char buf[256];
  for (const auto& slot : grid_result.cells) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%d,%s,", slot.cell.T, slot.cell.delta_s,
                  slot.cell.beta_perp, slot.cell.k_perp, slot.ok ? "ok" : "failed");
    table << buf;
    if (slot.ok)
      table << slot.validation_nll << ",\n";
    else
      table << "," << slot.error << "\n";
  }
  table.close();

  nlohmann::json best_json;
  if (grid_result.best) {
    best_json["T"] = grid_result.best->T;
    best_json["delta_s"] = grid_result.best->delta_s;
    best_json["beta_perp"] = grid_result.best->beta_perp;
    best_json["k_perp"] = grid_result.best->k_perp;
    best_json["validation_nll"] = grid_result.best_nll;
  }
  {
    std::ofstream best(out_dir / "best_cell.json");
    best << best_json.dump(2) << "\n";
  }
  if (verbose && grid_result.best)
    std::printf("[grid] best cell %s with validation NLL %.4f (%d reused)\n",
                grid_result.best->id().c_str(), grid_result.best_nll, grid_result.skipped);
  if (!grid_result.best) throw NumericError("every grid cell failed");
  return grid_result;
}

// --- oracle suites -------------------------------------------------------------

namespace detail {

inline void write_report(const fs::path& dir, nlohmann::json j, bool ok) {
  j["status"] = ok ? "ok" : "failed";
  j["rng"] = Pcg32::generator_id();
  std::ofstream out(dir / "report.json");
  out << j.dump(2) << "\n";
}

inline void write_dense_csv(const fs::path& path, const Mat& m) {
  std::ofstream out(path);
  char buf[32];
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      out << buf << (j + 1 < m.cols() ? "," : "");
    }
    out << "\n";
  }
}

}  // namespace detail

// reference-value generators exercised by the tests; each writes its outputs
// plus a self-check verdict and returns whether the check passed
inline bool run_oracle_suite(const std::string& suite, const fs::path& out_dir) {
  fs::path dir = out_dir / suite;
  fs::create_directories(dir);

  if (suite == "fd-hessian") {
    auto train = data::gen_sine(20, 0.1, -3.0, 3.0, 4);
    auto model = nn::MlpModel::create({2, 5, 1}, nn::Head{}, 3);
    // the sine generator is 1-d, widen inputs by mirroring for a 2-input net
    Mat x2(train.inputs.rows(), 2);
    x2.col(0) = train.inputs.col(0);
    x2.col(1) = train.inputs.col(0).cwiseAbs();
    train.inputs = x2;
    nn::PriorSpec prior{0.1};
    Index K = model.param_count();

    Mat h_ad(K, K), h_fd(K, K);
    Vec e = Vec::Zero(K);
    const double step = 1e-5;
    for (Index i = 0; i < K; ++i) {
      e[i] = 1.0;
      h_ad.col(i) = nn::hvp(model, train, prior, e);
      nn::MlpModel plus = model.with_params(model.params.values + step * e);
      nn::MlpModel minus = model.with_params(model.params.values - step * e);
      h_fd.col(i) =
          (nn::gradient(plus, train, prior) - nn::gradient(minus, train, prior)) / (2.0 * step);
      e[i] = 0.0;
    }
    double rel = (h_ad - h_fd).norm() / h_fd.norm();
    double sym = (h_fd - h_fd.transpose()).norm() / h_fd.norm();
    detail::write_dense_csv(dir / "hessian_fd.csv", h_fd);
    bool ok = rel <= 1e-3;
    detail::write_report(dir,
                         {{"suite", suite},
                          {"param_count", K},
                          {"relative_defect", rel},
                          {"fd_symmetry_defect", sym},
                          {"tolerance", 1e-3}},
                         ok);
    return ok;
  }

  if (suite == "dense-eig") {
    auto train = data::gen_sine(30, 0.1, -6.0, 6.0, 7);
    auto model = nn::MlpModel::create({1, 12, 12, 1}, nn::Head{}, 5);
    nn::PriorSpec prior{0.1};
    curvature::MlpCurvatureOracle oracle(model, train, prior, curvature::CurvatureKind::Ggn);
    Mat dense = curvature::dense_operator(oracle);
    Eigen::SelfAdjointEigenSolver<Mat> eig(dense);
    if (eig.info() != Eigen::Success) throw NumericError("dense eigendecomposition failed");

    curvature::LanczosOptions opt;
    opt.iters = 400;
    opt.seed = 11;
    auto top = curvature::lanczos_topk(oracle, 10, opt);
    double worst = 0.0;
    Index K = dense.rows();
    for (int i = 0; i < 10; ++i) {
      double want = eig.eigenvalues()[K - 1 - i];
      worst = std::max(worst, std::abs(top.values[i] - want) / std::abs(want));
    }
    auto small = curvature::smallest_eigvec(oracle, opt);
    double resid = (oracle.apply(small.vector) - small.value * small.vector).norm();

    detail::write_dense_csv(dir / "dense_eigenvalues.csv", eig.eigenvalues());
    detail::write_dense_csv(dir / "lanczos_top10.csv", top.values);
    bool ok = worst <= 1e-6 && resid <= 1e-6;
    detail::write_report(dir,
                         {{"suite", suite},
                          {"param_count", K},
                          {"top10_relative_defect", worst},
                          {"smallest_pair_residual", resid},
                          {"tolerance", 1e-6}},
                         ok);
    return ok;
  }

  if (suite == "conjugate-linear") {
    Pcg32 rng(101);
    Index n = 12;
    Mat x(n, 1), y(n, 1);
    for (Index i = 0; i < n; ++i) {
      x(i, 0) = rng.uniform(-2.0, 2.0);
      y(i, 0) = 1.3 * x(i, 0) - 0.4 + 0.1 * rng.normal();
    }
    nn::Dataset train{x, y, nn::Task::Regression};
    auto model = nn::MlpModel::create({1, 1}, nn::Head{}, 0);
    nn::PriorSpec prior{0.5};
    double s2 = model.head.noise_sigma * model.head.noise_sigma;
    Mat phi(n, 2);
    phi.col(0) = x.col(0);
    phi.col(1) = Vec::Ones(n);
    Mat precision = phi.transpose() * phi / s2 + prior.lambda * Mat::Identity(2, 2);
    Mat cov = precision.inverse();
    Vec theta = cov * (phi.transpose() * y.col(0)) / s2;
    model.params.values = theta;

    auto post = baselines::fit_laplace(model, train, prior, curvature::CurvatureKind::Ggn);
    double prec_defect = (post.precision - precision).norm() / precision.norm();
    Mat grid(5, 1);
    grid << -3.0, -1.0, 0.0, 1.5, 4.0;
    auto lla = baselines::lla_predict(model, post, grid);
    double pred_defect = 0.0;
    for (Index i = 0; i < grid.rows(); ++i) {
      Vec p(2);
      p << grid(i, 0), 1.0;
      pred_defect = std::max(pred_defect, std::abs(lla.mean[i] - p.dot(theta)));
      pred_defect = std::max(pred_defect, std::abs(lla.variance[i] - p.dot(cov * p)));
    }
    detail::write_dense_csv(dir / "posterior_precision.csv", precision);
    detail::write_dense_csv(dir / "posterior_mean.csv", theta);
    bool ok = prec_defect <= 1e-8 && pred_defect <= 1e-8;
    detail::write_report(dir,
                         {{"suite", suite},
                          {"precision_defect", prec_defect},
                          {"predictive_defect", pred_defect},
                          {"tolerance", 1e-8}},
                         ok);
    return ok;
  }

  if (suite == "quadratic") {
    Vec a(2);
    a << 10.0, 0.0;
    auto valley = data::quadratic_valley(a, 0.1);
    nlohmann::json j;
    j["suite"] = suite;
    j["a_diag"] = {10.0, 0.0};
    j["lambda"] = 0.1;
    j["posterior_variance"] = {valley.posterior_variance()[0], valley.posterior_variance()[1]};
    j["tangent_axis"] = valley.tangent_axis();

    tube::QuadraticValleyProblem problem(valley);
    tube::TubeConfig tc;
    tc.T = 20;
    tc.delta_s = std::sqrt(120.0 / 440.0);
    tc.k_perp = 1;
    tc.beta_perp = 1.0;
    tc.drift_tol = 10.0;
    Vec start(2);
    start << 0.005, 0.0;
    auto t = tube::build_tube(problem, start, tc);
    const int S = 100000;
    auto latents = sampling::draw_latents(1, S, 3);
    double m1 = 0.0, sq1 = 0.0, m2 = 0.0, sq2 = 0.0;
    for (const auto& l : latents) {
      Vec th = sampling::sample_weights(t, l, 1.0);
      m1 += th[0];
      sq1 += th[0] * th[0];
      m2 += th[1];
      sq2 += th[1] * th[1];
    }
    double var1 = sq1 / S - (m1 / S) * (m1 / S);
    double var2 = sq2 / S - (m2 / S) * (m2 / S);
    j["tube_variance"] = {var1, var2};
    double d1 = std::abs(var1 - valley.posterior_variance()[0]) / valley.posterior_variance()[0];
    double d2 = std::abs(var2 - valley.posterior_variance()[1]) / valley.posterior_variance()[1];
    j["relative_defect"] = {d1, d2};
    bool ok = d1 <= 0.10 && d2 <= 0.10;
    detail::write_report(dir, j, ok);
    return ok;
  }

  throw ConfigError("unknown oracle suite \"" + suite +
                    "\"; available: fd-hessian, dense-eig, conjugate-linear, quadratic");
}

// --- tube inspection -------------------------------------------------------------

inline std::vector<std::string> inspect_tube(const std::string& path) {
  tube::Tube t = tube::load_tube(path);
  std::printf("tube checkpoint %s\n", path.c_str());
  std::printf("  dimension K        %lld\n", static_cast<long long>(t.dim()));
  std::printf("  spine steps T      %d\n", t.config.T);
  std::printf("  transverse k_perp  %d\n", t.config.k_perp);
  std::printf("  delta_s            %g\n", t.config.delta_s);
  std::printf("  beta_perp          %g\n", t.config.beta_perp);
  std::printf("  prior lambda       %g\n", t.prior.lambda);
  if (!t.diagnostics.empty()) {
    double max_drift = 0.0, min_eig = t.diagnostics.front().min_eig;
    double worst_cos = 1.0;
    for (const auto& row : t.diagnostics) {
      max_drift = std::max(max_drift, std::abs(row.drift));
      min_eig = std::min(min_eig, row.min_eig);
      if (row.t > 0) worst_cos = std::min(worst_cos, row.step_cosine);
    }
    std::printf("  loss at the mode   %.6f\n", t.diagnostics.front().loss);
    std::printf("  max |drift|        %.6f\n", max_drift);
    std::printf("  min eigenvalue     %.6f\n", min_eig);
    std::printf("  worst step cosine  %.6f\n", worst_cos);
  }
  auto issues = tube::check_tube_invariants(t);
  if (issues.empty()) {
    std::printf("  invariants         all pass\n");
  } else {
    std::printf("  invariants         %zu issue(s)\n", issues.size());
    for (const auto& msg : issues) std::printf("    %s\n", msg.c_str());
  }
  return issues;
}

}  // namespace trl::experiment

#endif
