#ifndef TRL_METRICS_HPP
#define TRL_METRICS_HPP

// Scoring shared by every posterior method: accuracy and calibration for
// regression (Gaussian scores over total predictive variance) and binary
// classification (log loss, Brier, expected calibration error).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "trl/common.hpp"
#include "trl/errors.hpp"
#include "trl/sampling.hpp"

namespace trl::metrics {

struct MetricsReport {
  std::string method;
  std::string task;
  std::uint64_t seed = 0;
  std::string config_hash;

  std::optional<double> rmse;
  std::optional<double> nll;
  std::optional<double> brier;
  std::optional<double> ece;
  std::optional<double> accuracy;
  std::optional<double> z_var;
  std::optional<double> coverage_1s;
  std::optional<double> coverage_2s;
  std::optional<double> coverage_3s;

  int ece_bins = 0;              // bin count used for ECE, 0 when not computed
  double sigma_aleatoric = 0.0;  // observation noise folded into regression scores
  bool nll_infinite = false;     // a zero-variance point made the log score diverge
  bool nll_clamped = false;      // a probability hit the clamp floor
  int point_count = 0;
};

// Gaussian scores; the summary's variance is epistemic, observation noise is
// added here so every method is scored on the same total predictive variance
inline MetricsReport regression_scores(const Vec& y, const sampling::PredictiveSummary& summary,
                                       double sigma_aleatoric) {
  if (summary.task != nn::Task::Regression)
    throw ConfigError("regression scores need a regression summary");
  Index n = y.size();
  if (summary.mean.size() != n || summary.variance.size() != n)
    throw ShapeError("summary does not match the target vector");
  if (n < 1) throw ConfigError("empty test set");
  if (sigma_aleatoric < 0.0) throw ConfigError("negative observation noise");

  MetricsReport report;
  report.task = "regression";
  report.sigma_aleatoric = sigma_aleatoric;
  report.point_count = static_cast<int>(n);

  double sq_sum = 0.0, nll_sum = 0.0;
  double z_sum = 0.0, z_sq_sum = 0.0;
  int in1 = 0, in2 = 0, in3 = 0;
  for (Index i = 0; i < n; ++i) {
    double resid = y[i] - summary.mean[i];
    sq_sum += resid * resid;
    double total_var = summary.variance[i] + sigma_aleatoric * sigma_aleatoric;
    double z;
    if (total_var <= 0.0) {
      report.nll_infinite = true;
      nll_sum = std::numeric_limits<double>::infinity();
      // a point mass: exactly-covered residuals score z = 0, anything else diverges
      z = (resid == 0.0) ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
      nll_sum += 0.5 * (std::log(2.0 * kPi * total_var) + resid * resid / total_var);
      z = resid / std::sqrt(total_var);
    }
    z_sum += z;
    z_sq_sum += z * z;
    double az = std::abs(z);
    if (az <= 1.0) ++in1;
    if (az <= 2.0) ++in2;
    if (az <= 3.0) ++in3;
  }

  double dn = static_cast<double>(n);
  report.rmse = std::sqrt(sq_sum / dn);
  report.nll = report.nll_infinite ? std::numeric_limits<double>::infinity() : nll_sum / dn;
  double z_mean = z_sum / dn;
  report.z_var = z_sq_sum / dn - z_mean * z_mean;
  report.coverage_1s = in1 / dn;
  report.coverage_2s = in2 / dn;
  report.coverage_3s = in3 / dn;
  return report;
}

namespace detail {

constexpr double kProbFloor = 1e-12;

inline int clamp_bin(double value, int bins) {
  int b = static_cast<int>(std::floor(value * bins));
  if (b < 0) b = 0;
  if (b >= bins) b = bins - 1;
  return b;
}

}  // namespace detail

struct ReliabilityBin {
  int bin = 0;
  double confidence = 0.0;  // mean confidence of the bin's points, center if empty
  double accuracy = 0.0;
  double mass = 0.0;
};

// equal-width confidence bins over [0, 1]; binary confidence is max(p, 1-p)
inline std::vector<ReliabilityBin> reliability_bins(const Vec& labels,
                                                    const sampling::PredictiveSummary& summary,
                                                    int bins = 15) {
  if (summary.task != nn::Task::Classification)
    throw ConfigError("reliability bins need a classification summary");
  if (bins < 1) throw ConfigError("bin count must be positive");
  Index n = labels.size();
  if (summary.mean.size() != n) throw ShapeError("summary does not match the label vector");

  std::vector<ReliabilityBin> out(static_cast<std::size_t>(bins));
  std::vector<int> counts(static_cast<std::size_t>(bins), 0);
  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<int> correct(static_cast<std::size_t>(bins), 0);
  for (Index i = 0; i < n; ++i) {
    double p = summary.mean[i];
    int pred = p >= 0.5 ? 1 : 0;
    double conf = pred == 1 ? p : 1.0 - p;
    int b = detail::clamp_bin(conf, bins);
    ++counts[static_cast<std::size_t>(b)];
    conf_sum[static_cast<std::size_t>(b)] += conf;
    if (pred == static_cast<int>(labels[i])) ++correct[static_cast<std::size_t>(b)];
  }
  for (int b = 0; b < bins; ++b) {
    auto ub = static_cast<std::size_t>(b);
    out[ub].bin = b;
    out[ub].mass = n > 0 ? static_cast<double>(counts[ub]) / static_cast<double>(n) : 0.0;
    if (counts[ub] > 0) {
      out[ub].confidence = conf_sum[ub] / counts[ub];
      out[ub].accuracy = static_cast<double>(correct[ub]) / counts[ub];
    } else {
      out[ub].confidence = (b + 0.5) / bins;
      out[ub].accuracy = 0.0;
    }
  }
  return out;
}

inline MetricsReport classification_scores(const Vec& labels,
                                           const sampling::PredictiveSummary& summary,
                                           int ece_bins = 15) {
  if (summary.task != nn::Task::Classification)
    throw ConfigError("classification scores need a classification summary");
  Index n = labels.size();
  if (summary.mean.size() != n) throw ShapeError("summary does not match the label vector");
  if (n < 1) throw ConfigError("empty test set");

  MetricsReport report;
  report.task = "classification";
  report.ece_bins = ece_bins;
  report.point_count = static_cast<int>(n);

  double nll_sum = 0.0, brier_sum = 0.0;
  int correct = 0;
  for (Index i = 0; i < n; ++i) {
    double y = labels[i];
    if (y != 0.0 && y != 1.0) throw ConfigError("labels must be 0 or 1");
    double p = summary.mean[i];
    if (p < 0.0 || p > 1.0) throw ConfigError("probabilities must lie in [0, 1]");
    double p_true = y == 1.0 ? p : 1.0 - p;
    if (p_true < detail::kProbFloor) {
      p_true = detail::kProbFloor;
      report.nll_clamped = true;
    }
    nll_sum += -std::log(p_true);
    brier_sum += (p - y) * (p - y);
    if ((p >= 0.5 ? 1.0 : 0.0) == y) ++correct;
  }

  double dn = static_cast<double>(n);
  report.nll = nll_sum / dn;
  report.brier = brier_sum / dn;
  report.accuracy = correct / dn;

  auto bins = reliability_bins(labels, summary, ece_bins);
  double ece = 0.0;
  for (const auto& b : bins) ece += b.mass * std::abs(b.accuracy - b.confidence);
  report.ece = ece;
  return report;
}

namespace detail {

inline std::string field_or_empty(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", *v);
  return buf;
}

}  // namespace detail

inline constexpr const char* kMetricsCsvHeader =
    "method,task,seed,config_hash,rmse,nll,brier,ece,accuracy,z_var,coverage_1s,coverage_2s,"
    "coverage_3s,ece_bins,sigma_aleatoric,nll_infinite,nll_clamped,point_count";

inline std::string metrics_csv_row(const MetricsReport& r) {
  std::string row;
  row += r.method + "," + r.task + "," + std::to_string(r.seed) + "," + r.config_hash;
  for (const auto* f : {&r.rmse, &r.nll, &r.brier, &r.ece, &r.accuracy, &r.z_var,
                        &r.coverage_1s, &r.coverage_2s, &r.coverage_3s})
    row += "," + detail::field_or_empty(*f);
  row += "," + std::to_string(r.ece_bins);
  row += "," + detail::field_or_empty(r.sigma_aleatoric);
  row += std::string(",") + (r.nll_infinite ? "1" : "0");
  row += std::string(",") + (r.nll_clamped ? "1" : "0");
  row += "," + std::to_string(r.point_count);
  return row;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsReport>& reports) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open metrics file for writing: " + path);
  out << kMetricsCsvHeader << "\n";
  for (const auto& r : reports) out << metrics_csv_row(r) << "\n";
}

inline void write_reliability_csv(const std::string& path,
                                  const std::vector<ReliabilityBin>& bins) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open reliability file for writing: " + path);
  out << "bin,confidence,accuracy,mass\n";
  char buf[160];
  for (const auto& b : bins) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", b.bin, b.confidence, b.accuracy,
                  b.mass);
    out << buf;
  }
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["task"] = r.task;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v)
      j[key] = *v;
    else
      j[key] = nullptr;
  };
  put("rmse", r.rmse);
  put("nll", r.nll);
  put("brier", r.brier);
  put("ece", r.ece);
  put("accuracy", r.accuracy);
  put("z_var", r.z_var);
  put("coverage_1s", r.coverage_1s);
  put("coverage_2s", r.coverage_2s);
  put("coverage_3s", r.coverage_3s);
  j["ece_bins"] = r.ece_bins;
  j["sigma_aleatoric"] = r.sigma_aleatoric;
  j["nll_infinite"] = r.nll_infinite;
  j["nll_clamped"] = r.nll_clamped;
  j["point_count"] = r.point_count;
  return j;
}

}  // namespace trl::metrics

#endif
