#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <vector>

#include "trl/metrics.hpp"
#include "trl/rng.hpp"

using trl::Index;
using trl::Vec;
namespace metrics = trl::metrics;
namespace sampling = trl::sampling;
namespace nn = trl::nn;

namespace {

sampling::PredictiveSummary regression_summary(const Vec& mean, const Vec& variance) {
  sampling::PredictiveSummary s;
  s.task = nn::Task::Regression;
  s.mean = mean;
  s.variance = variance;
  s.sample_count = 0;
  return s;
}

sampling::PredictiveSummary classification_summary(const Vec& p) {
  sampling::PredictiveSummary s;
  s.task = nn::Task::Classification;
  s.mean = p;
  s.entropy = Vec::Zero(p.size());
  s.sample_count = 0;
  return s;
}

}  // namespace

TEST_CASE("exact predictions with unit noise score perfectly") {
  Vec y(4);
  y << -1.0, 0.0, 2.0, 5.0;
  auto report = metrics::regression_scores(y, regression_summary(y, Vec::Zero(4)), 1.0);
  CHECK(report.rmse.value() == 0.0);
  CHECK(report.z_var.value() == 0.0);
  CHECK(report.coverage_1s.value() == 1.0);
  CHECK(report.coverage_3s.value() == 1.0);
  // density of a standard normal at its mean
  CHECK(report.nll.value() == Catch::Approx(0.5 * std::log(2.0 * trl::kPi)).epsilon(1e-12));
  CHECK_FALSE(report.nll_infinite);
}

TEST_CASE("gaussian log score matches the hand-computed density") {
  Vec y(1), mu(1), var(1);
  y << 1.0;
  mu << 0.0;
  var << 4.0;
  auto report = metrics::regression_scores(y, regression_summary(mu, var), 0.0);
  double want = 0.5 * (std::log(2.0 * trl::kPi * 4.0) + 0.25);
  CHECK(report.nll.value() == Catch::Approx(want).epsilon(1e-12));
  CHECK(report.rmse.value() == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(report.sigma_aleatoric == 0.0);
}

TEST_CASE("calibrated gaussian predictions have unit z-variance and normal coverage") {
  const Index n = 100000;
  trl::Pcg32 rng(21);
  Vec y(n), mu(n), var(n);
  for (Index i = 0; i < n; ++i) {
    mu[i] = rng.uniform(-2.0, 2.0);
    double sigma = rng.uniform(0.2, 2.0);
    var[i] = sigma * sigma - 0.01;  // leave room for the aleatoric part
    y[i] = mu[i] + sigma * rng.normal();
  }
  auto report = metrics::regression_scores(y, regression_summary(mu, var), 0.1);
  CHECK(report.z_var.value() == Catch::Approx(1.0).margin(0.02));
  CHECK(report.coverage_1s.value() == Catch::Approx(0.6827).margin(0.005));
  CHECK(report.coverage_2s.value() == Catch::Approx(0.9545).margin(0.005));
  CHECK(report.coverage_3s.value() == Catch::Approx(0.9973).margin(0.003));
}

TEST_CASE("a zero-variance miss flags an infinite log score but still reports") {
  Vec y(2), mu(2);
  y << 1.0, 2.0;
  mu << 1.0, 1.5;
  auto report = metrics::regression_scores(y, regression_summary(mu, Vec::Zero(2)), 0.0);
  CHECK(report.nll_infinite);
  CHECK(std::isinf(report.nll.value()));
  CHECK(report.rmse.value() == Catch::Approx(0.5 / std::sqrt(2.0)).epsilon(1e-12));
  // the exactly-covered point counts as covered, the miss never does
  CHECK(report.coverage_1s.value() == 0.5);
}

TEST_CASE("perfect confident classification scores zero everywhere") {
  Vec labels(4), p(4);
  labels << 1.0, 0.0, 1.0, 0.0;
  p << 1.0, 0.0, 1.0, 0.0;
  auto report = metrics::classification_scores(labels, classification_summary(p));
  CHECK(report.nll.value() == 0.0);
  CHECK(report.brier.value() == 0.0);
  CHECK(report.ece.value() == 0.0);
  CHECK(report.accuracy.value() == 1.0);
  CHECK_FALSE(report.nll_clamped);
  CHECK(report.ece_bins == 15);
}

TEST_CASE("the constant half predictor lands on the closed-form scores") {
  Vec labels(6), p(6);
  labels << 1.0, 0.0, 1.0, 0.0, 1.0, 0.0;
  p.setConstant(0.5);
  auto report = metrics::classification_scores(labels, classification_summary(p));
  CHECK(report.nll.value() == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(report.brier.value() == Catch::Approx(0.25).epsilon(1e-12));
  CHECK(report.ece.value() == Catch::Approx(0.0).margin(1e-12));
  CHECK(report.accuracy.value() == 0.5);
}

TEST_CASE("certain wrong probabilities hit the clamp floor") {
  Vec labels(1), p(1);
  labels << 1.0;
  p << 0.0;
  auto report = metrics::classification_scores(labels, classification_summary(p));
  CHECK(report.nll_clamped);
  CHECK(report.nll.value() == Catch::Approx(-std::log(1e-12)).epsilon(1e-9));
  CHECK(report.brier.value() == 1.0);
  CHECK(report.accuracy.value() == 0.0);
}

TEST_CASE("scores ignore the ordering of the test set") {
  trl::Pcg32 rng(5);
  const Index n = 400;
  Vec y(n), mu(n), var(n), labels(n), p(n);
  for (Index i = 0; i < n; ++i) {
    mu[i] = rng.normal();
    var[i] = rng.uniform(0.1, 2.0);
    y[i] = mu[i] + rng.normal();
    p[i] = rng.uniform(0.0, 1.0);
    labels[i] = rng.uniform(0.0, 1.0) < p[i] ? 1.0 : 0.0;
  }
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937 shuffle_rng(6);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  Vec y2(n), mu2(n), var2(n), labels2(n), p2(n);
  for (Index i = 0; i < n; ++i) {
    y2[i] = y[order[static_cast<std::size_t>(i)]];
    mu2[i] = mu[order[static_cast<std::size_t>(i)]];
    var2[i] = var[order[static_cast<std::size_t>(i)]];
    labels2[i] = labels[order[static_cast<std::size_t>(i)]];
    p2[i] = p[order[static_cast<std::size_t>(i)]];
  }

  auto r1 = metrics::regression_scores(y, regression_summary(mu, var), 0.3);
  auto r2 = metrics::regression_scores(y2, regression_summary(mu2, var2), 0.3);
  CHECK(r1.rmse.value() == Catch::Approx(r2.rmse.value()).epsilon(1e-12));
  CHECK(r1.nll.value() == Catch::Approx(r2.nll.value()).epsilon(1e-12));
  CHECK(r1.z_var.value() == Catch::Approx(r2.z_var.value()).epsilon(1e-12));
  CHECK(r1.coverage_1s.value() == r2.coverage_1s.value());

  auto c1 = metrics::classification_scores(labels, classification_summary(p));
  auto c2 = metrics::classification_scores(labels2, classification_summary(p2));
  CHECK(c1.nll.value() == Catch::Approx(c2.nll.value()).epsilon(1e-12));
  CHECK(c1.brier.value() == Catch::Approx(c2.brier.value()).epsilon(1e-12));
  CHECK(c1.ece.value() == Catch::Approx(c2.ece.value()).epsilon(1e-12));
  CHECK(c1.accuracy.value() == c2.accuracy.value());
}

TEST_CASE("a perfectly calibrated synthetic predictor has tiny calibration error") {
  const Index n = 100000;
  trl::Pcg32 rng(77);
  Vec labels(n), p(n);
  for (Index i = 0; i < n; ++i) {
    p[i] = rng.uniform(0.0, 1.0);
    labels[i] = rng.uniform(0.0, 1.0) < p[i] ? 1.0 : 0.0;
  }
  auto report = metrics::classification_scores(labels, classification_summary(p));
  CHECK(report.ece.value() <= 0.02);
}

TEST_CASE("log loss and brier prefer the generative probabilities") {
  const Index n = 20000;
  trl::Pcg32 rng(123);
  Vec labels(n), p(n);
  for (Index i = 0; i < n; ++i) {
    p[i] = rng.uniform(0.1, 0.9);
    labels[i] = rng.uniform(0.0, 1.0) < p[i] ? 1.0 : 0.0;
  }
  auto truth = metrics::classification_scores(labels, classification_summary(p));

  trl::Pcg32 perturb_rng(321);
  for (int trial = 0; trial < 10; ++trial) {
    double shift = perturb_rng.uniform(0.3, 0.8) * (trial % 2 == 0 ? 1.0 : -1.0);
    Vec q(n);
    for (Index i = 0; i < n; ++i) {
      double logit = std::log(p[i] / (1.0 - p[i])) + shift;
      q[i] = 1.0 / (1.0 + std::exp(-logit));
    }
    auto perturbed = metrics::classification_scores(labels, classification_summary(q));
    CHECK(truth.nll.value() < perturbed.nll.value());
    CHECK(truth.brier.value() < perturbed.brier.value());
  }
}

TEST_CASE("report files carry every score column") {
  Vec labels(4), p(4);
  labels << 1.0, 0.0, 1.0, 1.0;
  p << 0.9, 0.2, 0.7, 0.6;
  auto report = metrics::classification_scores(labels, classification_summary(p));
  report.method = "TRL";
  report.seed = 17;
  report.config_hash = "abc123";

  std::string path = "metrics_csv_test.csv";
  metrics::write_metrics_csv(path, {report});
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  in.close();
  std::remove(path.c_str());
  CHECK(header == std::string(metrics::kMetricsCsvHeader));
  CHECK(row.rfind("TRL,classification,17,abc123,", 0) == 0);
  // regression-only fields stay empty for a classification row
  CHECK(row.find(",,") != std::string::npos);

  auto j = metrics::report_to_json(report);
  CHECK(j["method"] == "TRL");
  CHECK(j["rmse"].is_null());
  CHECK(j["accuracy"].get<double>() == 1.0);
  CHECK(j["point_count"].get<int>() == 4);

  auto bins = metrics::reliability_bins(labels, classification_summary(p), 15);
  double mass = 0.0;
  for (const auto& b : bins) mass += b.mass;
  CHECK(mass == Catch::Approx(1.0).epsilon(1e-12));
  std::string rel_path = "reliability_csv_test.csv";
  metrics::write_reliability_csv(rel_path, bins);
  std::ifstream rin(rel_path);
  std::getline(rin, header);
  int rows = 0;
  while (std::getline(rin, row))
    if (!row.empty()) ++rows;
  rin.close();
  std::remove(rel_path.c_str());
  CHECK(header == "bin,confidence,accuracy,mass");
  CHECK(rows == 15);
}

TEST_CASE("score functions validate their inputs") {
  Vec y(2), mu(2), var(2);
  y << 0.0, 1.0;
  mu << 0.0, 1.0;
  var << 0.1, 0.1;
  auto good = regression_summary(mu, var);
  CHECK_THROWS_AS(metrics::regression_scores(Vec::Zero(3), good, 0.1), trl::ShapeError);
  CHECK_THROWS_AS(metrics::regression_scores(y, good, -0.1), trl::ConfigError);
  CHECK_THROWS_AS(metrics::classification_scores(y, good), trl::ConfigError);

  Vec labels(2), p(2);
  labels << 0.5, 1.0;
  p << 0.5, 0.5;
  CHECK_THROWS_AS(metrics::classification_scores(labels, classification_summary(p)),
                  trl::ConfigError);
}
