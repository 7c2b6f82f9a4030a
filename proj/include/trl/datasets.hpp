#ifndef TRL_DATASETS_HPP
#define TRL_DATASETS_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trl/common.hpp"
#include "trl/errors.hpp"
#include "trl/nn.hpp"
#include "trl/rng.hpp"

namespace trl::data {

using nn::Dataset;
using nn::Task;

// y = sin(x) + sigma * eps on uniform x; outlier_count reports |eps| > 6 draws
// (astronomically rare; callers flag them in metadata, nothing is clipped)
inline Dataset gen_sine(int n, double noise_sigma, double lo, double hi, std::uint64_t seed,
                        int* outlier_count = nullptr) {
  if (n < 1) throw ConfigError("n must be at least 1");
  if (noise_sigma < 0.0) throw ConfigError("noise must be non-negative");
  if (!(lo < hi)) throw ConfigError("empty x range");
  Pcg32 rng(seed);
  Dataset d;
  d.task = Task::Regression;
  d.inputs.resize(n, 1);
  d.targets.resize(n, 1);
  int outliers = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.uniform(lo, hi);
    double eps = rng.normal();
    if (std::abs(eps) > 6.0) ++outliers;
    d.inputs(i, 0) = x;
    d.targets(i, 0) = std::sin(x) + noise_sigma * eps;
  }
  if (outlier_count) *outlier_count = outliers;
  return d;
}

// two interleaved half-circles: class 0 on the upper unit arc, class 1 on the
// lower arc shifted by (1, 0.5).  Arcs are parameterized by angles linearly
// spaced over [0, pi] inclusive; isotropic Gaussian noise is added per point
// (x coordinate first, then y).  This matches the de-facto standard generator.
inline Dataset gen_two_moons(int n, double noise, std::uint64_t seed) {
  if (n < 2) throw ConfigError("n must be at least 2");
  if (noise < 0.0) throw ConfigError("noise must be non-negative");
  Pcg32 rng(seed);
  int n_out = n / 2;
  int n_in = n - n_out;
  Dataset d;
  d.task = Task::Classification;
  d.inputs.resize(n, 2);
  d.targets.resize(n, 1);
  auto angle = [](int i, int count) {
    return count > 1 ? kPi * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
  };
  for (int i = 0; i < n_out; ++i) {
    double phi = angle(i, n_out);
    d.inputs(i, 0) = std::cos(phi) + noise * rng.normal();
    d.inputs(i, 1) = std::sin(phi) + noise * rng.normal();
    d.targets(i, 0) = 0.0;
  }
  for (int i = 0; i < n_in; ++i) {
    double phi = angle(i, n_in);
    d.inputs(n_out + i, 0) = 1.0 - std::cos(phi) + noise * rng.normal();
    d.inputs(n_out + i, 1) = 0.5 - std::sin(phi) + noise * rng.normal();
    d.targets(n_out + i, 0) = 1.0;
  }
  return d;
}

// analytic problem with data loss 0.5 theta^T diag(a) theta and isotropic
// prior: the posterior is exactly N(0, (diag(a)+lambda I)^-1)
struct QuadraticValley {
  Vec a_diag;
  double lambda = 0.1;
  Vec start;  // suggested tube start; the exact mode is the origin

  Index dim() const { return a_diag.size(); }
  Vec map() const { return Vec::Zero(dim()); }

  double data_loss(const Vec& theta) const {
    return 0.5 * theta.dot(a_diag.cwiseProduct(theta));
  }
  double total_loss(const Vec& theta) const {
    return data_loss(theta) + 0.5 * lambda * theta.squaredNorm();
  }
  Vec total_gradient(const Vec& theta) const {
    return a_diag.cwiseProduct(theta) + lambda * theta;
  }
  Vec hessian_diag() const { return a_diag.array() + lambda; }
  Vec posterior_variance() const { return hessian_diag().cwiseInverse(); }
  Index tangent_axis() const {
    Index idx = 0;
    a_diag.minCoeff(&idx);
    return idx;
  }
};

inline QuadraticValley quadratic_valley(Vec a_diag, double lambda, Vec start = {}) {
  if (a_diag.size() < 2) throw ConfigError("quadratic valley needs at least two dimensions");
  if ((a_diag.array() < 0.0).any()) throw ConfigError("curvature diagonal must be non-negative");
  QuadraticValley q;
  q.a_diag = std::move(a_diag);
  q.lambda = lambda;
  q.start = start.size() > 0 ? std::move(start) : Vec::Zero(q.a_diag.size());
  if (q.start.size() != q.dim()) throw ShapeError("start point has wrong dimension");
  return q;
}

// --- CSV + metadata export ---------------------------------------------------

inline void export_dataset(const std::string& base_path, const Dataset& d,
                           const nlohmann::json& metadata) {
  std::ofstream csv(base_path + ".csv");
  if (!csv) throw ConfigError("cannot open dataset csv for writing: " + base_path + ".csv");
  csv << std::setprecision(17);
  for (Index j = 0; j < d.inputs.cols(); ++j) csv << "x" << (j + 1) << ",";
  csv << (d.task == Task::Regression ? "y" : "label") << "\n";
  for (Index i = 0; i < d.inputs.rows(); ++i) {
    for (Index j = 0; j < d.inputs.cols(); ++j) csv << d.inputs(i, j) << ",";
    if (d.task == Task::Regression)
      csv << d.targets(i, 0) << "\n";
    else
      csv << static_cast<int>(d.targets(i, 0)) << "\n";
  }
  std::ofstream meta(base_path + ".meta.json");
  if (!meta) throw ConfigError("cannot open dataset metadata for writing");
  nlohmann::json j = metadata;
  j["rng"] = Pcg32::generator_id();
  j["task"] = d.task == Task::Regression ? "regression" : "classification";
  j["rows"] = d.inputs.rows();
  j["input_dim"] = d.inputs.cols();
  meta << j.dump(2) << "\n";
}

inline std::pair<Dataset, nlohmann::json> import_dataset(const std::string& base_path) {
  std::ifstream meta(base_path + ".meta.json");
  if (!meta) throw ConfigError("cannot open dataset metadata: " + base_path + ".meta.json");
  nlohmann::json j;
  meta >> j;

  std::ifstream csv(base_path + ".csv");
  if (!csv) throw ConfigError("cannot open dataset csv: " + base_path + ".csv");
  std::string line;
  if (!std::getline(csv, line)) throw ConfigError("dataset csv is empty");
  std::vector<std::vector<double>> rows;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError("dataset csv has no data rows");

  Dataset d;
  d.task = j.at("task").get<std::string>() == "regression" ? Task::Regression
                                                           : Task::Classification;
  Index n = static_cast<Index>(rows.size());
  Index dim = static_cast<Index>(rows.front().size()) - 1;
  d.inputs.resize(n, dim);
  d.targets.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    if (static_cast<Index>(rows[static_cast<std::size_t>(i)].size()) != dim + 1)
      throw ConfigError("ragged dataset csv at row " + std::to_string(i));
    for (Index c = 0; c < dim; ++c) d.inputs(i, c) = rows[static_cast<std::size_t>(i)][c];
    d.targets(i, 0) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(dim)];
  }
  return {std::move(d), std::move(j)};
}

}  // namespace trl::data

#endif
