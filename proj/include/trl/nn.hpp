#ifndef TRL_NN_HPP
#define TRL_NN_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trl/common.hpp"
#include "trl/errors.hpp"
#include "trl/rng.hpp"

namespace trl::nn {

enum class Activation { Tanh };
enum class HeadKind { GaussianRegression, BernoulliLogit };
enum class Task { Regression, Classification };

struct Head {
  HeadKind kind = HeadKind::GaussianRegression;
  double noise_sigma = 0.1;  // observation noise, regression only
};

// one tensor of one layer inside the flat parameter vector
struct ParamSlice {
  int layer = 0;
  bool bias = false;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;
  Index count() const { return rows * cols; }
};

// all weights and biases of a network in a single contiguous vector;
// weights are stored column-major, biases follow their weight block
struct FlatParams {
  Vec values;
  std::vector<ParamSlice> layout;

  static std::vector<ParamSlice> make_layout(const std::vector<int>& widths) {
    if (widths.size() < 2) throw ConfigError("layer_widths needs at least two entries");
    std::vector<ParamSlice> out;
    Index off = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      if (widths[l] <= 0 || widths[l + 1] <= 0) throw ConfigError("layer widths must be positive");
      Index rows = widths[l + 1];
      Index cols = widths[l];
      out.push_back({static_cast<int>(l), false, off, rows, cols});
      off += rows * cols;
      out.push_back({static_cast<int>(l), true, off, rows, 1});
      off += rows;
    }
    return out;
  }

  static FlatParams zeros(const std::vector<int>& widths) {
    FlatParams p;
    p.layout = make_layout(widths);
    const ParamSlice& last = p.layout.back();
    p.values = Vec::Zero(last.offset + last.count());
    return p;
  }

  Index size() const { return values.size(); }

  Eigen::Map<const Mat> weight(int layer) const {
    const ParamSlice& s = layout.at(2 * static_cast<std::size_t>(layer));
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<Mat> weight(int layer) {
    const ParamSlice& s = layout.at(2 * static_cast<std::size_t>(layer));
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Vec> bias(int layer) const {
    const ParamSlice& s = layout.at(2 * static_cast<std::size_t>(layer) + 1);
    return {values.data() + s.offset, s.rows};
  }
  Eigen::Map<Vec> bias(int layer) {
    const ParamSlice& s = layout.at(2 * static_cast<std::size_t>(layer) + 1);
    return {values.data() + s.offset, s.rows};
  }

  // layout must tile [0, size) exactly, in order
  void validate() const {
    Index off = 0;
    for (const ParamSlice& s : layout) {
      if (s.offset != off) throw ConfigError("parameter layout has gaps or overlaps");
      off += s.count();
    }
    if (off != values.size()) throw ConfigError("parameter layout does not cover the value vector");
  }
};

struct MlpModel {
  std::vector<int> layer_widths;
  Activation activation = Activation::Tanh;
  Head head;
  FlatParams params;
  std::uint64_t init_seed = 0;

  int input_dim() const { return layer_widths.front(); }
  int output_dim() const { return layer_widths.back(); }
  int layer_count() const { return static_cast<int>(layer_widths.size()) - 1; }
  Index param_count() const { return params.size(); }

  static Index count_params(const std::vector<int>& widths) {
    Index k = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
      k += static_cast<Index>(widths[l + 1]) * (widths[l] + 1);
    return k;
  }

  // scaled-uniform init: entries of layer l drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
  // weights filled column-major, then the bias, layer by layer
  static MlpModel create(std::vector<int> widths, Head head, std::uint64_t seed) {
    MlpModel m;
    m.layer_widths = std::move(widths);
    m.head = head;
    m.params = FlatParams::zeros(m.layer_widths);
    m.init_seed = seed;
    Pcg32 rng(seed);
    for (int l = 0; l < m.layer_count(); ++l) {
      double bound = 1.0 / std::sqrt(static_cast<double>(m.layer_widths[l]));
      auto w = m.params.weight(l);
      for (Index c = 0; c < w.cols(); ++c)
        for (Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-bound, bound);
      auto b = m.params.bias(l);
      for (Index r = 0; r < b.size(); ++r) b[r] = rng.uniform(-bound, bound);
    }
    return m;
  }

  MlpModel with_params(const Vec& theta) const {
    if (theta.size() != params.size()) throw ShapeError("parameter vector has wrong length");
    MlpModel m = *this;
    m.params.values = theta;
    return m;
  }
};

// targets hold regression responses, or 0/1 class labels, one row per input
struct Dataset {
  Mat inputs;
  Mat targets;
  Task task = Task::Regression;
  Index size() const { return inputs.rows(); }
};

// isotropic Gaussian prior with precision lambda
struct PriorSpec {
  double lambda = 0.1;
};

namespace detail {

inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

// activations per layer: a[0] is the input batch, a[l] for l>=1 the tanh
// output feeding layer l, f the final pre-head output
struct ForwardCache {
  std::vector<Mat> a;
  Mat f;
};

inline void forward_pass(const MlpModel& model, const Mat& x, ForwardCache& cache,
                         bool check_finite) {
  if (x.cols() != model.input_dim()) throw ShapeError("input has wrong column count");
  int L = model.layer_count();
  cache.a.assign(1, x);
  Mat cur = x;
  for (int l = 0; l < L; ++l) {
    Mat z = cur * model.params.weight(l).transpose();
    z.rowwise() += model.params.bias(l).transpose();
    if (check_finite && !z.allFinite())
      throw NumericError("non-finite activations in layer " + std::to_string(l));
    if (l + 1 < L) {
      cur = z.array().tanh().matrix();
      cache.a.push_back(cur);
    } else {
      cache.f = std::move(z);
    }
  }
}

// residual scaled to the head's natural gradient: d(sum NLL)/df
inline Mat head_delta(const MlpModel& model, const Dataset& data, const Mat& f) {
  if (data.task == Task::Regression) {
    double s2 = model.head.noise_sigma * model.head.noise_sigma;
    return (f - data.targets) / s2;
  }
  Mat p = f.unaryExpr([](double z) { return sigmoid(z); });
  return p - data.targets;
}

inline double head_nll(const MlpModel& model, const Dataset& data, const Mat& f) {
  if (data.task == Task::Regression) {
    double s2 = model.head.noise_sigma * model.head.noise_sigma;
    double quad = (f - data.targets).squaredNorm() / (2.0 * s2);
    double norm = 0.5 * std::log(2.0 * kPi * s2) * static_cast<double>(f.size());
    return quad + norm;
  }
  double nll = 0.0;
  for (Index i = 0; i < f.rows(); ++i)
    for (Index j = 0; j < f.cols(); ++j)
      nll += softplus(f(i, j)) - data.targets(i, j) * f(i, j);
  return nll;
}

inline void check_data(const MlpModel& model, const Dataset& data) {
  if (data.inputs.cols() != model.input_dim()) throw ShapeError("dataset input dim mismatch");
  if (data.targets.cols() != model.output_dim()) throw ShapeError("dataset target dim mismatch");
  if (data.inputs.rows() != data.targets.rows()) throw ShapeError("inputs/targets row mismatch");
  bool regression_head = model.head.kind == HeadKind::GaussianRegression;
  if (regression_head != (data.task == Task::Regression))
    throw ConfigError("dataset task does not match model head");
}

}  // namespace detail

inline Mat forward(const MlpModel& model, const Mat& x) {
  detail::ForwardCache cache;
  detail::forward_pass(model, x, cache, false);
  return cache.f;
}

// unnormalized negative log posterior: sum of per-point NLL plus (lambda/2)|theta|^2
inline double neg_log_posterior(const MlpModel& model, const Dataset& data,
                                const PriorSpec& prior) {
  detail::check_data(model, data);
  detail::ForwardCache cache;
  detail::forward_pass(model, data.inputs, cache, true);
  double nll = detail::head_nll(model, data, cache.f);
  return nll + 0.5 * prior.lambda * model.params.values.squaredNorm();
}

inline Vec gradient(const MlpModel& model, const Dataset& data, const PriorSpec& prior) {
  detail::check_data(model, data);
  detail::ForwardCache cache;
  detail::forward_pass(model, data.inputs, cache, true);

  FlatParams g = FlatParams::zeros(model.layer_widths);
  Mat delta = detail::head_delta(model, data, cache.f);
  for (int l = model.layer_count() - 1; l >= 0; --l) {
    g.weight(l) = delta.transpose() * cache.a[static_cast<std::size_t>(l)];
    g.bias(l) = delta.colwise().sum().transpose();
    if (l > 0) {
      const Mat& a = cache.a[static_cast<std::size_t>(l)];
      delta = (delta * model.params.weight(l)).cwiseProduct(
          (1.0 - a.array().square()).matrix());
    }
  }
  Vec out = g.values + prior.lambda * model.params.values;
  if (!out.allFinite()) throw NumericError("non-finite gradient");
  return out;
}

// Hessian-vector product of neg_log_posterior via forward-over-reverse;
// exact, one forward-tangent plus one reverse-tangent sweep, no dense Hessian
inline Vec hvp(const MlpModel& model, const Dataset& data, const PriorSpec& prior,
               const Vec& v) {
  detail::check_data(model, data);
  if (v.size() != model.param_count()) throw ShapeError("direction has wrong length");
  int L = model.layer_count();

  FlatParams dir = FlatParams::zeros(model.layer_widths);
  dir.values = v;

  detail::ForwardCache cache;
  detail::forward_pass(model, data.inputs, cache, true);

  // tangent sweep: Ra[l] alongside a[l]
  std::vector<Mat> Ra(1, Mat::Zero(data.inputs.rows(), data.inputs.cols()));
  Mat Rf;
  for (int l = 0; l < L; ++l) {
    const Mat& a = cache.a[static_cast<std::size_t>(l)];
    Mat Rz = a * dir.weight(l).transpose() + Ra.back() * model.params.weight(l).transpose();
    Rz.rowwise() += dir.bias(l).transpose();
    if (l + 1 < L) {
      const Mat& a_next = cache.a[static_cast<std::size_t>(l) + 1];
      Ra.push_back((1.0 - a_next.array().square()).matrix().cwiseProduct(Rz));
    } else {
      Rf = std::move(Rz);
    }
  }

  Mat delta = detail::head_delta(model, data, cache.f);
  Mat Rdelta;
  if (data.task == Task::Regression) {
    double s2 = model.head.noise_sigma * model.head.noise_sigma;
    Rdelta = Rf / s2;
  } else {
    Mat p = cache.f.unaryExpr([](double z) { return detail::sigmoid(z); });
    Rdelta = (p.array() * (1.0 - p.array()) * Rf.array()).matrix();
  }

  FlatParams hv = FlatParams::zeros(model.layer_widths);
  for (int l = L - 1; l >= 0; --l) {
    const Mat& a = cache.a[static_cast<std::size_t>(l)];
    const Mat& ra = Ra[static_cast<std::size_t>(l)];
    hv.weight(l) = Rdelta.transpose() * a + delta.transpose() * ra;
    hv.bias(l) = Rdelta.colwise().sum().transpose();
    if (l > 0) {
      Eigen::ArrayXXd act = cache.a[static_cast<std::size_t>(l)].array();
      Eigen::ArrayXXd dphi = 1.0 - act.square();
      Mat common = delta * model.params.weight(l);
      Mat Rcommon = Rdelta * model.params.weight(l) + delta * dir.weight(l);
      // d(tanh')/dz = -2 tanh tanh', applied through the activation tangent Ra
      Rdelta = (Rcommon.array() * dphi - 2.0 * act * ra.array() * common.array()).matrix();
      delta = (common.array() * dphi).matrix();
    }
  }
  Vec out = hv.values + prior.lambda * v;
  if (!out.allFinite()) throw NumericError("non-finite curvature product");
  return out;
}

// generalized Gauss-Newton product: J^T H_out J v plus the prior term;
// coincides with the Fisher product for both supported heads
inline Vec ggn_vp(const MlpModel& model, const Dataset& data, const PriorSpec& prior,
                  const Vec& v) {
  detail::check_data(model, data);
  if (v.size() != model.param_count()) throw ShapeError("direction has wrong length");
  int L = model.layer_count();

  FlatParams dir = FlatParams::zeros(model.layer_widths);
  dir.values = v;

  detail::ForwardCache cache;
  detail::forward_pass(model, data.inputs, cache, true);

  Mat Ra = Mat::Zero(data.inputs.rows(), data.inputs.cols());
  Mat Jv;
  for (int l = 0; l < L; ++l) {
    const Mat& a = cache.a[static_cast<std::size_t>(l)];
    Mat Rz = a * dir.weight(l).transpose() + Ra * model.params.weight(l).transpose();
    Rz.rowwise() += dir.bias(l).transpose();
    if (l + 1 < L) {
      const Mat& a_next = cache.a[static_cast<std::size_t>(l) + 1];
      Ra = (1.0 - a_next.array().square()).matrix().cwiseProduct(Rz);
    } else {
      Jv = std::move(Rz);
    }
  }

  Mat u;
  if (data.task == Task::Regression) {
    double s2 = model.head.noise_sigma * model.head.noise_sigma;
    u = Jv / s2;
  } else {
    Mat p = cache.f.unaryExpr([](double z) { return detail::sigmoid(z); });
    u = (p.array() * (1.0 - p.array()) * Jv.array()).matrix();
  }

  // pull back through the linearized network only
  FlatParams gv = FlatParams::zeros(model.layer_widths);
  Mat delta = std::move(u);
  for (int l = L - 1; l >= 0; --l) {
    const Mat& a = cache.a[static_cast<std::size_t>(l)];
    gv.weight(l) = delta.transpose() * a;
    gv.bias(l) = delta.colwise().sum().transpose();
    if (l > 0)
      delta = (delta * model.params.weight(l)).cwiseProduct(
          (1.0 - a.array().square()).matrix());
  }
  Vec out = gv.values + prior.lambda * v;
  if (!out.allFinite()) throw NumericError("non-finite curvature product");
  return out;
}

// full-batch Adam on neg_log_posterior; one epoch is one step.  The seed is
// reserved for stochastic batch schedules and unused by full-batch training,
// which is deterministic.
inline MlpModel train_map(MlpModel model, const Dataset& data, const PriorSpec& prior,
                          int epochs, double lr, std::uint64_t /*seed*/ = 0) {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  detail::check_data(model, data);

  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Vec m = Vec::Zero(model.param_count());
  Vec s = Vec::Zero(model.param_count());
  double initial = neg_log_posterior(model, data, prior);
  double blow_up = 1e6 * std::max(1.0, std::abs(initial));

  for (int t = 1; t <= epochs; ++t) {
    Vec g = gradient(model, data, prior);
    m = beta1 * m + (1.0 - beta1) * g;
    s = beta2 * s + (1.0 - beta2) * g.cwiseProduct(g);
    double c1 = 1.0 - std::pow(beta1, t);
    double c2 = 1.0 - std::pow(beta2, t);
    Vec update = (m / c1).cwiseQuotient(((s / c2).cwiseSqrt().array() + eps).matrix());
    model.params.values -= lr * update;
    double loss = neg_log_posterior(model, data, prior);
    if (!std::isfinite(loss) || std::abs(loss) > blow_up)
      throw TrainingDivergence("training diverged at epoch " + std::to_string(t) +
                               " (loss " + std::to_string(loss) + ")");
  }
  return model;
}

inline std::string head_kind_name(HeadKind k) {
  return k == HeadKind::GaussianRegression ? "gaussian_regression" : "bernoulli_logit";
}

inline HeadKind head_kind_from_name(const std::string& s) {
  if (s == "gaussian_regression") return HeadKind::GaussianRegression;
  if (s == "bernoulli_logit") return HeadKind::BernoulliLogit;
  throw ConfigError("unknown head kind: " + s);
}

inline nlohmann::json model_to_json(const MlpModel& model) {
  nlohmann::json j;
  j["layer_widths"] = model.layer_widths;
  j["activation"] = "tanh";
  j["head"] = {{"kind", head_kind_name(model.head.kind)},
               {"noise_sigma", model.head.noise_sigma}};
  j["init_seed"] = model.init_seed;
  j["param_count"] = model.param_count();
  j["values"] = std::vector<double>(model.params.values.data(),
                                    model.params.values.data() + model.params.values.size());
  return j;
}

inline MlpModel model_from_json(const nlohmann::json& j) {
  MlpModel m;
  m.layer_widths = j.at("layer_widths").get<std::vector<int>>();
  if (j.at("activation").get<std::string>() != "tanh")
    throw ConfigError("unsupported activation in checkpoint");
  m.head.kind = head_kind_from_name(j.at("head").at("kind").get<std::string>());
  m.head.noise_sigma = j.at("head").at("noise_sigma").get<double>();
  m.init_seed = j.value("init_seed", std::uint64_t{0});
  auto values = j.at("values").get<std::vector<double>>();
  m.params = FlatParams::zeros(m.layer_widths);
  if (static_cast<Index>(values.size()) != m.params.size())
    throw ConfigError("checkpoint value count does not match layer widths");
  m.params.values = Eigen::Map<const Vec>(values.data(), static_cast<Index>(values.size()));
  if (j.contains("param_count") && j.at("param_count").get<Index>() != m.params.size())
    throw ConfigError("checkpoint param_count is inconsistent");
  return m;
}

inline void save_model(const std::string& path, const MlpModel& model) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  out << model_to_json(model).dump(2) << "\n";
}

inline MlpModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  return model_from_json(j);
}

}  // namespace trl::nn

#endif
