#ifndef TRL_BASELINES_HPP
#define TRL_BASELINES_HPP

// Dense Gaussian weight posteriors over the full network: Laplace with the
// complete regularized curvature matrix, sampled directly (ELA) or pushed
// through the network's linearisation (LLA).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Cholesky>

#include "trl/common.hpp"
#include "trl/curvature.hpp"
#include "trl/errors.hpp"
#include "trl/nn.hpp"
#include "trl/rng.hpp"
#include "trl/sampling.hpp"
#include "trl/serial.hpp"

namespace trl::baselines {

struct GaussianPosterior {
  Vec mean;       // the trained mode
  Mat precision;  // curvature plus prior, symmetric positive definite
  Mat chol_cov;   // lower triangular, chol_cov * chol_cov^T = precision^{-1}
  curvature::CurvatureKind kind_used = curvature::CurvatureKind::Ggn;
  double prior_lambda = 0.0;

  Index dim() const { return mean.size(); }
};

// Dense Laplace fit at the mode.  The covariance factor comes from a solve
// against the precision factor followed by a second Cholesky, so nothing
// beyond chol_cov has to be kept for sampling.
inline GaussianPosterior fit_laplace(const nn::MlpModel& map_model, const nn::Dataset& data,
                                     const nn::PriorSpec& prior, curvature::CurvatureKind kind,
                                     Index dense_guard = 4096) {
  Index K = map_model.param_count();
  if (K > dense_guard)
    throw ConfigError("parameter count " + std::to_string(K) +
                      " exceeds the dense posterior guard of " + std::to_string(dense_guard));

  curvature::MlpCurvatureOracle oracle(map_model, data, prior, kind);
  Mat precision = curvature::dense_operator(oracle, dense_guard);

  Eigen::LLT<Mat> prec_llt(precision);
  if (prec_llt.info() != Eigen::Success) {
    if (kind == curvature::CurvatureKind::ExactHessian)
      throw NumericError(
          "exact hessian is indefinite at the mode; refit with the rectified_hessian or "
          "ggn curvature kind");
    throw NumericError("curvature matrix is not positive definite; increase the prior "
                       "precision");
  }

  Mat cov = prec_llt.solve(Mat::Identity(K, K));
  cov = 0.5 * (cov + cov.transpose());
  Eigen::LLT<Mat> cov_llt(cov);
  if (cov_llt.info() != Eigen::Success)
    throw NumericError("posterior covariance lost positive definiteness during inversion");

  GaussianPosterior post;
  post.mean = map_model.params.values;
  post.precision = std::move(precision);
  post.chol_cov = cov_llt.matrixL();
  post.kind_used = kind;
  post.prior_lambda = prior.lambda;
  return post;
}

// Monte Carlo predictive of the full-network Gaussian: theta = mean + L xi.
inline sampling::PredictiveSummary ela_predict(const nn::MlpModel& map_model,
                                               const GaussianPosterior& posterior,
                                               const Mat& x_star, int S, std::uint64_t seed) {
  if (S < 2) throw ConfigError("predictive summaries need at least two samples");
  if (posterior.dim() != map_model.param_count())
    throw ShapeError("posterior dimension does not match the model");
  bool classify = map_model.head.kind == nn::HeadKind::BernoulliLogit;

  sampling::detail::MomentStream stream(x_star.rows());
  nn::MlpModel model = map_model;
  Pcg32 rng(seed);
  Vec xi(posterior.dim());
  for (int s = 0; s < S; ++s) {
    for (Index i = 0; i < xi.size(); ++i) xi[i] = rng.normal();
    model.params.values = posterior.mean + posterior.chol_cov * xi;
    stream.add(sampling::detail::observed_values(model, nn::forward(model, x_star)));
  }
  return sampling::detail::summarize(stream, classify);
}

enum class LlaMode { Mc, Probit };

namespace detail {

// gradient of the scalar network output at one input with respect to the
// flat parameter vector; same reverse sweep as the loss gradient but seeded
// with a unit output sensitivity and no head or prior terms
inline Vec output_jacobian(const nn::MlpModel& model, const Mat& x_row) {
  if (model.output_dim() != 1)
    throw ShapeError("linearised predictions support a single output unit");
  nn::detail::ForwardCache cache;
  nn::detail::forward_pass(model, x_row, cache, true);

  nn::FlatParams g = nn::FlatParams::zeros(model.layer_widths);
  Mat delta = Mat::Ones(1, 1);
  for (int l = model.layer_count() - 1; l >= 0; --l) {
    g.weight(l) = delta.transpose() * cache.a[static_cast<std::size_t>(l)];
    g.bias(l) = delta.colwise().sum().transpose();
    if (l > 0) {
      const Mat& a = cache.a[static_cast<std::size_t>(l)];
      delta = (delta * model.params.weight(l))
                  .cwiseProduct((1.0 - a.array().square()).matrix());
    }
  }
  return g.values;
}

}  // namespace detail

// Predictive of the linearised network.  The function-space marginal at each
// input is N(f_map, j^T Sigma j); the summary reports that epistemic variance
// for regression (observation noise is added by the scoring layer, like the
// sampled methods), and for classification squashes it through the logistic
// link by Monte Carlo or the probit-matched closed form.
inline sampling::PredictiveSummary lla_predict(const nn::MlpModel& map_model,
                                               const GaussianPosterior& posterior,
                                               const Mat& x_star, LlaMode mode = LlaMode::Probit,
                                               int S = 100, std::uint64_t seed = 0) {
  if (posterior.dim() != map_model.param_count())
    throw ShapeError("posterior dimension does not match the model");
  Index n = x_star.rows();
  bool classify = map_model.head.kind == nn::HeadKind::BernoulliLogit;

  Mat f_map = nn::forward(map_model, x_star);
  Vec mu(n), var(n);
  for (Index i = 0; i < n; ++i) {
    Vec j = detail::output_jacobian(map_model, x_star.row(i));
    mu[i] = f_map(i, 0);
    var[i] = (posterior.chol_cov.transpose() * j).squaredNorm();
  }

  sampling::PredictiveSummary summary;
  if (!classify) {
    // regression is analytic regardless of the requested mode
    summary.task = nn::Task::Regression;
    summary.mean = mu;
    summary.variance = var;
    summary.sample_count = 0;
    return summary;
  }

  summary.task = nn::Task::Classification;
  summary.mean = Vec(n);
  summary.entropy = Vec(n);
  if (mode == LlaMode::Probit) {
    for (Index i = 0; i < n; ++i)
      summary.mean[i] = nn::detail::sigmoid(mu[i] / std::sqrt(1.0 + kPi * var[i] / 8.0));
    summary.sample_count = 0;
  } else {
    if (S < 2) throw ConfigError("predictive summaries need at least two samples");
    Pcg32 rng(seed);
    Vec acc = Vec::Zero(n);
    for (int s = 0; s < S; ++s)
      for (Index i = 0; i < n; ++i)
        acc[i] += nn::detail::sigmoid(mu[i] + std::sqrt(var[i]) * rng.normal());
    summary.mean = acc / static_cast<double>(S);
    summary.sample_count = S;
  }
  for (Index i = 0; i < n; ++i)
    summary.entropy[i] = sampling::detail::entropy_nats(summary.mean[i]);
  return summary;
}

inline nlohmann::json posterior_to_json(const GaussianPosterior& posterior) {
  nlohmann::json j;
  j["kind"] = curvature::curvature_kind_name(posterior.kind_used);
  j["prior_lambda"] = posterior.prior_lambda;
  j["dim"] = posterior.dim();
  j["mean"] = serial::vec_to_json(posterior.mean);
  j["chol_cov"] = serial::mat_to_json(posterior.chol_cov);
  return j;
}

// rebuilds the precision from the stored covariance factor so the loaded
// object honours precision * covariance = I
inline GaussianPosterior posterior_from_json(const nlohmann::json& j) {
  GaussianPosterior post;
  post.kind_used = curvature::curvature_kind_from_name(j.at("kind").get<std::string>());
  post.prior_lambda = j.at("prior_lambda").get<double>();
  post.mean = serial::vec_from_json(j.at("mean"));
  post.chol_cov = serial::mat_from_json(j.at("chol_cov"));
  Index K = post.mean.size();
  if (post.chol_cov.rows() != K || post.chol_cov.cols() != K)
    throw ConfigError("posterior checkpoint has inconsistent shapes");
  auto lower = post.chol_cov.triangularView<Eigen::Lower>();
  Mat inv_l = lower.solve(Mat::Identity(K, K));
  post.precision = inv_l.transpose() * inv_l;
  post.precision = 0.5 * (post.precision + post.precision.transpose());
  return post;
}

inline void save_posterior(const std::string& path, const GaussianPosterior& posterior) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open posterior checkpoint for writing: " + path);
  out << posterior_to_json(posterior).dump(2) << "\n";
}

inline GaussianPosterior load_posterior(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open posterior checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  return posterior_from_json(j);
}

}  // namespace trl::baselines

#endif
