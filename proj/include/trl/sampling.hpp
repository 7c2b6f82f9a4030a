#ifndef TRL_SAMPLING_HPP
#define TRL_SAMPLING_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "trl/common.hpp"
#include "trl/errors.hpp"
#include "trl/nn.hpp"
#include "trl/rng.hpp"
#include "trl/tube.hpp"

namespace trl::sampling {

struct LatentSample {
  double z_par = 0.0;
  Vec z_perp;
};

struct PredictiveSummary {
  nn::Task task = nn::Task::Regression;
  Vec mean;      // per point: predictive mean, or p(class 1)
  Vec variance;  // regression only: Monte Carlo variance of the mean output
  Vec entropy;   // classification only: entropy of the mean probability, nats
  int sample_count = 0;
};

// map the tangential latent onto a spine index: the normal CDF turns z into a
// uniform variate, and flooring over T+1 equal cells covers every element
// with the same mass.  The arc-length budget alpha = 1/sqrt(lambda) is a
// build-time concern (T * delta_s), recorded by the named mode.
inline int z_to_index(double z_par, int T, const std::string& alpha_mode = "arc-length-budget") {
  if (T < 0) throw ConfigError("spine index range needs T >= 0");
  if (alpha_mode != "arc-length-budget") throw ConfigError("unknown alpha mode: " + alpha_mode);
  double u = normal_cdf(z_par);
  int t = static_cast<int>(std::floor(u * (static_cast<double>(T) + 1.0)));
  return std::max(0, std::min(T, t));
}

// weight-space sample at a fixed element: theta = gamma_t + N_t (beta L_t z)
inline Vec sample_weights_at(const tube::Tube& tube, int t, const Vec& z_perp,
                             double beta_perp) {
  if (t < 0 || t >= static_cast<int>(tube.elements.size()))
    throw ConfigError("spine index " + std::to_string(t) + " outside the tube");
  const tube::TubeElement& e = tube.elements[static_cast<std::size_t>(t)];
  if (z_perp.size() != e.basis.cols())
    throw ShapeError("transverse latent has length " + std::to_string(z_perp.size()) +
                     ", tube rank is " + std::to_string(e.basis.cols()));
  if (beta_perp == 0.0) return e.gamma;
  return e.gamma + e.basis * (beta_perp * (e.chol * z_perp));
}

inline Vec sample_weights(const tube::Tube& tube, const LatentSample& latent,
                          double beta_perp) {
  if (tube.elements.empty()) throw ConfigError("cannot sample from an empty tube");
  int t = z_to_index(latent.z_par, tube.steps());
  return sample_weights_at(tube, t, latent.z_perp, beta_perp);
}

// the latent stream is consumed one sample at a time: z_par first, then the
// k_perp transverse coordinates
inline std::vector<LatentSample> draw_latents(Index k_perp, int S, std::uint64_t seed) {
  if (S < 1) throw ConfigError("sample count must be positive");
  Pcg32 rng(seed);
  std::vector<LatentSample> latents;
  latents.reserve(static_cast<std::size_t>(S));
  for (int s = 0; s < S; ++s) {
    LatentSample l;
    l.z_par = rng.normal();
    l.z_perp = rng.normal_vec(k_perp);
    latents.push_back(std::move(l));
  }
  return latents;
}

namespace detail {

inline double entropy_nats(double p) {
  double q = 1.0 - p;
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (q > 0.0) h -= q * std::log(q);
  return h;
}

// network outputs mapped to the observation scale: probabilities for a
// logistic head, raw function values otherwise
inline Vec observed_values(const nn::MlpModel& model, const Mat& out) {
  Vec v(out.rows());
  bool classify = model.head.kind == nn::HeadKind::BernoulliLogit;
  for (Index i = 0; i < out.rows(); ++i)
    v[i] = classify ? nn::detail::sigmoid(out(i, 0)) : out(i, 0);
  return v;
}

// streaming per-point moments over Monte Carlo samples
struct MomentStream {
  Vec mean;
  Vec m2;
  int count = 0;

  explicit MomentStream(Index n) : mean(Vec::Zero(n)), m2(Vec::Zero(n)) {}

  void add(const Vec& values) {
    if (values.size() != mean.size()) throw ShapeError("sample has wrong length");
    ++count;
    for (Index i = 0; i < values.size(); ++i) {
      double delta = values[i] - mean[i];
      mean[i] += delta / static_cast<double>(count);
      m2[i] += delta * (values[i] - mean[i]);
    }
  }
};

inline PredictiveSummary summarize(const MomentStream& stream, bool classify) {
  if (stream.count < 2) throw ConfigError("predictive summaries need at least two samples");
  PredictiveSummary summary;
  summary.task = classify ? nn::Task::Classification : nn::Task::Regression;
  summary.mean = stream.mean;
  summary.sample_count = stream.count;
  if (classify) {
    summary.entropy = Vec(stream.mean.size());
    for (Index i = 0; i < stream.mean.size(); ++i)
      summary.entropy[i] = entropy_nats(stream.mean[i]);
  } else {
    summary.variance = stream.m2 / static_cast<double>(stream.count);
  }
  return summary;
}

}  // namespace detail

inline PredictiveSummary predict_with_latents(const nn::MlpModel& model_template,
                                              const tube::Tube& tube, const Mat& x_star,
                                              const std::vector<LatentSample>& latents,
                                              std::optional<double> beta_perp = std::nullopt) {
  if (latents.size() < 2) throw ConfigError("predictive summaries need at least two samples");
  double beta = beta_perp.value_or(tube.config.beta_perp);
  bool classify = model_template.head.kind == nn::HeadKind::BernoulliLogit;

  detail::MomentStream stream(x_star.rows());
  nn::MlpModel model = model_template;
  for (const LatentSample& latent : latents) {
    model.params.values = sample_weights(tube, latent, beta);
    stream.add(detail::observed_values(model, nn::forward(model, x_star)));
  }
  return detail::summarize(stream, classify);
}

inline PredictiveSummary predict(const nn::MlpModel& model_template, const tube::Tube& tube,
                                 const Mat& x_star, int S, std::uint64_t seed,
                                 std::optional<double> beta_perp = std::nullopt) {
  if (S < 2) throw ConfigError("predictive summaries need at least two samples");
  std::vector<LatentSample> latents = draw_latents(tube.k_perp(), S, seed);
  return predict_with_latents(model_template, tube, x_star, latents, beta_perp);
}

// --- audit files ---------------------------------------------------------------

inline void write_predictions_csv(const std::string& path, const Mat& x_star,
                                  const PredictiveSummary& summary) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open predictions file for writing: " + path);
  out.precision(17);
  for (Index j = 0; j < x_star.cols(); ++j) out << "x" << (j + 1) << ",";
  if (summary.task == nn::Task::Regression)
    out << "mean,variance\n";
  else
    out << "p,entropy\n";
  for (Index i = 0; i < x_star.rows(); ++i) {
    for (Index j = 0; j < x_star.cols(); ++j) out << x_star(i, j) << ",";
    if (summary.task == nn::Task::Regression)
      out << summary.mean[i] << "," << summary.variance[i] << "\n";
    else
      out << summary.mean[i] << "," << summary.entropy[i] << "\n";
  }
}

inline void write_latent_manifest(const std::string& path,
                                  const std::vector<LatentSample>& latents) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open latent manifest for writing: " + path);
  out.precision(17);
  out << "sample,z_par";
  Index k = latents.empty() ? 0 : latents.front().z_perp.size();
  for (Index j = 0; j < k; ++j) out << ",z_perp_" << j;
  out << "\n";
  for (std::size_t s = 0; s < latents.size(); ++s) {
    out << s << "," << latents[s].z_par;
    for (Index j = 0; j < latents[s].z_perp.size(); ++j) out << "," << latents[s].z_perp[j];
    out << "\n";
  }
}

}  // namespace trl::sampling

#endif
