#ifndef TRL_TUBE_HPP
#define TRL_TUBE_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trl/common.hpp"
#include "trl/curvature.hpp"
#include "trl/datasets.hpp"
#include "trl/errors.hpp"
#include "trl/nn.hpp"
#include "trl/serial.hpp"

namespace trl::tube {

using curvature::CurvatureKind;
using curvature::CurvatureOracle;
using curvature::LanczosOptions;

struct TubeConfig {
  int T = 30;
  double delta_s = 0.02;
  double eta_corr = 0.1;
  int k_perp = 30;
  double beta_perp = 0.005;
  double jitter = 1e-9;
  double rms_eps = 1e-12;
  LanczosOptions lanczos{};
  double map_grad_tol = 1.0;
  std::optional<double> drift_tol;  // unset: 10% of |mode loss| + prior-floor climb + 1e-3

  void validate(Index K) const {
    if (T < 1) throw ConfigError("tube needs T >= 1");
    if (delta_s < 0.0) throw ConfigError("delta_s must be non-negative");
    if (eta_corr < 0.0) throw ConfigError("eta_corr must be non-negative");
    if (k_perp < 1) throw ConfigError("k_perp must be positive");
    if (k_perp > K - 1) throw ConfigError("k_perp must leave room for the tangent (<= K-1)");
    if (beta_perp <= 0.0) throw ConfigError("beta_perp must be positive");
    if (jitter <= 0.0) throw ConfigError("jitter must be positive");
    if (rms_eps <= 0.0) throw ConfigError("rms_eps must be positive");
  }
};

struct TubeElement {
  Vec gamma;
  Mat basis;    // K x k_perp, orthonormal, orthogonal to the tangent
  Mat chol;     // k_perp x k_perp lower-triangular factor of the transverse covariance
  Vec tangent;  // unit spine direction into this element
  int step_index = 0;
};

struct TubeDiagnosticsRow {
  int t = 0;
  double loss = 0.0;
  double drift = 0.0;
  double min_eig = 0.0;
  double max_eig = 0.0;
  double step_cosine = 1.0;
};

struct Tube {
  std::vector<TubeElement> elements;
  TubeConfig config;
  nn::PriorSpec prior;
  std::vector<TubeDiagnosticsRow> diagnostics;

  int steps() const { return static_cast<int>(elements.size()) - 1; }
  Index dim() const { return elements.empty() ? 0 : elements.front().gamma.size(); }
  Index k_perp() const { return elements.empty() ? 0 : elements.front().basis.cols(); }
};

// raised when the spine leaves the valley; carries everything built so far
struct TubeDriftError : NumericError {
  TubeDriftError(const std::string& what, Tube built)
      : NumericError(what), partial(std::move(built)) {}
  Tube partial;
};

// what build_tube needs from a posterior landscape
class ValleyProblem {
 public:
  virtual ~ValleyProblem() = default;
  virtual Index dim() const = 0;
  virtual double loss(const Vec& theta) const = 0;
  virtual Vec gradient(const Vec& theta) const = 0;
  virtual std::unique_ptr<CurvatureOracle> oracle_at(const Vec& theta) const = 0;
  virtual double prior_lambda() const = 0;
};

class MlpValleyProblem : public ValleyProblem {
 public:
  MlpValleyProblem(nn::MlpModel model, nn::Dataset data, nn::PriorSpec prior,
                   CurvatureKind kind = CurvatureKind::Ggn, int data_batches = 1)
      : model_(std::move(model)),
        data_(std::move(data)),
        prior_(prior),
        kind_(kind),
        batches_(data_batches) {}

  Index dim() const override { return model_.param_count(); }
  double loss(const Vec& theta) const override {
    return nn::neg_log_posterior(model_.with_params(theta), data_, prior_);
  }
  Vec gradient(const Vec& theta) const override {
    return nn::gradient(model_.with_params(theta), data_, prior_);
  }
  std::unique_ptr<CurvatureOracle> oracle_at(const Vec& theta) const override {
    return std::make_unique<curvature::MlpCurvatureOracle>(model_.with_params(theta), data_,
                                                           prior_, kind_, batches_);
  }
  double prior_lambda() const override { return prior_.lambda; }

 private:
  nn::MlpModel model_;
  nn::Dataset data_;
  nn::PriorSpec prior_;
  CurvatureKind kind_;
  int batches_;
};

class QuadraticValleyProblem : public ValleyProblem {
 public:
  explicit QuadraticValleyProblem(data::QuadraticValley q) : q_(std::move(q)) {}

  Index dim() const override { return q_.dim(); }
  double loss(const Vec& theta) const override { return q_.total_loss(theta); }
  Vec gradient(const Vec& theta) const override { return q_.total_gradient(theta); }
  std::unique_ptr<CurvatureOracle> oracle_at(const Vec&) const override {
    return std::make_unique<curvature::DiagonalOracle>(q_.hessian_diag());
  }
  double prior_lambda() const override { return q_.lambda; }
  const data::QuadraticValley& valley() const { return q_; }

 private:
  data::QuadraticValley q_;
};

// one predictor-corrector update of the spine.  The corrector is the
// projected gradient scaled by eta_corr; when the transverse gradient is
// steep its root-mean-square is divided out so the kick stays bounded, and
// near the valley floor (rms < 1) the raw projected gradient is used, which
// keeps the closed-form quadratic dynamics intact.
inline Vec spine_step(const Vec& gamma, const Vec& v_par, const Vec& grad,
                      const TubeConfig& config) {
  if (std::abs(v_par.norm() - 1.0) > 1e-8) throw NumericError("spine tangent is not unit length");
  if (gamma.size() != v_par.size() || gamma.size() != grad.size())
    throw ShapeError("spine step inputs disagree in dimension");
  Vec g_perp = grad - v_par * v_par.dot(grad);
  double rms =
      std::sqrt(g_perp.squaredNorm() / static_cast<double>(gamma.size()) + config.rms_eps);
  double scale = config.eta_corr / std::max(1.0, rms);
  Vec next = gamma + config.delta_s * v_par - scale * g_perp;
  if (!next.allFinite()) throw NumericError("non-finite spine update");
  return next;
}

// discrete parallel transport: deflate the new tangent out of the frame and
// re-orthonormalize with a thin QR whose R diagonal is made positive
inline Mat transport_frame(const Mat& N, const Vec& v_new) {
  if (std::abs(v_new.norm() - 1.0) > 1e-8)
    throw NumericError("transport direction is not unit length");
  if (N.rows() != v_new.size()) throw ShapeError("frame and tangent dimension mismatch");
  Mat M = N - v_new * (v_new.transpose() * N);
  Eigen::HouseholderQR<Mat> qr(M);
  Mat Q = qr.householderQ() * Mat::Identity(N.rows(), N.cols());
  Mat R = qr.matrixQR().topRows(N.cols()).triangularView<Eigen::Upper>();
  for (Index j = 0; j < N.cols(); ++j) {
    if (std::abs(R(j, j)) < 1e-10)
      throw TransportRankError(
          "transport lost rank: column " + std::to_string(j) + " fell into the tangent span",
          static_cast<int>(j));
    if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
  }
  return Q;
}

// transverse covariance factor: project the curvature onto the frame, add
// jitter, invert, and return the lower Cholesky factor of the covariance
inline Mat transverse_factor(const Mat& N, const CurvatureOracle& oracle,
                             const nn::PriorSpec& prior, double jitter) {
  Index k = N.cols();
  Mat AN(N.rows(), k);
  for (Index j = 0; j < k; ++j) AN.col(j) = oracle.apply(N.col(j));
  Mat Hp = N.transpose() * AN;
  Hp = 0.5 * (Hp + Hp.transpose()).eval();
  Hp.diagonal().array() += jitter;

  Eigen::LLT<Mat> llt(Hp);
  if (llt.info() != Eigen::Success)
    throw FactorizationError(
        "projected precision is not positive definite; increase jitter or switch to the ggn "
        "oracle");
  Mat sigma = llt.solve(Mat::Identity(k, k));
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  Eigen::LLT<Mat> llt2(sigma);
  if (llt2.info() != Eigen::Success)
    throw FactorizationError("transverse covariance failed to factor; increase jitter");
  Mat L = llt2.matrixL();

  // transverse spread can never exceed the prior scale when the data term is PSD
  if (prior.lambda > 0.0) {
    double cap = 1.01 / std::sqrt(prior.lambda);
    if (L.diagonal().maxCoeff() > cap)
      throw FactorizationError(
          "transverse variance exceeds the prior floor; the curvature looks indefinite, "
          "switch to the ggn oracle or raise jitter");
  }
  return L;
}

namespace detail {

// orthonormal frame spanning the leading eigendirections with v0 removed:
// sequential Gram-Schmidt over the deflated columns, keeping k
inline Mat deflated_frame(const Mat& cols, const Vec& v0, int k) {
  Mat N(cols.rows(), k);
  int kept = 0;
  for (Index j = 0; j < cols.cols() && kept < k; ++j) {
    Vec c = cols.col(j);
    for (int pass = 0; pass < 2; ++pass) {
      c -= v0 * v0.dot(c);
      for (int i = 0; i < kept; ++i) c -= N.col(i) * N.col(i).dot(c);
    }
    double n = c.norm();
    if (n > 1e-8) {
      N.col(kept) = c / n;
      ++kept;
    }
  }
  if (kept < k)
    throw TransportRankError("could not assemble a rank-" + std::to_string(k) +
                                 " transverse frame at the mode",
                             kept);
  return N;
}

}  // namespace detail

inline Tube build_tube(const ValleyProblem& problem, const Vec& theta_map, TubeConfig config) {
  Index K = problem.dim();
  config.validate(K);
  if (theta_map.size() != K) throw ShapeError("start point has wrong dimension");

  Vec g0 = problem.gradient(theta_map);
  if (g0.norm() > config.map_grad_tol)
    throw ConfigError("start point is not a mode: gradient norm " + std::to_string(g0.norm()) +
                      " exceeds " + std::to_string(config.map_grad_tol));

  double loss0 = problem.loss(theta_map);
  // A spine riding the prior floor climbs about lambda/2 * s^2 by design, so
  // the default budget covers that full-arc climb plus a margin for the data
  // term; only a genuine fall off the valley wall should trip the check.
  double arc = config.T * config.delta_s;
  double floor_climb = 0.5 * problem.prior_lambda() * arc * arc;
  double drift_tol = config.drift_tol.value_or(0.1 * std::abs(loss0) + floor_climb + 1e-3);
  double step_guard = config.delta_s * (1.0 + 10.0 * config.eta_corr) + 1e-12;
  nn::PriorSpec prior{problem.prior_lambda()};

  Tube tube;
  tube.config = config;
  tube.prior = prior;

  auto oracle0 = problem.oracle_at(theta_map);
  curvature::SmallestPair sp = curvature::smallest_eigvec(*oracle0, config.lanczos);

  int request = static_cast<int>(std::min<Index>(config.k_perp + 1, K));
  curvature::EigenPairs top = curvature::lanczos_topk(*oracle0, request, config.lanczos);
  Mat N0 = detail::deflated_frame(top.vectors, sp.vector, config.k_perp);
  Mat L0 = transverse_factor(N0, *oracle0, prior, config.jitter);

  tube.elements.push_back({theta_map, N0, L0, sp.vector, 0});
  tube.diagnostics.push_back({0, loss0, 0.0, sp.value, sp.lambda_max_estimate, 1.0});

  if (config.delta_s == 0.0) {
    // degenerate spine: the tube collapses onto the mode
    for (int t = 1; t <= config.T; ++t) {
      TubeElement e = tube.elements.front();
      e.step_index = t;
      tube.elements.push_back(std::move(e));
      TubeDiagnosticsRow row = tube.diagnostics.front();
      row.t = t;
      tube.diagnostics.push_back(row);
    }
    return tube;
  }

  Vec v_prev = sp.vector;
  for (int t = 0; t < config.T; ++t) {
    const TubeElement& cur = tube.elements.back();
    Vec v = sp.vector;
    if (v.dot(v_prev) < 0.0) v = -v;  // tangent sign continuity

    // The corrector is explicit gradient descent on the transverse slice,
    // which diverges once step * curvature exceeds 2.  Cap the step using the
    // local top-eigenvalue estimate so stiff directions contract; gentle
    // landscapes (eta * lambda_max <= 1.5) keep the configured rate exactly.
    TubeConfig step_cfg = config;
    if (sp.lambda_max_estimate > 0.0)
      step_cfg.eta_corr = std::min(config.eta_corr, 1.5 / sp.lambda_max_estimate);

    Vec g = problem.gradient(cur.gamma);
    Vec next;
    try {
      next = spine_step(cur.gamma, v, g, step_cfg);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(t + 1));
    }

    Vec d = next - cur.gamma;
    double dn = d.norm();
    if (dn > step_guard)
      throw NumericError("spine step " + std::to_string(t + 1) + " length " +
                         std::to_string(dn) + " exceeds the guard " +
                         std::to_string(step_guard) +
                         "; the start is too far from the valley floor");

    Mat basis;
    Vec tangent;
    if (dn < 1e-14 * std::max(1.0, cur.gamma.norm())) {
      basis = cur.basis;  // no motion: keep the frame
      tangent = cur.tangent;
    } else {
      tangent = d / dn;
      basis = transport_frame(cur.basis, tangent);
    }

    auto oracle_next = problem.oracle_at(next);
    Mat chol = transverse_factor(basis, *oracle_next, prior, config.jitter);

    double loss_t = problem.loss(next);
    double drift = loss_t - loss0;
    double cosine = tangent.dot(cur.tangent);

    // Carry the valley direction forward while it still sits on the prior
    // floor.  When the data term has a large null space the smallest
    // eigenvalue is massively degenerate, and re-solving at every step would
    // return an arbitrary new vector from that eigenspace, turning the spine
    // into a random polyline instead of a coherent valley traversal.  The
    // Rayleigh test keeps the carried direction only while its data
    // curvature stays below half the prior's; otherwise a fresh solve runs.
    curvature::SmallestPair sp_next;
    double rayleigh = v.dot(oracle_next->apply(v));
    if (prior.lambda > 0.0 && std::abs(rayleigh - prior.lambda) <= 0.5 * prior.lambda) {
      sp_next.value = rayleigh;
      sp_next.vector = v;
      sp_next.lambda_max_estimate = curvature::lambda_max_bound(*oracle_next,
                                                                config.lanczos.seed);
    } else {
      sp_next = curvature::smallest_eigvec(*oracle_next, config.lanczos);
    }
    tube.elements.push_back({std::move(next), std::move(basis), std::move(chol),
                             std::move(tangent), t + 1});
    tube.diagnostics.push_back(
        {t + 1, loss_t, drift, sp_next.value, sp_next.lambda_max_estimate, cosine});

    if (drift > drift_tol)
      throw TubeDriftError("spine left the valley at step " + std::to_string(t + 1) +
                               ": loss drift " + std::to_string(drift) + " exceeds " +
                               std::to_string(drift_tol),
                           std::move(tube));

    v_prev = v;
    sp = std::move(sp_next);
  }
  return tube;
}

inline Tube build_tube(const nn::MlpModel& map_model, const nn::Dataset& data,
                       const nn::PriorSpec& prior, TubeConfig config, std::uint64_t seed,
                       CurvatureKind kind = CurvatureKind::Ggn, int data_batches = 1) {
  config.lanczos.seed = seed;
  MlpValleyProblem problem(map_model, data, prior, kind, data_batches);
  return build_tube(problem, map_model.params.values, config);
}

// --- invariant checks (shared by tests and the inspect command) -------------

inline std::vector<std::string> check_tube_invariants(const Tube& tube, double tol = 1e-6) {
  std::vector<std::string> issues;
  if (tube.elements.empty()) {
    issues.push_back("tube has no elements");
    return issues;
  }
  double guard = tube.config.delta_s * (1.0 + 10.0 * tube.config.eta_corr) + 1e-12;
  double cap = tube.prior.lambda > 0.0 ? 1.01 / std::sqrt(tube.prior.lambda)
                                       : std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < tube.elements.size(); ++i) {
    const TubeElement& e = tube.elements[i];
    Index k = e.basis.cols();
    double orth = (e.basis.transpose() * e.basis - Mat::Identity(k, k)).cwiseAbs().maxCoeff();
    if (orth > tol)
      issues.push_back("element " + std::to_string(i) + ": frame orthonormality defect " +
                       std::to_string(orth));
    double tangent_defect = (e.basis.transpose() * e.tangent).cwiseAbs().maxCoeff();
    if (tangent_defect > tol)
      issues.push_back("element " + std::to_string(i) + ": tangent leaks into the frame by " +
                       std::to_string(tangent_defect));
    for (Index r = 0; r < k; ++r) {
      if (e.chol(r, r) <= 0.0)
        issues.push_back("element " + std::to_string(i) + ": non-positive chol diagonal");
      if (e.chol(r, r) > cap)
        issues.push_back("element " + std::to_string(i) + ": transverse scale exceeds prior");
      for (Index c = r + 1; c < k; ++c)
        if (e.chol(r, c) != 0.0)
          issues.push_back("element " + std::to_string(i) + ": chol is not lower-triangular");
    }
    if (i > 0) {
      double sep = (e.gamma - tube.elements[i - 1].gamma).norm();
      if (sep > guard)
        issues.push_back("element " + std::to_string(i) + ": spacing " + std::to_string(sep) +
                         " exceeds the guard " + std::to_string(guard));
    }
  }
  return issues;
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json tube_to_json(const Tube& tube) {
  nlohmann::json cfg;
  cfg["T"] = tube.config.T;
  cfg["delta_s"] = tube.config.delta_s;
  cfg["eta_corr"] = tube.config.eta_corr;
  cfg["k_perp"] = tube.config.k_perp;
  cfg["beta_perp"] = tube.config.beta_perp;
  cfg["jitter"] = tube.config.jitter;
  cfg["rms_eps"] = tube.config.rms_eps;
  cfg["map_grad_tol"] = tube.config.map_grad_tol;
  if (tube.config.drift_tol)
    cfg["drift_tol"] = *tube.config.drift_tol;
  else
    cfg["drift_tol"] = nullptr;
  cfg["lanczos"] = {{"iters", tube.config.lanczos.iters},
                    {"tol", tube.config.lanczos.tol},
                    {"seed", tube.config.lanczos.seed}};
  cfg["index_map"] = "cdf-floor-uniform";
  cfg["alpha_mode"] = "arc-length-budget";

  nlohmann::json elements = nlohmann::json::array();
  for (const TubeElement& e : tube.elements) {
    elements.push_back({{"step_index", e.step_index},
                        {"gamma", serial::vec_to_json(e.gamma)},
                        {"basis", serial::mat_to_json(e.basis)},
                        {"chol", serial::mat_to_json(e.chol)},
                        {"tangent", serial::vec_to_json(e.tangent)}});
  }
  nlohmann::json diag = nlohmann::json::array();
  for (const TubeDiagnosticsRow& r : tube.diagnostics) {
    diag.push_back({{"t", r.t},
                    {"loss", r.loss},
                    {"drift", r.drift},
                    {"min_eig", r.min_eig},
                    {"max_eig", r.max_eig},
                    {"step_cosine", r.step_cosine}});
  }
  return {{"config", cfg},
          {"prior", {{"lambda", tube.prior.lambda}}},
          {"elements", elements},
          {"diagnostics", diag}};
}

inline Tube tube_from_json(const nlohmann::json& j) {
  Tube tube;
  const auto& cfg = j.at("config");
  tube.config.T = cfg.at("T").get<int>();
  tube.config.delta_s = cfg.at("delta_s").get<double>();
  tube.config.eta_corr = cfg.at("eta_corr").get<double>();
  tube.config.k_perp = cfg.at("k_perp").get<int>();
  tube.config.beta_perp = cfg.at("beta_perp").get<double>();
  tube.config.jitter = cfg.at("jitter").get<double>();
  tube.config.rms_eps = cfg.at("rms_eps").get<double>();
  tube.config.map_grad_tol = cfg.at("map_grad_tol").get<double>();
  if (!cfg.at("drift_tol").is_null()) tube.config.drift_tol = cfg.at("drift_tol").get<double>();
  tube.config.lanczos.iters = cfg.at("lanczos").at("iters").get<int>();
  tube.config.lanczos.tol = cfg.at("lanczos").at("tol").get<double>();
  tube.config.lanczos.seed = cfg.at("lanczos").at("seed").get<std::uint64_t>();
  tube.prior.lambda = j.at("prior").at("lambda").get<double>();
  for (const auto& e : j.at("elements")) {
    TubeElement el;
    el.step_index = e.at("step_index").get<int>();
    el.gamma = serial::vec_from_json(e.at("gamma"));
    el.basis = serial::mat_from_json(e.at("basis"));
    el.chol = serial::mat_from_json(e.at("chol"));
    el.tangent = serial::vec_from_json(e.at("tangent"));
    tube.elements.push_back(std::move(el));
  }
  if (j.contains("diagnostics")) {
    for (const auto& r : j.at("diagnostics")) {
      tube.diagnostics.push_back({r.at("t").get<int>(), r.at("loss").get<double>(),
                                  r.at("drift").get<double>(), r.at("min_eig").get<double>(),
                                  r.at("max_eig").get<double>(),
                                  r.at("step_cosine").get<double>()});
    }
  }
  return tube;
}

inline void save_tube(const std::string& path, const Tube& tube) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open tube file for writing: " + path);
  out << tube_to_json(tube).dump() << "\n";
}

inline Tube load_tube(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open tube file: " + path);
  nlohmann::json j;
  in >> j;
  return tube_from_json(j);
}

inline void write_tube_diagnostics_csv(const std::string& path, const Tube& tube) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open diagnostics file for writing: " + path);
  out << "t,loss,drift,min_eig,max_eig,step_cosine\n";
  out.precision(17);
  for (const TubeDiagnosticsRow& r : tube.diagnostics)
    out << r.t << "," << r.loss << "," << r.drift << "," << r.min_eig << "," << r.max_eig << ","
        << r.step_cosine << "\n";
}

}  // namespace trl::tube

#endif
