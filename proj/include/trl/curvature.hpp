#ifndef TRL_CURVATURE_HPP
#define TRL_CURVATURE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trl/common.hpp"
#include "trl/errors.hpp"
#include "trl/nn.hpp"
#include "trl/rng.hpp"

namespace trl::curvature {

enum class CurvatureKind { ExactHessian, Ggn, RectifiedHessian };

inline std::string curvature_kind_name(CurvatureKind k) {
  switch (k) {
    case CurvatureKind::ExactHessian: return "exact_hessian";
    case CurvatureKind::Ggn: return "ggn";
    case CurvatureKind::RectifiedHessian: return "rectified_hessian";
  }
  return "unknown";
}

inline CurvatureKind curvature_kind_from_name(const std::string& s) {
  if (s == "exact_hessian") return CurvatureKind::ExactHessian;
  if (s == "ggn") return CurvatureKind::Ggn;
  if (s == "rectified_hessian") return CurvatureKind::RectifiedHessian;
  throw ConfigError("unknown curvature kind: " + s);
}

// matrix-free view of a symmetric PSD-regularized curvature matrix;
// apply() is pure, instances are safe to share across threads once built
class CurvatureOracle {
 public:
  virtual ~CurvatureOracle() = default;
  virtual Index dim() const = 0;
  virtual Vec apply(const Vec& v) const = 0;
};

class DiagonalOracle : public CurvatureOracle {
 public:
  explicit DiagonalOracle(Vec diag) : diag_(std::move(diag)) {}
  Index dim() const override { return diag_.size(); }
  Vec apply(const Vec& v) const override { return diag_.cwiseProduct(v); }

 private:
  Vec diag_;
};

class MatrixOracle : public CurvatureOracle {
 public:
  explicit MatrixOracle(Mat m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols()) throw ShapeError("matrix oracle needs a square matrix");
  }
  Index dim() const override { return m_.rows(); }
  Vec apply(const Vec& v) const override { return m_ * v; }

 private:
  Mat m_;
};

// c*I - A, used to reach the bottom of a spectrum with a top-eigenpair solver
class ShiftedNegatedOracle : public CurvatureOracle {
 public:
  ShiftedNegatedOracle(const CurvatureOracle& base, double shift)
      : base_(&base), shift_(shift) {}
  Index dim() const override { return base_->dim(); }
  Vec apply(const Vec& v) const override { return shift_ * v - base_->apply(v); }
  double shift() const { return shift_; }

 private:
  const CurvatureOracle* base_;
  double shift_;
};

// dense materialization, column by column; intended for toy dimensions only
inline Mat dense_operator(const CurvatureOracle& op, Index guard = 20000) {
  Index K = op.dim();
  if (K > guard)
    throw ConfigError("dense_operator refused: dimension " + std::to_string(K) +
                      " exceeds guard " + std::to_string(guard));
  Mat M(K, K);
  Vec e = Vec::Zero(K);
  for (Index i = 0; i < K; ++i) {
    e[i] = 1.0;
    M.col(i) = op.apply(e);
    e[i] = 0.0;
  }
  return 0.5 * (M + M.transpose());
}

namespace detail {

inline nn::Dataset slice_rows(const nn::Dataset& data, Index begin, Index end) {
  nn::Dataset out;
  out.task = data.task;
  out.inputs = data.inputs.middleRows(begin, end - begin);
  out.targets = data.targets.middleRows(begin, end - begin);
  return out;
}

}  // namespace detail

// regularized curvature of the MLP posterior: data term plus lambda*I.
// The data term can be split into data_batches mini-batches; each batch
// product is rescaled by N/|B| so the average over all batches stays an
// unbiased estimate of the full sum, and matches it exactly for one batch.
class MlpCurvatureOracle : public CurvatureOracle {
 public:
  MlpCurvatureOracle(nn::MlpModel model, nn::Dataset data, nn::PriorSpec prior,
                     CurvatureKind kind, int data_batches = 1,
                     std::optional<double> rectify_threshold = std::nullopt)
      : model_(std::move(model)),
        data_(std::move(data)),
        prior_(prior),
        kind_(kind),
        threshold_(rectify_threshold) {
    if (data_batches < 1) throw ConfigError("data_batches must be at least 1");
    Index n = data_.size();
    Index m = std::min<Index>(data_batches, std::max<Index>(n, 1));
    for (Index b = 0; b < m; ++b)
      batch_bounds_.emplace_back(b * n / m, (b + 1) * n / m);
    if (kind_ == CurvatureKind::RectifiedHessian) build_rectified();
  }

  Index dim() const override { return model_.param_count(); }
  CurvatureKind kind() const { return kind_; }
  double prior_lambda() const { return prior_.lambda; }
  int batch_count() const { return static_cast<int>(batch_bounds_.size()); }
  double rectify_threshold_used() const { return rect_threshold_used_; }

  Vec apply(const Vec& v) const override {
    std::vector<int> all(batch_bounds_.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return apply_batches(v, all);
  }

  // mean of the selected per-batch products
  Vec apply_batches(const Vec& v, const std::vector<int>& batch_ids) const {
    if (v.size() != dim()) throw ShapeError("direction has wrong length");
    if (kind_ == CurvatureKind::RectifiedHessian) return rect_matrix_ * v;
    if (batch_ids.empty()) throw ConfigError("batch id list is empty");
    Vec acc = Vec::Zero(dim());
    for (int id : batch_ids) {
      if (id < 0 || id >= batch_count()) throw ConfigError("batch id out of range");
      auto [b, e] = batch_bounds_[static_cast<std::size_t>(id)];
      double scale = (e > b) ? static_cast<double>(data_.size()) / static_cast<double>(e - b)
                             : 0.0;
      if (e > b) {
        nn::Dataset batch = detail::slice_rows(data_, b, e);
        nn::PriorSpec no_prior{0.0};
        Vec term = kind_ == CurvatureKind::Ggn ? nn::ggn_vp(model_, batch, no_prior, v)
                                               : nn::hvp(model_, batch, no_prior, v);
        acc += scale * term;
      }
    }
    acc /= static_cast<double>(batch_ids.size());
    return acc + prior_.lambda * v;
  }

 private:
  void build_rectified() {
    // clamp the spectrum of the regularized exact Hessian from below
    MlpCurvatureOracle exact(model_, data_, prior_, CurvatureKind::ExactHessian);
    Mat H = dense_operator(exact);
    Eigen::SelfAdjointEigenSolver<Mat> eig(H);
    if (eig.info() != Eigen::Success)
      throw NumericError("eigendecomposition failed while rectifying the hessian");
    double lam_max = eig.eigenvalues().maxCoeff();
    double thr = threshold_.value_or(1e-6 * std::max(lam_max, 0.0));
    rect_threshold_used_ = thr;
    Vec d = eig.eigenvalues().cwiseMax(thr);
    rect_matrix_ = eig.eigenvectors() * d.asDiagonal() * eig.eigenvectors().transpose();
    rect_matrix_ = 0.5 * (rect_matrix_ + rect_matrix_.transpose());
  }

  nn::MlpModel model_;
  nn::Dataset data_;
  nn::PriorSpec prior_;
  CurvatureKind kind_;
  std::optional<double> threshold_;
  std::vector<std::pair<Index, Index>> batch_bounds_;
  Mat rect_matrix_;
  double rect_threshold_used_ = 0.0;
};

inline Vec buffered_apply(const MlpCurvatureOracle& oracle, const Vec& v,
                          const std::vector<int>& batch_ids) {
  return oracle.apply_batches(v, batch_ids);
}

struct LanczosOptions {
  int iters = 0;         // 0 picks min(max(4k, 32), dim)
  double tol = 1e-6;     // relative residual target
  std::uint64_t seed = 0;
};

// eigenpairs in descending eigenvalue order, columns are unit vectors
struct EigenPairs {
  Vec values;
  Mat vectors;
  Index count() const { return values.size(); }
};

// thrown when the Krylov process cannot deliver k converged pairs;
// carries whatever converged prefix exists
struct LanczosError : NumericError {
  LanczosError(const std::string& what, EigenPairs got)
      : NumericError(what), partial(std::move(got)) {}
  EigenPairs partial;
};

namespace detail {

struct LanczosState {
  Mat Q;       // orthonormal basis columns
  Vec alpha;   // diagonal of the tridiagonal matrix
  Vec beta;    // off-diagonal; beta[j] == 0 marks a block boundary
  Index steps = 0;
};

// Lanczos with full re-orthogonalization.  On an invariant-subspace
// breakdown the recurrence restarts with a fresh random direction that is
// orthogonalized against the existing basis, so heavily degenerate spectra
// (a prior floor repeated K - rank times) can still fill the whole space.
inline LanczosState lanczos_iterate(const CurvatureOracle& op, Index m, std::uint64_t seed) {
  Index K = op.dim();
  LanczosState st;
  st.Q.resize(K, m);
  st.alpha = Vec::Zero(m);
  st.beta = Vec::Zero(m);

  Pcg32 rng(seed, 91u);
  Vec q = rng.normal_vec(K);
  q.normalize();

  double scale = 1.0;
  for (Index j = 0; j < m; ++j) {
    st.Q.col(j) = q;
    Vec w = op.apply(q);
    if (!w.allFinite()) throw NumericError("curvature product returned non-finite values");
    if (j > 0) w -= st.beta[j - 1] * st.Q.col(j - 1);
    st.alpha[j] = q.dot(w);
    w -= st.alpha[j] * q;
    auto basis = st.Q.leftCols(j + 1);
    w -= basis * (basis.transpose() * w);
    w -= basis * (basis.transpose() * w);
    double b = w.norm();
    scale = std::max({scale, std::abs(st.alpha[j]), b});
    st.steps = j + 1;
    // the trailing entry is the residual scale beta_m, not part of the tridiagonal
    st.beta[j] = b;
    if (j + 1 == m) break;

    double breakdown = 1e-13 * scale * std::sqrt(static_cast<double>(K));
    if (b > breakdown) {
      q = w / b;
      continue;
    }
    // invariant subspace: restart in the orthogonal complement
    st.beta[j] = 0.0;
    bool restarted = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Vec cand = rng.normal_vec(K);
      cand -= basis * (basis.transpose() * cand);
      cand -= basis * (basis.transpose() * cand);
      double n = cand.norm();
      if (n > 1e-8 * std::sqrt(static_cast<double>(K))) {
        q = cand / n;
        restarted = true;
        break;
      }
    }
    if (!restarted) break;  // complement exhausted; truncate
  }
  return st;
}

struct RitzDecomposition {
  Vec values;      // ascending
  Mat tri_vecs;    // eigenvectors of the tridiagonal matrix
  Vec residuals;   // |beta_m * s_m| per pair
};

inline RitzDecomposition ritz_pairs(const LanczosState& st) {
  Index m = st.steps;
  Mat T = Mat::Zero(m, m);
  for (Index j = 0; j < m; ++j) {
    T(j, j) = st.alpha[j];
    if (j + 1 < m) {
      T(j, j + 1) = st.beta[j];
      T(j + 1, j) = st.beta[j];
    }
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(T);
  if (eig.info() != Eigen::Success) throw NumericError("tridiagonal eigensolver failed");
  RitzDecomposition out;
  out.values = eig.eigenvalues();
  out.tri_vecs = eig.eigenvectors();
  double beta_last = st.beta[m - 1];
  out.residuals = (beta_last * out.tri_vecs.row(m - 1).transpose()).cwiseAbs();
  return out;
}

}  // namespace detail

inline EigenPairs lanczos_topk(const CurvatureOracle& op, int k, LanczosOptions opt = {}) {
  Index K = op.dim();
  if (k < 1) throw ConfigError("k must be positive");
  if (k > K) throw ConfigError("requested more eigenpairs than the dimension");
  Index m = opt.iters > 0 ? std::min<Index>(opt.iters, K)
                          : std::min<Index>(std::max<Index>(4L * k, 32), K);
  m = std::max<Index>(m, k);

  detail::LanczosState st = detail::lanczos_iterate(op, m, opt.seed);
  detail::RitzDecomposition rd = detail::ritz_pairs(st);

  Index avail = rd.values.size();
  EigenPairs out;
  out.values.resize(k);
  out.vectors.resize(K, k);
  int converged = 0;
  for (int i = 0; i < k && i < avail; ++i) {
    Index idx = avail - 1 - i;  // descending
    double lam = rd.values[idx];
    double res = rd.residuals[idx];
    if (res > opt.tol * std::max(1.0, std::abs(lam))) break;
    out.values[i] = lam;
    out.vectors.col(i) = st.Q.leftCols(st.steps) * rd.tri_vecs.col(idx);
    out.vectors.col(i).normalize();
    ++converged;
  }
  if (converged < k) {
    EigenPairs partial;
    partial.values = out.values.head(converged);
    partial.vectors = out.vectors.leftCols(converged);
    throw LanczosError("lanczos delivered " + std::to_string(converged) + " of " +
                           std::to_string(k) + " pairs; increase iterations",
                       std::move(partial));
  }
  return out;
}

struct SmallestPair {
  double value = 0.0;
  Vec vector;
  double lambda_max_estimate = 0.0;
};

// smallest eigenpair via the shifted, negated operator c*I - A with c above
// the top of the spectrum; the top pair of the shifted operator maps back to
// loose estimate of the top eigenvalue from a short lanczos run; used to
// size shifts and step caps, not as a converged eigenvalue
inline double lambda_max_bound(const CurvatureOracle& op, std::uint64_t seed) {
  LanczosOptions bound_opt;
  bound_opt.iters = static_cast<int>(std::min<Index>(48, op.dim()));
  bound_opt.tol = 1e-2;
  bound_opt.seed = seed + 17u;
  try {
    return lanczos_topk(op, 1, bound_opt).values[0];
  } catch (const LanczosError& err) {
    if (err.partial.count() > 0) return err.partial.values.maxCoeff();
    throw NumericError("shift estimate failed; increase lanczos iterations");
  }
}

// the bottom pair of A.  Sign convention: first non-negligible component of
// the returned vector is positive.
inline SmallestPair smallest_eigvec(const CurvatureOracle& op, LanczosOptions opt = {}) {
  Index K = op.dim();
  double lam_max = lambda_max_bound(op, opt.seed);
  double shift = 1.25 * std::max(lam_max, 0.0) + 1e-3;

  ShiftedNegatedOracle shifted(op, shift);
  LanczosOptions main_opt = opt;
  if (main_opt.iters <= 0) main_opt.iters = static_cast<int>(std::min<Index>(128, K));
  EigenPairs top = lanczos_topk(shifted, 1, main_opt);

  SmallestPair out;
  out.value = shift - top.values[0];
  out.vector = top.vectors.col(0);
  out.lambda_max_estimate = lam_max;
  for (Index i = 0; i < out.vector.size(); ++i) {
    if (std::abs(out.vector[i]) > 1e-10) {
      if (out.vector[i] < 0.0) out.vector = -out.vector;
      break;
    }
  }
  return out;
}

inline void write_spectrum_csv(const std::string& path, const Vec& values) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open spectrum file for writing: " + path);
  out << "index,eigenvalue\n";
  out.precision(17);
  for (Index i = 0; i < values.size(); ++i) out << i << "," << values[i] << "\n";
}

}  // namespace trl::curvature

#endif
