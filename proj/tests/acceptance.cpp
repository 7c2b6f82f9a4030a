// Acceptance gate: nine end-to-end checks, one per invocation argument.
// Each prints exactly one line:  ACCEPT <n> PASS|FAIL <name> (<evidence>)
// and exits nonzero on failure so the test driver can pick up the verdict.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "trl/experiment.hpp"

using namespace trl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

bool report(int n, bool ok, const char* name, const std::string& evidence) {
  std::printf("ACCEPT %d %s %s (%s)\n", n, ok ? "PASS" : "FAIL", name, evidence.c_str());
  return ok;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

nn::Dataset two_input_sine(int n, std::uint64_t seed) {
  auto d = data::gen_sine(n, 0.1, -3.0, 3.0, seed);
  Mat x2(d.inputs.rows(), 2);
  x2.col(0) = d.inputs.col(0);
  x2.col(1) = d.inputs.col(0).cwiseAbs();
  d.inputs = x2;
  return d;
}

// 1. Hessian-vector products against central finite differences on a 2-5-1 net.
bool criterion_1() {
  auto t0 = Clock::now();
  auto train = two_input_sine(20, 4);
  auto model = nn::MlpModel::create({2, 5, 1}, nn::Head{}, 3);
  nn::PriorSpec prior{0.1};
  Index K = model.param_count();

  Mat h_ad(K, K), h_fd(K, K);
  Vec e = Vec::Zero(K);
  const double step = 1e-5;
  for (Index i = 0; i < K; ++i) {
    e[i] = 1.0;
    h_ad.col(i) = nn::hvp(model, train, prior, e);
    h_fd.col(i) = (nn::gradient(model.with_params(model.params.values + step * e), train, prior) -
                   nn::gradient(model.with_params(model.params.values - step * e), train, prior)) /
                  (2.0 * step);
    e[i] = 0.0;
  }
  double rel = (h_ad - h_fd).norm() / h_fd.norm();
  double elapsed = seconds_since(t0);
  bool ok = rel <= 1e-3 && elapsed < 5.0;
  return report(1, ok, "hvp-matches-central-differences",
                fmt("K=%lld, rel defect %.3g <= 1e-3, %.2fs < 5s", static_cast<long long>(K),
                    rel, elapsed));
}

// 2. Matrix-free Lanczos against a dense eigensolver at realistic width.
bool criterion_2() {
  auto t0 = Clock::now();
  auto train = data::gen_sine(50, 0.1, -6.0, 6.0, 1);
  auto model = nn::MlpModel::create({1, 50, 50, 1}, nn::Head{}, 78);
  nn::PriorSpec prior{0.1};
  model = nn::train_map(model, train, prior, 3000, 1e-2, 0);
  Index K = model.param_count();

  curvature::MlpCurvatureOracle oracle(model, train, prior, curvature::CurvatureKind::Ggn);
  Mat dense = curvature::dense_operator(oracle);
  Eigen::SelfAdjointEigenSolver<Mat> eig(dense);
  if (eig.info() != Eigen::Success)
    return report(2, false, "lanczos-matches-dense", "dense eigensolver failed");

  curvature::LanczosOptions opt;
  opt.iters = 300;
  opt.seed = 11;
  auto top = curvature::lanczos_topk(oracle, 10, opt);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    double want = eig.eigenvalues()[K - 1 - i];
    worst = std::max(worst, std::abs(top.values[i] - want) / std::abs(want));
  }
  auto small = curvature::smallest_eigvec(oracle, opt);
  double resid = (oracle.apply(small.vector) - small.value * small.vector).norm();
  double elapsed = seconds_since(t0);
  bool ok = worst <= 1e-6 && resid <= 1e-6 && elapsed < 60.0;
  return report(2, ok, "lanczos-matches-dense",
                fmt("K=%lld, top-10 rel %.3g <= 1e-6, smallest resid %.3g <= 1e-6, %.1fs < 60s",
                    static_cast<long long>(K), worst, resid, elapsed));
}

// 3. Frame transport stays orthonormal over a long random-tangent walk.
bool criterion_3() {
  const Index K = 40;
  const int k_perp = 8;
  Pcg32 rng(7);
  Mat seed_cols = Mat::NullaryExpr(K, k_perp, [&rng](Index, Index) { return rng.normal(); });
  Eigen::HouseholderQR<Mat> qr(seed_cols);
  Mat N = qr.householderQ() * Mat::Identity(K, k_perp);

  double worst_ortho = 0.0, worst_tan = 0.0;
  for (int step = 0; step < 100; ++step) {
    Vec v = rng.normal_vec(K);
    v.normalize();
    N = tube::transport_frame(N, v);
    worst_ortho = std::max(
        worst_ortho, (N.transpose() * N - Mat::Identity(k_perp, k_perp)).cwiseAbs().maxCoeff());
    worst_tan = std::max(worst_tan, (N.transpose() * v).cwiseAbs().maxCoeff());
  }
  bool ok = worst_ortho <= 1e-6 && worst_tan <= 1e-6;
  return report(3, ok, "transport-walk-defects",
                fmt("100 steps, orthonormality %.3g <= 1e-6, tangent leak %.3g <= 1e-6",
                    worst_ortho, worst_tan));
}

// 4. Analytic quadratic valley: tube moments and corrected spine.
bool criterion_4() {
  Vec a(2);
  a << 10.0, 0.0;
  auto valley = data::quadratic_valley(a, 0.1);
  tube::QuadraticValleyProblem problem(valley);
  tube::TubeConfig tc;
  tc.T = 20;
  tc.delta_s = std::sqrt(120.0 / 440.0);  // discrete uniform over the spine gives var 1/lambda
  tc.k_perp = 1;
  tc.beta_perp = 1.0;
  tc.drift_tol = 10.0;  // the spine intentionally climbs the flat axis
  Vec start(2);
  start << 0.005, 0.0;
  auto tube_obj = tube::build_tube(problem, start, tc);

  double worst_axis = 0.0;
  for (int t = 2; t < static_cast<int>(tube_obj.elements.size()); ++t)
    worst_axis = std::max(worst_axis, std::abs(tube_obj.elements[t].gamma[0]));

  const int S = 100000;
  auto latents = sampling::draw_latents(1, S, 3);
  double m1 = 0, m2 = 0, s1 = 0, s2 = 0;
  for (const auto& l : latents) {
    Vec th = sampling::sample_weights(tube_obj, l, 1.0);
    m1 += th[0];
    s1 += th[0] * th[0];
    m2 += th[1];
    s2 += th[1] * th[1];
  }
  double var1 = s1 / S - (m1 / S) * (m1 / S);
  double var2 = s2 / S - (m2 / S) * (m2 / S);
  Vec want = valley.posterior_variance();  // (1/10.1, 10)
  double d1 = std::abs(var1 - want[0]) / want[0];
  double d2 = std::abs(var2 - want[1]) / want[1];
  bool ok = d1 <= 0.10 && d2 <= 0.10 && worst_axis <= 1e-6;
  return report(4, ok, "quadratic-valley-moments",
                fmt("stiff var %.4f vs %.4f (%.1f%%), flat var %.3f vs %.1f (%.1f%%), "
                    "off-axis %.2g <= 1e-6",
                    var1, want[0], 100 * d1, var2, want[1], 100 * d2, worst_axis));
}

// 5. Collapsed spine: tube sampling covariance equals the projected Laplace.
bool criterion_5() {
  auto train = data::gen_sine(24, 0.1, -3.0, 3.0, 7);
  auto model = nn::MlpModel::create({1, 8, 1}, nn::Head{}, 21);
  nn::PriorSpec prior{0.1};
  for (auto [epochs, lr] : {std::pair{8000, 1e-2}, {4000, 1e-3}, {4000, 1e-4}})
    model = nn::train_map(model, train, prior, epochs, lr, 0);
  Index K = model.param_count();

  curvature::MlpCurvatureOracle oracle(model, train, prior, curvature::CurvatureKind::Ggn);
  Mat dense = curvature::dense_operator(oracle);

  tube::TubeConfig tc;
  tc.T = 1;
  tc.delta_s = 0.0;
  tc.k_perp = static_cast<int>(K - 1);
  tc.beta_perp = 1.0;
  tc.lanczos.iters = 200;
  auto tube_obj = tube::build_tube(model, train, prior, tc, 5, curvature::CurvatureKind::Ggn);

  const Mat& N0 = tube_obj.elements.front().basis;
  Mat p0 = N0 * N0.transpose();
  Mat want = p0 * dense.llt().solve(Mat::Identity(K, K)) * p0;

  const int S = 100000;
  auto latents = sampling::draw_latents(tc.k_perp, S, 9);
  Vec mean = Vec::Zero(K);
  Mat second = Mat::Zero(K, K);
  for (const auto& l : latents) {
    Vec th = sampling::sample_weights(tube_obj, l, 1.0);
    mean += th;
    second += th * th.transpose();
  }
  mean /= S;
  Mat cov = second / S - mean * mean.transpose();
  double rel = (cov - want).norm() / want.norm();
  bool ok = rel <= 0.05;
  return report(5, ok, "collapsed-tube-covariance",
                fmt("K=%lld, k_perp=%d, sample covariance defect %.3g <= 0.05",
                    static_cast<long long>(K), tc.k_perp, rel));
}

// 6. Conjugate linear regression: both baselines recover the exact posterior.
bool criterion_6() {
  Pcg32 rng(101);
  const Index n = 12;
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
  Mat grid(5, 1);
  grid << -3.0, -1.0, 0.0, 1.5, 4.0;
  auto lla = baselines::lla_predict(model, post, grid);

  const int S = 20000;
  auto ela = baselines::ela_predict(model, post, grid, S, 7);

  double lla_mean_err = 0, lla_var_err = 0, ela_worst = 0;
  for (Index i = 0; i < grid.rows(); ++i) {
    Vec p(2);
    p << grid(i, 0), 1.0;
    double want_mean = p.dot(theta);
    double want_var = p.dot(cov * p);  // epistemic part; noise is added when scoring
    lla_mean_err = std::max(lla_mean_err, std::abs(lla.mean[i] - want_mean));
    lla_var_err = std::max(lla_var_err, std::abs(lla.variance[i] - want_var));

    // the sampled baseline is exact in distribution, so the error must sit
    // inside Monte Carlo noise
    double mean_z = std::abs(ela.mean[i] - want_mean) / std::sqrt(want_var / S);
    double var_z =
        std::abs(ela.variance[i] - want_var) / (want_var * std::sqrt(2.0 / (S - 1.0)));
    ela_worst = std::max({ela_worst, mean_z / 3.0, var_z / 3.0});
  }
  bool ok = lla_mean_err <= 1e-8 && lla_var_err <= 1e-10 && ela_worst <= 1.0;
  return report(6, ok, "conjugate-linear-exactness",
                fmt("lla mean err %.2g <= 1e-8, lla var err %.2g <= 1e-10, "
                    "ela within %.2fx of 3 stderr",
                    lla_mean_err, lla_var_err, ela_worst));
}

experiment::ExperimentConfig sine_reference_config(std::uint64_t seed) {
  experiment::ExperimentConfig c;
  c.task_kind = "sine";
  c.schedule = experiment::detail::default_schedule("sine");
  c.tube.T = 30;
  c.tube.delta_s = 0.02;
  c.tube.k_perp = 30;
  c.tube.beta_perp = 0.005;
  c.tube.lanczos.iters = 160;
  // full-batch Adam limit-cycles around |grad| ~ 1 at this width; the mode
  // gate only needs to refuse blatantly untrained nets
  c.tube.map_grad_tol = 2.5;
  c.seed = seed;
  return c;
}

experiment::ExperimentConfig moons_reference_config(std::uint64_t seed) {
  experiment::ExperimentConfig c;
  c.task_kind = "two_moons";
  c.n_train = 300;
  c.schedule = experiment::detail::default_schedule("two_moons");
  c.tube.T = 50;
  c.tube.delta_s = 0.08;
  c.tube.k_perp = 30;
  c.tube.beta_perp = 0.05;
  c.tube.lanczos.iters = 160;
  c.field_resolution = 0;  // fields are a reporting artifact, not a metric
  c.seed = seed;
  return c;
}

// 7. Sine benchmark at the reference configuration over five seeds.
bool criterion_7() {
  std::vector<double> rmse, nll, zvar, cov1;
  int ordering_hits = 0;
  double worst_seed_time = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto t0 = Clock::now();
    auto cfg = sine_reference_config(seed);
    fs::path dir = fs::temp_directory_path() / "trl_acceptance" / ("sine_" + std::to_string(seed));
    fs::remove_all(dir);
    auto result = experiment::run_experiment(cfg, dir, false, false);
    const auto& trl = experiment::detail::find_row(result.rows, "TRL");
    const auto& lla = experiment::detail::find_row(result.rows, "LLA");
    const auto& ela = experiment::detail::find_row(result.rows, "ELA");
    rmse.push_back(*trl.rmse);
    nll.push_back(*trl.nll);
    zvar.push_back(*trl.z_var);
    cov1.push_back(*trl.coverage_1s);
    if (*trl.nll < *lla.nll && *lla.nll < *ela.nll) ++ordering_hits;
    worst_seed_time = std::max(worst_seed_time, seconds_since(t0));
  }
  double m_rmse = median(rmse), m_nll = median(nll), m_zvar = median(zvar), m_cov = median(cov1);
  bool ok = m_rmse <= 0.35 && m_nll <= 0.3 && m_cov >= 0.80 && m_cov <= 1.0 && m_zvar >= 0.1 &&
            m_zvar <= 0.7 && ordering_hits >= 4 && worst_seed_time < 600.0;
  return report(7, ok, "sine-benchmark-bands",
                fmt("median rmse %.3f <= 0.35, nll %.3f <= 0.3, cov1 %.3f in [0.80,1], "
                    "z-var %.3f in [0.1,0.7], ordering %d/5 >= 4, %.0fs/seed < 600s",
                    m_rmse, m_nll, m_cov, m_zvar, ordering_hits, worst_seed_time));
}

// 8. Two-moons benchmark at the reference configuration over five seeds.
bool criterion_8() {
  std::vector<double> nll, brier, acc_trl, acc_lla;
  int ordering_hits = 0;
  double worst_seed_time = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto t0 = Clock::now();
    auto cfg = moons_reference_config(seed);
    fs::path dir =
        fs::temp_directory_path() / "trl_acceptance" / ("moons_" + std::to_string(seed));
    fs::remove_all(dir);
    auto result = experiment::run_experiment(cfg, dir, false, false);
    const auto& trl = experiment::detail::find_row(result.rows, "TRL");
    const auto& lla = experiment::detail::find_row(result.rows, "LLA-Probit");
    const auto& ela = experiment::detail::find_row(result.rows, "ELA");
    nll.push_back(*trl.nll);
    brier.push_back(*trl.brier);
    acc_trl.push_back(*trl.accuracy);
    acc_lla.push_back(*lla.accuracy);
    if (*trl.nll < *lla.nll && *lla.nll < *ela.nll) ++ordering_hits;
    worst_seed_time = std::max(worst_seed_time, seconds_since(t0));
  }
  double m_nll = median(nll), m_brier = median(brier);
  double m_acc_trl = median(acc_trl), m_acc_lla = median(acc_lla);
  bool ok = m_nll <= 0.15 && m_brier <= 0.05 && m_acc_trl == 1.0 && m_acc_lla == 1.0 &&
            ordering_hits >= 4 && worst_seed_time < 900.0;
  return report(8, ok, "two-moons-benchmark-bands",
                fmt("median nll %.3f <= 0.15, brier %.3f <= 0.05, trl acc %.3f = 1, "
                    "lla acc %.3f = 1, ordering %d/5 >= 4, %.0fs/seed < 900s",
                    m_nll, m_brier, m_acc_trl, m_acc_lla, ordering_hits, worst_seed_time));
}

// 9. The hyperparameter grid prefers a thin, long tube (or ties within 0.05 nats).
bool criterion_9() {
  auto cfg = sine_reference_config(1);
  experiment::GridAxes axes;
  axes.T = {10, 30, 50};
  axes.delta_s = {0.01, 0.02, 0.05, 0.08};
  axes.beta_perp = {0.005, 0.01, 0.05, 0.1, 1.0};
  axes.k_perp = {2, 3, 5, 8, 10, 30};
  fs::path dir = fs::temp_directory_path() / "trl_acceptance" / "grid";
  fs::remove_all(dir);
  auto grid = experiment::run_grid(cfg, axes, dir, 1, false);
  if (!grid.best) return report(9, false, "grid-selects-thin-long-tube", "no cell succeeded");

  bool thin_long = grid.best->beta_perp <= 0.01 && grid.best->T >= 30;
  double best_thin_long_nll = std::numeric_limits<double>::infinity();
  for (const auto& cell : grid.cells)
    if (cell.ok && cell.cell.beta_perp <= 0.01 && cell.cell.T >= 30)
      best_thin_long_nll = std::min(best_thin_long_nll, cell.validation_nll);
  double gap = best_thin_long_nll - grid.best_nll;
  bool ok = thin_long || gap <= 0.05;
  return report(9, ok, "grid-selects-thin-long-tube",
                fmt("best %s val nll %.4f; thin-long best %.4f, gap %.4f <= 0.05%s",
                    grid.best->id().c_str(), grid.best_nll, best_thin_long_nll, gap,
                    thin_long ? " (selected outright)" : ""));
}

}  // namespace

int main(int argc, char** argv) {
  using Criterion = bool (*)();
  Criterion all[] = {criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
                     criterion_6, criterion_7, criterion_8, criterion_9};
  int lo = 1, hi = 9;
  if (argc > 1) {
    int n = std::atoi(argv[1]);
    if (n < 1 || n > 9) {
      std::fprintf(stderr, "usage: %s [1-9]\n", argv[0]);
      return 2;
    }
    lo = hi = n;
  }
  bool ok = true;
  for (int n = lo; n <= hi; ++n) {
    try {
      ok = all[n - 1]() && ok;
    } catch (const std::exception& e) {
      std::printf("ACCEPT %d FAIL criterion-threw (%s)\n", n, e.what());
      ok = false;
    }
  }
  return ok ? 0 : 1;
}
