// End-to-end tour on noisy sine data: train a small MLP to its MAP, build a
// tube along the flattest curvature direction, and compare the tube's
// predictive band against the linearised Laplace baseline.
//
//   ./sine_demo            (about ten seconds on one core)

#include <cstdio>
#include <string>
#include <vector>

#include "trl/baselines.hpp"
#include "trl/datasets.hpp"
#include "trl/metrics.hpp"
#include "trl/sampling.hpp"
#include "trl/tube.hpp"

using namespace trl;

namespace {

void ascii_band(const Mat& grid, const sampling::PredictiveSummary& s, const nn::Dataset& train,
                double sigma_noise) {
  const int rows = 21, cols = static_cast<int>(grid.rows());
  const double y_lo = -1.8, y_hi = 1.8;
  std::vector<std::string> canvas(rows, std::string(cols, ' '));
  auto row_of = [&](double y) {
    int r = static_cast<int>((y_hi - y) / (y_hi - y_lo) * (rows - 1) + 0.5);
    return std::clamp(r, 0, rows - 1);
  };
  for (int c = 0; c < cols; ++c) {
    double sd = std::sqrt(s.variance[c] + sigma_noise * sigma_noise);
    int top = row_of(s.mean[c] + 2.0 * sd), bot = row_of(s.mean[c] - 2.0 * sd);
    for (int r = top; r <= bot; ++r) canvas[r][c] = '.';
    canvas[row_of(s.mean[c])][c] = '*';
  }
  for (Index i = 0; i < train.size(); ++i) {
    int c = static_cast<int>((train.inputs(i, 0) - grid(0, 0)) /
                                 (grid(cols - 1, 0) - grid(0, 0)) * (cols - 1) +
                             0.5);
    canvas[row_of(train.targets(i, 0))][std::clamp(c, 0, cols - 1)] = 'o';
  }
  std::printf("\n  tube predictive band (* mean, . mean +- 2 sd, o training point)\n\n");
  for (const auto& line : canvas) std::printf("  |%s|\n", line.c_str());
  std::printf("  x from %.0f to %.0f\n", grid(0, 0), grid(cols - 1, 0));
}

}  // namespace

int main() {
  auto train = data::gen_sine(50, 0.1, -6.0, 6.0, 1);
  auto model = nn::MlpModel::create({1, 16, 16, 1}, nn::Head{}, 7);
  nn::PriorSpec prior{0.1};

  std::printf("training a %lld-parameter mlp on %lld noisy sine points\n",
              static_cast<long long>(model.param_count()), static_cast<long long>(train.size()));
  for (auto [epochs, lr] : {std::pair{3000, 1e-2}, {2000, 1e-3}, {1000, 1e-4}})
    model = nn::train_map(model, train, prior, epochs, lr);
  std::printf("  map loss %.4f, gradient norm %.2e\n",
              nn::neg_log_posterior(model, train, prior),
              nn::gradient(model, train, prior).norm());

  tube::TubeConfig tc;
  tc.T = 10;
  tc.delta_s = 0.02;
  tc.k_perp = 20;
  tc.beta_perp = 0.01;
  tc.lanczos.iters = 120;
  auto tube_obj = tube::build_tube(model, train, prior, tc, 2);
  const auto& diag = tube_obj.diagnostics;
  std::printf("built a tube with %d spine steps: valley eigenvalue %.3f .. %.3f, "
              "max loss drift %.2e\n",
              tube_obj.steps(), diag.front().min_eig, diag.back().min_eig,
              [&] {
                double d = 0.0;
                for (const auto& r : diag) d = std::max(d, r.drift);
                return d;
              }());

  const int G = 72;
  Mat grid(G, 1);
  for (int i = 0; i < G; ++i) grid(i, 0) = -6.0 + 12.0 * i / (G - 1);
  auto trl_pred = sampling::predict(model, tube_obj, grid, 300, 5);
  ascii_band(grid, trl_pred, train, model.head.noise_sigma);

  auto posterior = baselines::fit_laplace(model, train, prior, curvature::CurvatureKind::Ggn);
  auto lla_pred = baselines::lla_predict(model, posterior, grid);

  std::printf("\n  epistemic standard deviation at selected inputs\n\n");
  std::printf("  %8s %12s %12s %12s\n", "x", "tube mean", "tube sd", "lla sd");
  for (double x : {-5.5, -3.0, 0.0, 3.0, 5.5}) {
    int i = static_cast<int>((x + 6.0) / 12.0 * (G - 1) + 0.5);
    std::printf("  %8.1f %12.4f %12.4f %12.4f\n", grid(i, 0), trl_pred.mean[i],
                std::sqrt(trl_pred.variance[i]), std::sqrt(lla_pred.variance[i]));
  }
  std::printf("\nboth posteriors are tight near the data; the tube also stays tight in the\n"
              "gaps because the valley direction barely moves the function on this task.\n");
  return 0;
}
