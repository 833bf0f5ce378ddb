#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "psbr/common.hpp"
#include "psbr/optimizer.hpp"

// Desk-scale problems with analytic gradients and independent solution
// oracles: a synthetic lasso instance and a two-layer tanh classifier.
// Problems are immutable after generation; training owns its optimizer state.

namespace psbr::toy {

struct LassoProblem {
  Matrix a;                    // n x d design, unit-norm columns
  std::vector<double> y;       // n targets, y = a * w_true + noise
  std::vector<double> w_true;  // d coefficients, s nonzeros
  double noise_std = 0.01;
  std::uint64_t seed = 0;
};

LassoProblem make_lasso(std::size_t n, std::size_t d, std::size_t s,
                        double noise_std, std::uint64_t seed);

// Smooth part only: (1/2)||a w - y||^2 and its gradient a^T (a w - y).
std::pair<double, std::vector<double>> lasso_objective_and_grad(
    const LassoProblem& p, std::span<const double> w);

// Composite lasso objective (1/2)||a w - y||^2 + l1_weight * ||w||_1.
double lasso_composite_objective(const LassoProblem& p, std::span<const double> w,
                                 double l1_weight);

// Cyclic coordinate descent on the composite objective, run until the
// largest coordinate change in a sweep falls below 1e-10. Throws
// convergence_error after 1e5 sweeps.
std::vector<double> lasso_oracle(const LassoProblem& p, double l1_weight);

struct TinyNetProblem {
  std::size_t d_in = 16;
  std::size_t hidden = 32;
  std::size_t classes = 3;
  Matrix x_train;              // samples x d_in
  std::vector<int> y_train;
  Matrix x_test;
  std::vector<int> y_test;
  std::uint64_t seed = 0;
};

// Gaussian class blobs around well-separated means.
TinyNetProblem make_tinynet(std::size_t train_n, std::size_t test_n,
                            std::uint64_t seed);

// Parameter tensors: w1 (hidden x d_in), bias1 (hidden x 1),
// w2 (classes x hidden), bias2 (classes x 1).
std::vector<opt::WeightTensor> tinynet_init(const TinyNetProblem& p,
                                            std::uint64_t seed);

// Mean cross-entropy over the given split; fills per-tensor gradients when
// grads is non-null. Gradients are analytic (softmax + tanh backprop).
double tinynet_loss(const TinyNetProblem& p,
                    const std::vector<opt::WeightTensor>& params,
                    const Matrix& x, const std::vector<int>& y,
                    std::vector<std::vector<double>>* grads);

double tinynet_accuracy(const TinyNetProblem& p,
                        const std::vector<opt::WeightTensor>& params,
                        const Matrix& x, const std::vector<int>& y);

struct TrainRecord {
  std::uint64_t step = 0;
  double objective = 0.0;         // smooth loss at the post-step iterate
  double penalty = 0.0;           // weighted shrinkage penalty at the iterate
  double nonzero_fraction = 0.0;  // element-weighted, all tensors
};

struct TrainResult {
  std::vector<TrainRecord> trajectory;
  std::vector<opt::WeightTensor> params;
  opt::OptimizerState state;
};

struct TrainOptions {
  std::uint64_t steps = 1;
  // Optional plateau stop: relative objective change < 1e-6 across a
  // 50-step window. Off by default so trajectory length == steps.
  bool stop_on_plateau = false;
  double plateau_rel_change = 1e-6;
  std::uint64_t plateau_window = 50;
};

// Runs the optimizer on a problem. Aborts with divergence_error when the
// objective exceeds 1e6 x its initial value or turns non-finite.
TrainResult train_lasso(const LassoProblem& p, const opt::OptimizerConfig& cfg,
                        const TrainOptions& opts);
TrainResult train_tinynet(const TinyNetProblem& p, const opt::OptimizerConfig& cfg,
                          const TrainOptions& opts, std::uint64_t init_seed = 1);

}  // namespace psbr::toy
