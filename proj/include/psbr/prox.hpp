#pragma once

#include <span>
#include <vector>

#include "psbr/common.hpp"

// Shrinkage (soft-thresholding) operators, iterative l1 reweighting, and the
// smoothed-penalty gradient form. All functions are pure: no shared state,
// safe for concurrent callers.

namespace psbr::prox {

// The printed shrinkage rule thresholds at (lambda/mu)*gamma_i; the textbook
// prox of mu*gamma*|.| with step lambda thresholds at lambda*mu*gamma_i.
// Both are exposed; `paper` is the default.
enum class ThresholdConvention { paper, textbook };

struct ProxConfig {
  double mu = 1.0;
  double lambda = 1.0;
  double epsilon_gamma = 1e-4;   // floor inside the reweighting denominator
  int ell_max = 1;               // max reweighting iterations
  std::size_t block_rows = 1;    // 1x1 means elementwise
  std::size_t block_cols = 1;
  std::uint64_t reweight_every = 1;  // optimizer steps between gamma updates
  ThresholdConvention convention = ThresholdConvention::paper;
  bool pad = false;              // allow non-divisible dims via logical zero padding
  bool enabled = true;

  bool elementwise() const { return block_rows == 1 && block_cols == 1; }
  void validate() const;  // throws parameter_error
};

// Reweighting state for one tensor: one gamma per element (elementwise mode)
// or one per block, plus the iteration counter ell.
struct GammaState {
  std::vector<double> gamma;
  int ell = 0;
};

double shrink_threshold(double gamma, double lambda, double mu, ThresholdConvention conv);

// w_i = (1 - tau_i/|z_i|) z_i when |z_i| > tau_i, else 0, with tau_i the
// convention's threshold. |z_i| == tau_i maps to 0.
std::vector<double> shrink_elementwise(std::span<const double> z,
                                       std::span<const double> gamma,
                                       double lambda, double mu,
                                       ThresholdConvention conv = ThresholdConvention::paper);

// Block variant: |z_i| replaced by the Frobenius norm of each block. Blocks
// are indexed row-major over the block grid. With pad=true, dims that do not
// divide the block shape are treated as zero-padded to the next multiple;
// block norms only ever see real entries.
Matrix shrink_block(const Matrix& z, std::span<const double> gamma_blocks,
                    double lambda, double mu,
                    std::size_t block_rows, std::size_t block_cols,
                    ThresholdConvention conv = ThresholdConvention::paper,
                    bool pad = false);

// gamma_i <- 1/(|w_i| + eps) (elementwise) or 1/(||w_b||_F + eps) (block);
// increments state.ell by one.
void reweight_gamma(const Matrix& w, double epsilon_gamma,
                    std::size_t block_rows, std::size_t block_cols,
                    GammaState& state, bool pad = false);

GammaState make_gamma_state(const Matrix& w, std::size_t block_rows,
                            std::size_t block_cols, bool pad = false);

// (w - prox_w)/lambda, the gradient of the Moreau envelope of the weighted
// l1 term at prox scale lambda.
std::vector<double> my_gradient(std::span<const double> w,
                                std::span<const double> prox_w, double lambda);

// mu * sum_i gamma_i |w_i| (elementwise) or mu * sum_b gamma_b ||w_b||_F.
double penalty_value(const Matrix& w, std::span<const double> gamma, double mu,
                     std::size_t block_rows, std::size_t block_cols,
                     bool pad = false);

// Number of gamma entries a tensor needs under the given block shape.
std::size_t gamma_size(std::size_t rows, std::size_t cols,
                       std::size_t block_rows, std::size_t block_cols,
                       bool pad);

}  // namespace psbr::prox
