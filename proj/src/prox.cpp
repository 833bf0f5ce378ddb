#include "psbr/prox.hpp"

#include <cmath>

namespace psbr::prox {

void ProxConfig::validate() const {
  if (!(mu > 0.0)) throw parameter_error("prox: mu must be > 0");
  if (!(lambda > 0.0)) throw parameter_error("prox: lambda must be > 0");
  if (!(epsilon_gamma > 0.0)) throw parameter_error("prox: epsilon_gamma must be > 0");
  if (ell_max < 1) throw parameter_error("prox: ell_max must be >= 1");
  if (block_rows < 1 || block_cols < 1) throw parameter_error("prox: block shape must be >= 1x1");
  if (reweight_every < 1) throw parameter_error("prox: reweight_every must be >= 1");
}

double shrink_threshold(double gamma, double lambda, double mu, ThresholdConvention conv) {
  return conv == ThresholdConvention::paper ? (lambda / mu) * gamma : lambda * mu * gamma;
}

namespace {

void check_scale_params(double lambda, double mu) {
  if (!(lambda > 0.0)) throw parameter_error("shrink: lambda must be > 0");
  if (!(mu > 0.0)) throw parameter_error("shrink: mu must be > 0");
}

std::size_t grid_dim(std::size_t extent, std::size_t block, bool pad, const char* what) {
  if (extent % block != 0 && !pad) {
    throw dimension_error(std::string("block shape does not divide ") + what +
                          " and padding is disabled");
  }
  return ceil_div(extent, block);
}

// Frobenius norm of the real entries of block (br, bc); padding never
// contributes.
double block_norm(const Matrix& z, std::size_t br, std::size_t bc,
                  std::size_t r, std::size_t c) {
  const std::size_t i0 = br * r;
  const std::size_t j0 = bc * c;
  const std::size_t i1 = std::min(i0 + r, z.rows);
  const std::size_t j1 = std::min(j0 + c, z.cols);
  double ss = 0.0;
  for (std::size_t i = i0; i < i1; ++i) {
    for (std::size_t j = j0; j < j1; ++j) {
      const double v = z(i, j);
      ss += v * v;
    }
  }
  return std::sqrt(ss);
}

}  // namespace

std::size_t gamma_size(std::size_t rows, std::size_t cols,
                       std::size_t block_rows, std::size_t block_cols, bool pad) {
  if (block_rows == 1 && block_cols == 1) return rows * cols;
  return grid_dim(rows, block_rows, pad, "rows") * grid_dim(cols, block_cols, pad, "cols");
}

std::vector<double> shrink_elementwise(std::span<const double> z,
                                       std::span<const double> gamma,
                                       double lambda, double mu,
                                       ThresholdConvention conv) {
  check_scale_params(lambda, mu);
  if (z.size() != gamma.size()) {
    throw dimension_error("shrink_elementwise: z and gamma sizes differ");
  }
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double tau = shrink_threshold(gamma[i], lambda, mu, conv);
    const double mag = std::fabs(z[i]);
    out[i] = mag > tau ? (1.0 - tau / mag) * z[i] : 0.0;
  }
  return out;
}

Matrix shrink_block(const Matrix& z, std::span<const double> gamma_blocks,
                    double lambda, double mu,
                    std::size_t block_rows, std::size_t block_cols,
                    ThresholdConvention conv, bool pad) {
  check_scale_params(lambda, mu);
  const std::size_t grows = grid_dim(z.rows, block_rows, pad, "rows");
  const std::size_t gcols = grid_dim(z.cols, block_cols, pad, "cols");
  if (gamma_blocks.size() != grows * gcols) {
    throw dimension_error("shrink_block: gamma has wrong number of blocks");
  }
  Matrix out(z.rows, z.cols, 0.0);
  for (std::size_t br = 0; br < grows; ++br) {
    for (std::size_t bc = 0; bc < gcols; ++bc) {
      const double nrm = block_norm(z, br, bc, block_rows, block_cols);
      const double tau = shrink_threshold(gamma_blocks[br * gcols + bc], lambda, mu, conv);
      if (nrm <= tau) continue;
      const double scale = 1.0 - tau / nrm;
      const std::size_t i1 = std::min((br + 1) * block_rows, z.rows);
      const std::size_t j1 = std::min((bc + 1) * block_cols, z.cols);
      for (std::size_t i = br * block_rows; i < i1; ++i) {
        for (std::size_t j = bc * block_cols; j < j1; ++j) {
          out(i, j) = scale * z(i, j);
        }
      }
    }
  }
  return out;
}

void reweight_gamma(const Matrix& w, double epsilon_gamma,
                    std::size_t block_rows, std::size_t block_cols,
                    GammaState& state, bool pad) {
  if (!(epsilon_gamma > 0.0)) throw parameter_error("reweight_gamma: epsilon must be > 0");
  if (block_rows == 1 && block_cols == 1) {
    state.gamma.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      state.gamma[i] = 1.0 / (std::fabs(w.data[i]) + epsilon_gamma);
    }
  } else {
    const std::size_t grows = grid_dim(w.rows, block_rows, pad, "rows");
    const std::size_t gcols = grid_dim(w.cols, block_cols, pad, "cols");
    state.gamma.resize(grows * gcols);
    for (std::size_t br = 0; br < grows; ++br) {
      for (std::size_t bc = 0; bc < gcols; ++bc) {
        state.gamma[br * gcols + bc] =
            1.0 / (block_norm(w, br, bc, block_rows, block_cols) + epsilon_gamma);
      }
    }
  }
  state.ell += 1;
}

GammaState make_gamma_state(const Matrix& w, std::size_t block_rows,
                            std::size_t block_cols, bool pad) {
  // ell = 0 warm start: uniform weights (plain l1 on the first pass).
  GammaState s;
  s.gamma.assign(gamma_size(w.rows, w.cols, block_rows, block_cols, pad), 1.0);
  s.ell = 0;
  return s;
}

std::vector<double> my_gradient(std::span<const double> w,
                                std::span<const double> prox_w, double lambda) {
  if (!(lambda > 0.0)) throw parameter_error("my_gradient: lambda must be > 0");
  if (w.size() != prox_w.size()) throw dimension_error("my_gradient: shape mismatch");
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = (w[i] - prox_w[i]) / lambda;
  return out;
}

double penalty_value(const Matrix& w, std::span<const double> gamma, double mu,
                     std::size_t block_rows, std::size_t block_cols, bool pad) {
  if (block_rows == 1 && block_cols == 1) {
    if (gamma.size() != w.size()) throw dimension_error("penalty_value: gamma size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += gamma[i] * std::fabs(w.data[i]);
    return mu * acc;
  }
  const std::size_t grows = grid_dim(w.rows, block_rows, pad, "rows");
  const std::size_t gcols = grid_dim(w.cols, block_cols, pad, "cols");
  if (gamma.size() != grows * gcols) throw dimension_error("penalty_value: gamma size mismatch");
  double acc = 0.0;
  for (std::size_t br = 0; br < grows; ++br) {
    for (std::size_t bc = 0; bc < gcols; ++bc) {
      acc += gamma[br * gcols + bc] * block_norm(w, br, bc, block_rows, block_cols);
    }
  }
  return mu * acc;
}

}  // namespace psbr::prox
