#include "psbr/optimizer.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace psbr::opt {

void OptimizerConfig::validate() const {
  if (!(alpha > 0.0)) throw parameter_error("optimizer: alpha must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw parameter_error("optimizer: beta1 must lie in (0,1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw parameter_error("optimizer: beta2 must lie in (0,1)");
  if (!(epsilon_adam > 0.0)) throw parameter_error("optimizer: epsilon_adam must be > 0");
  if (weight_decay < 0.0) throw parameter_error("optimizer: weight_decay must be >= 0");
  if (total_steps < 1) throw parameter_error("optimizer: total_steps must be >= 1");
  prox.validate();
}

double set_schedule_multiplier(std::uint64_t k, Schedule schedule,
                               std::uint64_t total_steps) {
  if (k < 1) throw parameter_error("schedule: step index must be >= 1");
  constexpr double floor = 0.01;
  switch (schedule) {
    case Schedule::constant:
      return 1.0;
    case Schedule::linear_decay: {
      const double frac = static_cast<double>(k) / static_cast<double>(total_steps);
      return std::max(1.0 - frac, floor);
    }
    case Schedule::cosine: {
      const double frac =
          std::min(static_cast<double>(k) / static_cast<double>(total_steps), 1.0);
      return floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    }
  }
  throw parameter_error("schedule: unknown kind");
}

bool is_shrink_exempt(const std::string& name,
                      const std::vector<std::string>& patterns) {
  for (const auto& p : patterns) {
    if (!p.empty() && name.find(p) != std::string::npos) return true;
  }
  return false;
}

double effective_prox_lambda(const OptimizerConfig& cfg, double eta) {
  const double base = cfg.tie_prox_lambda_to_step ? cfg.alpha : cfg.prox.lambda;
  return cfg.schedule_prox ? eta * base : base;
}

OptimizerState init_state(const std::vector<WeightTensor>& params,
                          const OptimizerConfig& cfg) {
  cfg.validate();
  OptimizerState state;
  state.tensors.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& ts = state.tensors[i];
    ts.m.assign(params[i].value.size(), 0.0);
    ts.v.assign(params[i].value.size(), 0.0);
    ts.shrunk = cfg.prox.enabled && !is_shrink_exempt(params[i].name, cfg.shrink_exempt);
    if (ts.shrunk) {
      ts.gamma = prox::make_gamma_state(params[i].value, cfg.prox.block_rows,
                                        cfg.prox.block_cols, cfg.prox.pad);
    }
  }
  return state;
}

namespace {

void check_step_inputs(const std::vector<WeightTensor>& params,
                       const std::vector<std::vector<double>>& grads,
                       const OptimizerState& state) {
  if (grads.size() != params.size())
    throw dimension_error("step: gradient list does not match parameter list");
  if (state.tensors.size() != params.size())
    throw dimension_error("step: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].value.size())
      throw dimension_error("step: gradient shape mismatch for tensor '" + params[i].name + "'");
    if (!all_finite(grads[i]))
      throw divergence_error("step: non-finite gradient for tensor '" + params[i].name +
                             "'; step rejected");
  }
}

}  // namespace

void step(std::vector<WeightTensor>& params,
          const std::vector<std::vector<double>>& grads,
          OptimizerState& state, const OptimizerConfig& cfg) {
  // Reject bad inputs before mutating anything.
  check_step_inputs(params, grads, state);

  const std::uint64_t k = state.k + 1;
  const double eta = set_schedule_multiplier(k, cfg.schedule, cfg.total_steps);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(k));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(k));
  const double lambda_k = effective_prox_lambda(cfg, eta);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value;
    auto& ts = state.tensors[i];
    const auto& g = grads[i];

    Matrix z(w.rows, w.cols);
    for (std::size_t j = 0; j < w.size(); ++j) {
      ts.m[j] = cfg.beta1 * ts.m[j] + (1.0 - cfg.beta1) * g[j];
      ts.v[j] = cfg.beta2 * ts.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = ts.m[j] / bc1;
      const double vhat = ts.v[j] / bc2;
      z.data[j] = w.data[j] - eta * (cfg.alpha * mhat / (std::sqrt(vhat) + cfg.epsilon_adam) +
                                     cfg.weight_decay * w.data[j]);
    }

    if (!ts.shrunk) {
      w = std::move(z);
      continue;
    }

    if (cfg.prox.elementwise()) {
      auto shrunk = prox::shrink_elementwise(z.data, ts.gamma.gamma, lambda_k,
                                             cfg.prox.mu, cfg.prox.convention);
      w.data = std::move(shrunk);
    } else {
      w = prox::shrink_block(z, ts.gamma.gamma, lambda_k, cfg.prox.mu,
                             cfg.prox.block_rows, cfg.prox.block_cols,
                             cfg.prox.convention, cfg.prox.pad);
    }

    if (k % cfg.prox.reweight_every == 0 && ts.gamma.ell < cfg.prox.ell_max) {
      prox::reweight_gamma(w, cfg.prox.epsilon_gamma, cfg.prox.block_rows,
                           cfg.prox.block_cols, ts.gamma, cfg.prox.pad);
    }
  }

  state.k = k;
}

SparsityReport sparsity_report(const std::vector<WeightTensor>& params,
                               std::size_t block_rows, std::size_t block_cols) {
  if (block_rows < 1 || block_cols < 1)
    throw parameter_error("sparsity_report: block shape entries must be >= 1");

  SparsityReport rep;
  for (const auto& p : params) {
    SparsityEntry e;
    e.name = p.name;
    e.elements = p.value.size();
    for (double v : p.value.data) e.nonzeros += (v != 0.0);

    const std::size_t grid_r = ceil_div(std::max<std::size_t>(p.value.rows, 1), block_rows);
    const std::size_t grid_c = ceil_div(std::max<std::size_t>(p.value.cols, 1), block_cols);
    e.blocks = grid_r * grid_c;
    for (std::size_t br = 0; br < grid_r; ++br) {
      for (std::size_t bc = 0; bc < grid_c; ++bc) {
        bool any = false;
        for (std::size_t i = br * block_rows; i < std::min((br + 1) * block_rows, p.value.rows); ++i) {
          for (std::size_t j = bc * block_cols; j < std::min((bc + 1) * block_cols, p.value.cols);
               ++j) {
            if (p.value(i, j) != 0.0) {
              any = true;
              break;
            }
          }
          if (any) break;
        }
        e.nonzero_blocks += any;
      }
    }

    e.nonzero_fraction =
        e.elements ? static_cast<double>(e.nonzeros) / static_cast<double>(e.elements) : 0.0;
    e.block_nonzero_fraction =
        e.blocks ? static_cast<double>(e.nonzero_blocks) / static_cast<double>(e.blocks) : 0.0;

    rep.elements += e.elements;
    rep.nonzeros += e.nonzeros;
    rep.blocks += e.blocks;
    rep.nonzero_blocks += e.nonzero_blocks;
    rep.tensors.push_back(std::move(e));
  }
  rep.nonzero_fraction =
      rep.elements ? static_cast<double>(rep.nonzeros) / static_cast<double>(rep.elements) : 0.0;
  rep.block_nonzero_fraction =
      rep.blocks ? static_cast<double>(rep.nonzero_blocks) / static_cast<double>(rep.blocks) : 0.0;
  return rep;
}

}  // namespace psbr::opt
