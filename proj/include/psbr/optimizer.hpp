#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psbr/common.hpp"
#include "psbr/prox.hpp"

// Sparse optimizer: AdamW moment updates with a scheduled step multiplier,
// decoupled weight decay, and a shrinkage projection of the auxiliary point z
// after every step. Tensors whose names match an exempt pattern (biases,
// normalization parameters) are updated by plain AdamW.

namespace psbr::opt {

enum class Schedule { constant, linear_decay, cosine };

struct WeightTensor {
  std::string name;
  Matrix value;
};

struct OptimizerConfig {
  double alpha = 0.001;       // base step size
  double beta1 = 0.9;         // first-moment decay
  double beta2 = 0.999;       // second-moment decay
  double epsilon_adam = 1e-6; // denominator stabilizer
  double weight_decay = 0.0;  // decoupled decay coefficient
  Schedule schedule = Schedule::constant;
  std::uint64_t total_steps = 1;  // horizon for decaying schedules
  prox::ProxConfig prox;

  // Shrinkage scale: lambda_0 = alpha when tied (the "prox scale follows the
  // step size" default), else prox.lambda; schedule_prox additionally
  // multiplies lambda_0 by the step multiplier eta_k.
  bool tie_prox_lambda_to_step = true;
  bool schedule_prox = true;

  // Name substrings marking tensors that are never shrunk.
  std::vector<std::string> shrink_exempt = {"bias", "norm"};

  void validate() const;  // throws parameter_error
};

struct TensorState {
  std::vector<double> m;  // first moment, zero-initialized
  std::vector<double> v;  // second moment, zero-initialized
  prox::GammaState gamma; // empty for exempt tensors
  bool shrunk = false;    // resolved once at init from the exempt patterns
};

struct OptimizerState {
  std::uint64_t k = 0;  // completed steps
  std::vector<TensorState> tensors;  // parallel to the parameter list
};

// Step multiplier eta_k for step index k >= 1. constant -> 1; linear_decay ->
// 1 - k/total_steps floored at 0.01; cosine -> half-cosine from 1 to 0.01.
double set_schedule_multiplier(std::uint64_t k, Schedule schedule,
                               std::uint64_t total_steps);

bool is_shrink_exempt(const std::string& name,
                      const std::vector<std::string>& patterns);

// Effective shrinkage scale for one step given its multiplier.
double effective_prox_lambda(const OptimizerConfig& cfg, double eta);

OptimizerState init_state(const std::vector<WeightTensor>& params,
                          const OptimizerConfig& cfg);

// One optimizer step over all tensors. Gradients are validated (matching
// shapes, all entries finite) before any state is touched; a bad gradient
// rejects the step with no mutation. Tensor updates are sequential in list
// order with a fixed within-tensor order, so trajectories are reproducible.
void step(std::vector<WeightTensor>& params,
          const std::vector<std::vector<double>>& grads,
          OptimizerState& state, const OptimizerConfig& cfg);

struct SparsityEntry {
  std::string name;
  std::size_t elements = 0;
  std::size_t nonzeros = 0;
  std::size_t blocks = 0;          // ceil-grid count for the report's block shape
  std::size_t nonzero_blocks = 0;  // blocks containing any nonzero
  double nonzero_fraction = 0.0;
  double block_nonzero_fraction = 0.0;
};

struct SparsityReport {
  std::vector<SparsityEntry> tensors;
  std::size_t elements = 0;
  std::size_t nonzeros = 0;
  std::size_t blocks = 0;
  std::size_t nonzero_blocks = 0;
  double nonzero_fraction = 0.0;        // element-weighted global fraction
  double block_nonzero_fraction = 0.0;  // block-weighted global fraction
};

SparsityReport sparsity_report(const std::vector<WeightTensor>& params,
                               std::size_t block_rows = 1,
                               std::size_t block_cols = 1);

}  // namespace psbr::opt
