#include "psbr/toy_models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace psbr::toy {

namespace {

double soft(double x, double t) {
  const double mag = std::fabs(x) - t;
  return mag > 0.0 ? (x < 0.0 ? -mag : mag) : 0.0;
}

}  // namespace

LassoProblem make_lasso(std::size_t n, std::size_t d, std::size_t s,
                        double noise_std, std::uint64_t seed) {
  if (n < 1 || d < 1) throw parameter_error("make_lasso: n and d must be >= 1");
  if (s > d) throw parameter_error("make_lasso: s cannot exceed d");
  if (noise_std < 0.0) throw parameter_error("make_lasso: noise_std must be >= 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> mag(0.5, 2.0);

  LassoProblem p;
  p.seed = seed;
  p.noise_std = noise_std;
  p.a = Matrix(n, d);
  for (auto& v : p.a.data) v = nd(rng);
  for (std::size_t j = 0; j < d; ++j) {
    double norm2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm2 += p.a(i, j) * p.a(i, j);
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t i = 0; i < n; ++i) p.a(i, j) *= inv;
  }

  std::vector<std::size_t> perm(d);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  p.w_true.assign(d, 0.0);
  for (std::size_t k = 0; k < s; ++k) {
    const double sign = (rng() & 1u) ? 1.0 : -1.0;
    p.w_true[perm[k]] = sign * mag(rng);
  }

  p.y.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += p.a(i, j) * p.w_true[j];
    p.y[i] = acc + noise_std * nd(rng);
  }
  return p;
}

std::pair<double, std::vector<double>> lasso_objective_and_grad(
    const LassoProblem& p, std::span<const double> w) {
  const std::size_t n = p.a.rows, d = p.a.cols;
  if (w.size() != d) throw dimension_error("lasso: w must have length d");

  std::vector<double> r(n, 0.0);  // residual a w - y
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += p.a(i, j) * w[j];
    r[i] = acc - p.y[i];
  }
  double obj = 0.0;
  for (double v : r) obj += v * v;
  obj *= 0.5;

  std::vector<double> grad(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) grad[j] += p.a(i, j) * r[i];
  }
  return {obj, std::move(grad)};
}

double lasso_composite_objective(const LassoProblem& p, std::span<const double> w,
                                 double l1_weight) {
  auto [obj, grad] = lasso_objective_and_grad(p, w);
  double l1 = 0.0;
  for (double v : w) l1 += std::fabs(v);
  return obj + l1_weight * l1;
}

std::vector<double> lasso_oracle(const LassoProblem& p, double l1_weight) {
  if (l1_weight < 0.0) throw parameter_error("lasso_oracle: l1 weight must be >= 0");
  const std::size_t n = p.a.rows, d = p.a.cols;

  std::vector<double> w(d, 0.0);
  std::vector<double> r = p.y;  // residual y - a w, starting at w = 0

  constexpr int kMaxSweeps = 100000;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double max_delta = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      // Unit-norm columns make the coordinate minimizer soft(rho_j, t).
      double rho = w[j];
      for (std::size_t i = 0; i < n; ++i) rho += p.a(i, j) * r[i];
      const double wj = soft(rho, l1_weight);
      const double delta = wj - w[j];
      if (delta != 0.0) {
        for (std::size_t i = 0; i < n; ++i) r[i] -= p.a(i, j) * delta;
        w[j] = wj;
      }
      max_delta = std::max(max_delta, std::fabs(delta));
    }
    if (max_delta < 1e-10) return w;
  }
  throw convergence_error("lasso_oracle: coordinate descent did not converge");
}

TinyNetProblem make_tinynet(std::size_t train_n, std::size_t test_n,
                            std::uint64_t seed) {
  if (train_n < 1 || test_n < 1)
    throw parameter_error("make_tinynet: split sizes must be >= 1");

  TinyNetProblem p;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);

  // Class means on a radius-3 sphere; unit isotropic within-class noise.
  Matrix means(p.classes, p.d_in);
  for (std::size_t c = 0; c < p.classes; ++c) {
    double norm2 = 0.0;
    for (std::size_t j = 0; j < p.d_in; ++j) {
      means(c, j) = nd(rng);
      norm2 += means(c, j) * means(c, j);
    }
    const double scale = 3.0 / std::sqrt(norm2);
    for (std::size_t j = 0; j < p.d_in; ++j) means(c, j) *= scale;
  }

  auto fill_split = [&](std::size_t count, Matrix& x, std::vector<int>& y) {
    x = Matrix(count, p.d_in);
    y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t c = i % p.classes;  // balanced classes
      y[i] = static_cast<int>(c);
      for (std::size_t j = 0; j < p.d_in; ++j) x(i, j) = means(c, j) + nd(rng);
    }
  };
  fill_split(train_n, p.x_train, p.y_train);
  fill_split(test_n, p.x_test, p.y_test);
  return p;
}

std::vector<opt::WeightTensor> tinynet_init(const TinyNetProblem& p,
                                            std::uint64_t init_seed) {
  std::mt19937_64 rng(derive_seed(p.seed, {0x1234, init_seed}));
  std::normal_distribution<double> nd(0.0, 1.0);

  Matrix w1(p.hidden, p.d_in);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(p.d_in));
  for (auto& v : w1.data) v = s1 * nd(rng);
  Matrix w2(p.classes, p.hidden);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(p.hidden));
  for (auto& v : w2.data) v = s2 * nd(rng);

  std::vector<opt::WeightTensor> params;
  params.push_back({"w1", std::move(w1)});
  params.push_back({"bias1", Matrix(p.hidden, 1, 0.0)});
  params.push_back({"w2", std::move(w2)});
  params.push_back({"bias2", Matrix(p.classes, 1, 0.0)});
  return params;
}

namespace {

void check_tinynet_params(const TinyNetProblem& p,
                          const std::vector<opt::WeightTensor>& params) {
  if (params.size() != 4 || params[0].name != "w1" || params[1].name != "bias1" ||
      params[2].name != "w2" || params[3].name != "bias2")
    throw dimension_error("tinynet: expected tensors w1, bias1, w2, bias2");
  if (params[0].value.rows != p.hidden || params[0].value.cols != p.d_in ||
      params[1].value.rows != p.hidden || params[1].value.cols != 1 ||
      params[2].value.rows != p.classes || params[2].value.cols != p.hidden ||
      params[3].value.rows != p.classes || params[3].value.cols != 1)
    throw dimension_error("tinynet: parameter shape mismatch");
}

}  // namespace

double tinynet_loss(const TinyNetProblem& p,
                    const std::vector<opt::WeightTensor>& params,
                    const Matrix& x, const std::vector<int>& y,
                    std::vector<std::vector<double>>* grads) {
  check_tinynet_params(p, params);
  if (x.cols != p.d_in || x.rows != y.size())
    throw dimension_error("tinynet: data shape mismatch");

  const auto& w1 = params[0].value;
  const auto& b1 = params[1].value;
  const auto& w2 = params[2].value;
  const auto& b2 = params[3].value;
  const std::size_t batch = x.rows;

  if (grads) {
    grads->resize(4);
    for (std::size_t t = 0; t < 4; ++t) (*grads)[t].assign(params[t].value.size(), 0.0);
  }

  std::vector<double> a1(p.hidden), logits(p.classes), prob(p.classes), dpre1(p.hidden);
  double loss = 0.0;

  for (std::size_t i = 0; i < batch; ++i) {
    const double* xi = x.row_ptr(i);
    for (std::size_t hjdx = 0; hjdx < p.hidden; ++hjdx) {
      double acc = b1(hjdx, 0);
      for (std::size_t j = 0; j < p.d_in; ++j) acc += w1(hjdx, j) * xi[j];
      a1[hjdx] = std::tanh(acc);
    }
    double maxlogit = -1e300;
    for (std::size_t c = 0; c < p.classes; ++c) {
      double acc = b2(c, 0);
      for (std::size_t hjdx = 0; hjdx < p.hidden; ++hjdx) acc += w2(c, hjdx) * a1[hjdx];
      logits[c] = acc;
      maxlogit = std::max(maxlogit, acc);
    }
    double denom = 0.0;
    for (std::size_t c = 0; c < p.classes; ++c) {
      prob[c] = std::exp(logits[c] - maxlogit);
      denom += prob[c];
    }
    for (auto& v : prob) v /= denom;
    loss -= std::log(std::max(prob[static_cast<std::size_t>(y[i])], 1e-300));

    if (!grads) continue;
    auto& gw1 = (*grads)[0];
    auto& gb1 = (*grads)[1];
    auto& gw2 = (*grads)[2];
    auto& gb2 = (*grads)[3];

    std::fill(dpre1.begin(), dpre1.end(), 0.0);
    for (std::size_t c = 0; c < p.classes; ++c) {
      const double dlogit = prob[c] - (static_cast<int>(c) == y[i] ? 1.0 : 0.0);
      gb2[c] += dlogit;
      for (std::size_t hjdx = 0; hjdx < p.hidden; ++hjdx) {
        gw2[c * p.hidden + hjdx] += dlogit * a1[hjdx];
        dpre1[hjdx] += w2(c, hjdx) * dlogit;
      }
    }
    for (std::size_t hjdx = 0; hjdx < p.hidden; ++hjdx) {
      const double d = dpre1[hjdx] * (1.0 - a1[hjdx] * a1[hjdx]);
      gb1[hjdx] += d;
      for (std::size_t j = 0; j < p.d_in; ++j) gw1[hjdx * p.d_in + j] += d * xi[j];
    }
  }

  const double inv_batch = 1.0 / static_cast<double>(batch);
  if (grads) {
    for (auto& g : *grads)
      for (auto& v : g) v *= inv_batch;
  }
  return loss * inv_batch;
}

double tinynet_accuracy(const TinyNetProblem& p,
                        const std::vector<opt::WeightTensor>& params,
                        const Matrix& x, const std::vector<int>& y) {
  check_tinynet_params(p, params);
  const auto& w1 = params[0].value;
  const auto& b1 = params[1].value;
  const auto& w2 = params[2].value;
  const auto& b2 = params[3].value;

  std::size_t hits = 0;
  std::vector<double> a1(p.hidden);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xi = x.row_ptr(i);
    for (std::size_t hjdx = 0; hjdx < p.hidden; ++hjdx) {
      double acc = b1(hjdx, 0);
      for (std::size_t j = 0; j < p.d_in; ++j) acc += w1(hjdx, j) * xi[j];
      a1[hjdx] = std::tanh(acc);
    }
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t c = 0; c < p.classes; ++c) {
      double acc = b2(c, 0);
      for (std::size_t hjdx = 0; hjdx < p.hidden; ++hjdx) acc += w2(c, hjdx) * a1[hjdx];
      if (acc > best_v) {
        best_v = acc;
        best = c;
      }
    }
    hits += (static_cast<int>(best) == y[i]);
  }
  return static_cast<double>(hits) / static_cast<double>(x.rows);
}

namespace {

double shrink_penalty(const std::vector<opt::WeightTensor>& params,
                      const opt::OptimizerState& st, const opt::OptimizerConfig& cfg) {
  double total = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!st.tensors[i].shrunk) continue;
    total += prox::penalty_value(params[i].value, st.tensors[i].gamma.gamma, cfg.prox.mu,
                                 cfg.prox.block_rows, cfg.prox.block_cols, cfg.prox.pad);
  }
  return total;
}

// Shared training loop: compute_grads fills grads and returns the smooth
// objective at the current iterate; eval_objective re-evaluates it after the
// step for the trajectory record and divergence check.
template <class ComputeGrads, class EvalObjective>
TrainResult train_loop(std::vector<opt::WeightTensor> params,
                       const opt::OptimizerConfig& cfg, const TrainOptions& opts,
                       ComputeGrads compute_grads, EvalObjective eval_objective) {
  if (opts.steps < 1) throw parameter_error("train: steps must be >= 1");

  TrainResult out;
  out.params = std::move(params);
  out.state = opt::init_state(out.params, cfg);
  out.trajectory.reserve(opts.steps);

  const double initial = std::max(eval_objective(out.params), 1e-12);
  std::vector<std::vector<double>> grads;

  for (std::uint64_t k = 1; k <= opts.steps; ++k) {
    compute_grads(out.params, grads);
    opt::step(out.params, grads, out.state, cfg);

    TrainRecord rec;
    rec.step = k;
    rec.objective = eval_objective(out.params);
    rec.penalty = shrink_penalty(out.params, out.state, cfg);
    rec.nonzero_fraction = opt::sparsity_report(out.params).nonzero_fraction;
    out.trajectory.push_back(rec);

    if (!std::isfinite(rec.objective) || rec.objective > 1e6 * initial)
      throw divergence_error("train: objective diverged at step " + std::to_string(k));

    if (opts.stop_on_plateau && out.trajectory.size() > opts.plateau_window) {
      const auto& old = out.trajectory[out.trajectory.size() - 1 - opts.plateau_window];
      const double ref = std::max(std::fabs(old.objective + old.penalty), 1e-12);
      if (std::fabs((rec.objective + rec.penalty) - (old.objective + old.penalty)) <
          opts.plateau_rel_change * ref)
        break;
    }
  }
  return out;
}

}  // namespace

TrainResult train_lasso(const LassoProblem& p, const opt::OptimizerConfig& cfg,
                        const TrainOptions& opts) {
  std::vector<opt::WeightTensor> params;
  params.push_back({"w", Matrix(p.a.cols, 1, 0.0)});

  auto compute = [&p](const std::vector<opt::WeightTensor>& ps,
                      std::vector<std::vector<double>>& grads) {
    auto [obj, g] = lasso_objective_and_grad(p, ps[0].value.data);
    grads.assign(1, std::move(g));
    return obj;
  };
  auto eval = [&p](const std::vector<opt::WeightTensor>& ps) {
    return lasso_objective_and_grad(p, ps[0].value.data).first;
  };
  return train_loop(std::move(params), cfg, opts, compute, eval);
}

TrainResult train_tinynet(const TinyNetProblem& p, const opt::OptimizerConfig& cfg,
                          const TrainOptions& opts, std::uint64_t init_seed) {
  auto params = tinynet_init(p, init_seed);

  auto compute = [&p](const std::vector<opt::WeightTensor>& ps,
                      std::vector<std::vector<double>>& grads) {
    return tinynet_loss(p, ps, p.x_train, p.y_train, &grads);
  };
  auto eval = [&p](const std::vector<opt::WeightTensor>& ps) {
    return tinynet_loss(p, ps, p.x_train, p.y_train, nullptr);
  };
  return train_loop(std::move(params), cfg, opts, compute, eval);
}

}  // namespace psbr::toy
