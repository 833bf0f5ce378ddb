#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "psbr/bench.hpp"
#include "psbr/bsr.hpp"
#include "psbr/container.hpp"
#include "psbr/optimizer.hpp"
#include "psbr/sched_cache.hpp"
#include "psbr/toy_models.hpp"

namespace {

using namespace psbr;

struct Flags {
  std::uint64_t seed = 42;
  std::string out;
  std::vector<std::string> block_shapes;
  double sparsity = 0.9;
  std::size_t repeats = 5;
  bool pin_core = false;
  bool pad = false;

  // train
  std::string problem = "lasso";
  std::uint64_t steps = 500;
  double alpha = 0.05;
  double prox_lambda = 0.005;  // 0 ties the shrinkage scale to the step size
  std::uint64_t reweight_every = 100;
  int ell_max = 1;
  bool prox_off = false;

  // bench-sweep
  std::size_t dims = 1024;
  std::size_t batch = 256;
  std::vector<std::string> paths;
  std::vector<std::string> modes;

  // positionals
  std::string checkpoint_path;
  std::string weights_path;
  std::string input_path;
  std::string report_path;
};

std::pair<std::size_t, std::size_t> parse_block_shape(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= text.size())
    throw parameter_error("block shape must look like NxM, got '" + text + "'");
  std::size_t n = 0, m = 0;
  try {
    std::size_t used = 0;
    n = std::stoull(text.substr(0, x), &used);
    if (used != x) throw parameter_error("");
    const std::string rest = text.substr(x + 1);
    m = std::stoull(rest, &used);
    if (used != rest.size()) throw parameter_error("");
  } catch (const std::exception&) {
    throw parameter_error("block shape must look like NxM, got '" + text + "'");
  }
  if (n == 0 || m == 0) throw parameter_error("block shape entries must be positive");
  return {n, m};
}

opt::OptimizerConfig make_optimizer_config(const Flags& f) {
  opt::OptimizerConfig cfg;
  cfg.alpha = f.alpha;
  cfg.total_steps = std::max<std::uint64_t>(f.steps, 1);
  cfg.prox.enabled = !f.prox_off;
  cfg.prox.reweight_every = std::max<std::uint64_t>(f.reweight_every, 1);
  cfg.prox.ell_max = f.ell_max;
  if (f.prox_lambda > 0.0) {
    cfg.tie_prox_lambda_to_step = false;
    cfg.prox.lambda = f.prox_lambda;
  }
  cfg.validate();
  return cfg;
}

std::string resolved_train_config(const Flags& f) {
  std::ostringstream os;
  os << "command = train\n"
     << "problem = " << f.problem << "\n"
     << "seed = " << f.seed << "\n"
     << "steps = " << f.steps << "\n"
     << "alpha = " << f.alpha << "\n"
     << "prox-lambda = " << f.prox_lambda << "\n"
     << "reweight-every = " << f.reweight_every << "\n"
     << "ell-max = " << f.ell_max << "\n"
     << "prox-off = " << (f.prox_off ? "true" : "false") << "\n";
  return os.str();
}

int cmd_train(const Flags& f) {
  if (f.steps < 1) throw parameter_error("train: --steps must be >= 1");
  if (f.out.empty()) throw parameter_error("train: --out is required");
  const auto cfg = make_optimizer_config(f);

  toy::TrainOptions opts;
  opts.steps = f.steps;

  toy::TrainResult result;
  if (f.problem == "lasso") {
    const auto problem = toy::make_lasso(200, 100, 10, 0.01, f.seed);
    result = toy::train_lasso(problem, cfg, opts);
  } else if (f.problem == "tinynet") {
    const auto problem = toy::make_tinynet(192, 96, f.seed);
    result = toy::train_tinynet(problem, cfg, opts);
  } else {
    throw parameter_error("train: unknown problem '" + f.problem +
                          "' (expected lasso or tinynet)");
  }

  const std::string echo = resolved_train_config(f);
  container::save_checkpoint(f.out,
                             container::Checkpoint{result.params, result.state, echo});

  const std::string csv_path = f.out + ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw io_error("train: cannot open '" + csv_path + "' for writing");
  csv << "# psbr.train.v1\n";
  std::istringstream echo_lines(echo);
  for (std::string line; std::getline(echo_lines, line);) csv << "# " << line << "\n";
  csv << "step,objective,penalty,nonzero_fraction\n";
  char buf[160];
  for (const auto& rec : result.trajectory) {
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(rec.step), rec.objective, rec.penalty,
                  rec.nonzero_fraction);
    csv << buf;
  }
  csv.flush();
  if (!csv) throw io_error("train: write to '" + csv_path + "' failed");

  const auto report = opt::sparsity_report(result.params);
  std::cout << "trained " << f.problem << " for " << result.trajectory.size()
            << " steps; final objective "
            << result.trajectory.back().objective << ", nonzero fraction "
            << report.nonzero_fraction << "\n"
            << "checkpoint: " << f.out << "\ntrajectory: " << csv_path << "\n";
  return 0;
}

int cmd_export_bsr(const Flags& f) {
  if (f.out.empty()) throw parameter_error("export-bsr: --out is required");
  auto [n, m] = f.block_shapes.empty()
                    ? std::pair<std::size_t, std::size_t>{1, 1}
                    : parse_block_shape(f.block_shapes.front());
  const auto ckpt = container::load_checkpoint(f.checkpoint_path);

  std::vector<container::TensorSection> sections;
  std::ostringstream echo;
  echo << "command = export-bsr\nblock-shape = " << n << "x" << m
       << "\npad = " << (f.pad ? "true" : "false") << "\n";
  sections.push_back(container::text_section("::config", echo.str()));
  for (const auto& p : ckpt.params) {
    const auto bsr_w = bsr::dense_to_bsr(p.value, n, m, 0.0, f.pad);
    sections.push_back(container::to_section(p.name, bsr_w));
  }
  container::save_container(f.out, sections);

  std::cout << "exported " << ckpt.params.size() << " tensors as " << n << "x" << m
            << " blocks to " << f.out << "\n";
  return 0;
}

int cmd_infer(const Flags& f) {
  const auto weight_sections = container::load_container(f.weights_path);
  const auto input_sections = container::load_container(f.input_path);
  const auto* wsec = [&]() -> const container::TensorSection* {
    for (const auto& s : weight_sections)
      if (s.name.find("::") == std::string::npos) return &s;
    return nullptr;
  }();
  const auto* xsec = [&]() -> const container::TensorSection* {
    for (const auto& s : input_sections)
      if (s.name.find("::") == std::string::npos) return &s;
    return nullptr;
  }();
  if (!wsec) throw io_error("infer: no weight tensor in '" + f.weights_path + "'");
  if (!xsec) throw io_error("infer: no input tensor in '" + f.input_path + "'");

  const auto w = container::section_to_bsr(*wsec);
  const Matrix x = container::section_to_dense(*xsec);
  if (w.cols != x.rows)
    throw dimension_error("infer: weights are " + std::to_string(w.rows) + "x" +
                          std::to_string(w.cols) + " but input has " +
                          std::to_string(x.rows) + " rows");

  const auto path = bsr::default_kernel_path();
  const auto hw = sched::detect_hardware();
  const auto cfg = sched::fallback_config(sched::structure_of(w), hw);

  Matrix y;
  std::vector<double> samples_ms;
  for (int run = 0; run < 5; ++run) {
    const auto t0 = std::chrono::steady_clock::now();
    y = bsr::spmm(w, x, path, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  const auto stats = bench::compute_stats(samples_ms);

  if (!f.out.empty()) {
    std::vector<container::TensorSection> out_sections;
    std::ostringstream echo;
    echo << "command = infer\nweights = " << f.weights_path
         << "\ninput = " << f.input_path << "\n";
    out_sections.push_back(container::text_section("::config", echo.str()));
    out_sections.push_back(container::to_section("y", y));
    container::save_container(f.out, out_sections);
  }

  char line[64];
  std::snprintf(line, sizeof line, "%.3f / %.3f\n", stats.mean_ms, stats.std_ms);
  std::cout << line;
  return 0;
}

int cmd_bench_sweep(const Flags& f) {
  bench::SweepConfig cfg = bench::default_sweep_config();
  cfg.dims = f.dims;
  cfg.batch = f.batch;
  cfg.sparsity = f.sparsity;
  cfg.repeats = f.repeats;
  cfg.seed = f.seed;
  cfg.pad = f.pad;
  cfg.pin_core = f.pin_core;
  if (!f.block_shapes.empty()) {
    cfg.shapes.clear();
    for (const auto& s : f.block_shapes) cfg.shapes.push_back(parse_block_shape(s));
  }
  if (!f.paths.empty()) {
    cfg.paths.clear();
    for (const auto& p : f.paths) cfg.paths.push_back(bench::parse_kernel_path(p));
  }
  if (!f.modes.empty()) {
    cfg.modes.clear();
    for (const auto& m : f.modes) cfg.modes.push_back(bench::parse_sweep_mode(m));
  }
  cfg.validate();

  const auto report = bench::run_sweep(cfg);

  const std::string prefix = f.out.empty() ? "sweep" : f.out;
  const std::string json_path = prefix + ".json";
  const std::string csv_path = prefix + ".csv";
  {
    std::ofstream out(json_path);
    if (!out) throw io_error("bench-sweep: cannot open '" + json_path + "'");
    out << bench::sweep_report_to_json(report);
  }
  {
    std::ofstream out(csv_path);
    if (!out) throw io_error("bench-sweep: cannot open '" + csv_path + "'");
    bench::write_sweep_csv(out, report);
  }
  std::cout << bench::format_sweep_report(report) << "\nreport: " << json_path
            << "\nsamples: " << csv_path << "\n";
  return 0;
}

int cmd_report(const Flags& f) {
  std::ifstream in(f.report_path);
  if (!in) throw io_error("report: cannot open '" + f.report_path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const auto report = bench::sweep_report_from_json(ss.str());
  std::cout << bench::format_sweep_report(report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Flags f;
  CLI::App app{"block-sparse training, export, inference, and benchmark toolkit"};
  app.set_config("--config", "", "read key = value defaults from a file");
  app.require_subcommand(1);

  app.add_option("--seed", f.seed, "master random seed")->capture_default_str();
  app.add_option("--out", f.out, "output path (train/export-bsr/infer) or prefix (bench-sweep)");
  app.add_option("--block-shape", f.block_shapes,
                 "block shape NxM (repeatable for bench-sweep)");
  app.add_option("--sparsity", f.sparsity, "target zero-block fraction")
      ->capture_default_str();
  app.add_option("--repeats", f.repeats, "timed runs per sweep cell (>= 5)")
      ->capture_default_str();
  app.add_flag("--pin-core", f.pin_core, "pin the sweep to one core");
  app.add_flag("--pad", f.pad, "zero-pad shapes that do not divide the block shape");

  app.add_option("--problem", f.problem, "train: lasso or tinynet")->capture_default_str();
  app.add_option("--steps", f.steps, "train: optimizer steps")->capture_default_str();
  app.add_option("--alpha", f.alpha, "train: base step size")->capture_default_str();
  app.add_option("--prox-lambda", f.prox_lambda,
                 "train: fixed shrinkage scale (0 ties it to the step size)")
      ->capture_default_str();
  app.add_option("--reweight-every", f.reweight_every, "train: steps between reweights")
      ->capture_default_str();
  app.add_option("--ell-max", f.ell_max, "train: max reweight rounds")
      ->capture_default_str();
  app.add_flag("--prox-off", f.prox_off, "train: disable shrinkage (plain AdamW)");

  app.add_option("--dims", f.dims, "bench-sweep: square matrix dimension")
      ->capture_default_str();
  app.add_option("--batch", f.batch, "bench-sweep: operand columns")
      ->capture_default_str();
  app.add_option("--path", f.paths, "bench-sweep: kernel path (reference/vectorized)");
  app.add_option("--mode", f.modes,
                 "bench-sweep: sparsity_aware and/or structure_oblivious");

  auto* train = app.add_subcommand("train", "train a toy model and write a checkpoint");
  auto* export_bsr =
      app.add_subcommand("export-bsr", "export checkpoint weights as block-sparse rows");
  export_bsr->add_option("checkpoint", f.checkpoint_path, "checkpoint file")->required();
  auto* infer = app.add_subcommand("infer", "apply exported weights to an input tensor");
  infer->add_option("weights", f.weights_path, "BSR container file")->required();
  infer->add_option("input", f.input_path, "input container file")->required();
  auto* bench_sweep =
      app.add_subcommand("bench-sweep", "time block shapes across kernels and modes");
  auto* report = app.add_subcommand("report", "pretty-print a sweep report");
  report->add_option("report_json", f.report_path, "sweep report JSON file")->required();

  for (auto* sub : {train, export_bsr, infer, bench_sweep, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(f);
    if (export_bsr->parsed()) return cmd_export_bsr(f);
    if (infer->parsed()) return cmd_infer(f);
    if (bench_sweep->parsed()) return cmd_bench_sweep(f);
    if (report->parsed()) return cmd_report(f);
  } catch (const divergence_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
