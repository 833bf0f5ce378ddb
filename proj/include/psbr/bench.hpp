#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "psbr/bsr.hpp"
#include "psbr/common.hpp"
#include "psbr/sched_cache.hpp"

// Block-shape benchmark sweep. For each (block shape, kernel path, mode)
// cell it generates a pruned weight matrix, then times repeated matmul
// calls: sparsity_aware converts to BSR and runs it through the scheduler's
// measured config selection; structure_oblivious runs the dense kernel on
// the same zero-filled matrix. Both modes of a cell share one seed, so they
// time identical matrix content.

namespace psbr::bench {

struct TimingStats {
  double min_ms = 0.0;
  double max_ms = 0.0;
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double std_ms = 0.0;  // sample standard deviation
};

TimingStats compute_stats(std::vector<double> samples_ms);  // throws on empty

enum class SweepMode { sparsity_aware, structure_oblivious };
const char* sweep_mode_name(SweepMode m);
SweepMode parse_sweep_mode(const std::string& name);  // throws parameter_error
const char* kernel_path_name(bsr::KernelPath p);
bsr::KernelPath parse_kernel_path(const std::string& name);

struct SweepConfig {
  std::size_t dims = 1024;   // square weight matrix
  std::size_t batch = 256;   // operand columns
  double sparsity = 0.9;     // fraction of blocks zeroed
  std::vector<std::pair<std::size_t, std::size_t>> shapes;  // block shapes
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  bool pad = false;
  bool pin_core = false;
  std::vector<bsr::KernelPath> paths;
  std::vector<SweepMode> modes;

  void validate() const;  // throws parameter_error
};

// The default column-block ladder: n x 1 for n in 1..256 doubling.
std::vector<std::pair<std::size_t, std::size_t>> default_shape_ladder();
SweepConfig default_sweep_config();

struct SweepCell {
  std::size_t block_rows = 1;
  std::size_t block_cols = 1;
  bsr::KernelPath path = bsr::KernelPath::reference;
  SweepMode mode = SweepMode::sparsity_aware;
  std::vector<double> samples_ms;    // one per repeat, warm-up excluded
  std::size_t inner_iterations = 1;  // >1 when the timer guard kicked in
  TimingStats stats;
};

struct SweepReport {
  std::string schema = "psbr.sweep.v1";
  SweepConfig config;
  std::string machine;  // human-readable descriptor
  sched::HardwareProfile hardware;
  std::vector<SweepCell> cells;
  std::vector<std::string> notes;
};

SweepReport run_sweep(const SweepConfig& cfg);

// CSV: comment header with the resolved config, then one row per sample.
void write_sweep_csv(std::ostream& out, const SweepReport& report);

// JSON round-trip (config echo, machine descriptor, per-cell stats).
std::string sweep_report_to_json(const SweepReport& report);
SweepReport sweep_report_from_json(const std::string& text);  // throws io_error

// Pretty text table for the `report` subcommand.
std::string format_sweep_report(const SweepReport& report);

// Best-effort affinity pin; false when unsupported or refused.
bool pin_to_core(int core);

std::string machine_descriptor(const sched::HardwareProfile& hw);

}  // namespace psbr::bench
