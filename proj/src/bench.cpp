#include "psbr/bench.hpp"

#include <sched.h>
#include <sys/utsname.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ostream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace psbr::bench {

namespace {

using json = nlohmann::json;
using clock_type = std::chrono::steady_clock;

// Shortest round-trip decimal form.
std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

TimingStats compute_stats(std::vector<double> s) {
  if (s.empty()) throw parameter_error("stats: no samples");
  std::sort(s.begin(), s.end());
  TimingStats t;
  t.min_ms = s.front();
  t.max_ms = s.back();
  const std::size_t n = s.size();
  t.median_ms = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  double sum = 0.0;
  for (double v : s) sum += v;
  t.mean_ms = sum / static_cast<double>(n);
  double ss = 0.0;
  for (double v : s) ss += (v - t.mean_ms) * (v - t.mean_ms);
  t.std_ms = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  return t;
}

const char* sweep_mode_name(SweepMode m) {
  return m == SweepMode::sparsity_aware ? "sparsity_aware" : "structure_oblivious";
}

SweepMode parse_sweep_mode(const std::string& name) {
  if (name == "sparsity_aware") return SweepMode::sparsity_aware;
  if (name == "structure_oblivious") return SweepMode::structure_oblivious;
  throw parameter_error("unknown sweep mode '" + name + "'");
}

const char* kernel_path_name(bsr::KernelPath p) {
  return p == bsr::KernelPath::reference ? "reference" : "vectorized";
}

bsr::KernelPath parse_kernel_path(const std::string& name) {
  if (name == "reference") return bsr::KernelPath::reference;
  if (name == "vectorized") return bsr::KernelPath::vectorized;
  throw parameter_error("unknown kernel path '" + name + "'");
}

void SweepConfig::validate() const {
  if (dims == 0 || batch == 0) throw parameter_error("sweep: dims and batch must be positive");
  if (!(sparsity >= 0.0 && sparsity <= 1.0))
    throw parameter_error("sweep: sparsity must lie in [0, 1]");
  if (repeats < 5) throw parameter_error("sweep: repeats must be >= 5");
  if (shapes.empty()) throw parameter_error("sweep: no block shapes given");
  if (paths.empty()) throw parameter_error("sweep: no kernel paths given");
  if (modes.empty()) throw parameter_error("sweep: no modes given");
  for (const auto& [n, m] : shapes) {
    if (n == 0 || m == 0) throw parameter_error("sweep: block shape must be positive");
    if (!pad && (dims % n != 0 || dims % m != 0))
      throw parameter_error("sweep: block shape " + std::to_string(n) + "x" +
                            std::to_string(m) + " does not divide dims " +
                            std::to_string(dims) + " (use pad)");
  }
}

std::vector<std::pair<std::size_t, std::size_t>> default_shape_ladder() {
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  for (std::size_t n = 1; n <= 256; n *= 2) shapes.push_back({n, 1});
  return shapes;
}

SweepConfig default_sweep_config() {
  SweepConfig cfg;
  cfg.shapes = default_shape_ladder();
  cfg.paths.push_back(bsr::KernelPath::reference);
  if (bsr::vectorized_path_available()) cfg.paths.push_back(bsr::KernelPath::vectorized);
  cfg.modes = {SweepMode::sparsity_aware, SweepMode::structure_oblivious};
  return cfg;
}

bool pin_to_core(int core) {
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(core, &set);
  return ::sched_setaffinity(0, sizeof set, &set) == 0;
}

std::string machine_descriptor(const sched::HardwareProfile& hw) {
  std::ostringstream os;
  struct utsname un {};
  if (::uname(&un) == 0)
    os << un.sysname << " " << un.machine << ", ";
  os << hw.core_count << (hw.core_count == 1 ? " core, " : " cores, ") << hw.isa_tag
     << ", " << (hw.cache_bytes >> 10) << " KiB L2";
  return os.str();
}

namespace {

struct CellWorkload {
  Matrix pruned_dense;  // zeros kept in place (the oblivious operand)
  bsr::BsrMatrix sparse;
  Matrix operand;
};

CellWorkload make_workload(const SweepConfig& cfg, std::size_t n, std::size_t m) {
  // Shape-only derivation: every mode and path of this cell times the same
  // matrix content.
  std::mt19937_64 rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(n),
                                             static_cast<std::uint64_t>(m)}));
  std::normal_distribution<double> normal;
  Matrix dense(cfg.dims, cfg.dims);
  for (double& v : dense.data) v = normal(rng);

  CellWorkload w;
  w.pruned_dense = bsr::prune_to_blocks(dense, n, m, cfg.sparsity, cfg.pad).pruned;
  w.sparse = bsr::dense_to_bsr(w.pruned_dense, n, m, 0.0, cfg.pad);
  w.operand = Matrix(cfg.dims, cfg.batch);
  for (double& v : w.operand.data) v = normal(rng);
  return w;
}

// Observable clock granularity: the smallest nonzero step between
// consecutive now() readings (the nominal period overstates precision).
std::int64_t clock_tick() {
  static const std::int64_t tick = [] {
    auto best = std::numeric_limits<std::int64_t>::max();
    for (int i = 0; i < 64; ++i) {
      const auto a = clock_type::now();
      auto b = clock_type::now();
      while (b == a) b = clock_type::now();
      best = std::min(best, (b - a).count());
    }
    return std::max<std::int64_t>(best, 1);
  }();
  return tick;
}

// One sample with the timer-resolution guard: a window under 100 observable
// ticks is re-run with doubled inner iterations until it is readable.
template <typename Fn>
double timed_sample(Fn&& call, std::size_t& inner_iterations, bool& guard_hit) {
  const std::int64_t min_window = 100 * clock_tick();
  constexpr std::size_t max_iters = std::size_t{1} << 20;
  for (;;) {
    const auto t0 = clock_type::now();
    for (std::size_t i = 0; i < inner_iterations; ++i) call();
    const auto t1 = clock_type::now();
    if ((t1 - t0).count() >= min_window || inner_iterations >= max_iters)
      return std::chrono::duration<double, std::milli>(t1 - t0).count() /
             static_cast<double>(inner_iterations);
    inner_iterations *= 2;
    guard_hit = true;
  }
}

}  // namespace

SweepReport run_sweep(const SweepConfig& cfg) {
  cfg.validate();

  SweepReport report;
  report.config = cfg;
  report.hardware = sched::detect_hardware();
  report.machine = machine_descriptor(report.hardware);

  if (cfg.pin_core) {
    if (pin_to_core(0))
      report.notes.push_back("pinned to core 0");
    else
      report.notes.push_back("core pinning requested but unavailable");
  }

  const auto& hw = report.hardware;
  volatile double sink = 0.0;

  for (const auto& [n, m] : cfg.shapes) {
    const CellWorkload work = make_workload(cfg, n, m);
    const auto oblivious_cfg = sched::fallback_config(sched::structure_of(work.sparse), hw);

    for (bsr::KernelPath path : cfg.paths) {
      // The sparsity-aware side goes through the scheduler: the task is
      // submitted, planned, and its cache entry filled by measured search.
      sched::TaskBuffer buffer;
      sched::submit(buffer, sched::make_task(sched::OpKind::spmm, work.sparse,
                                             cfg.batch, hw));
      const auto plan = sched::schedule(
          buffer, [&](const sched::TaskDescriptor& t) {
            return sched::select_kernel_config(t, hw, path).config;
          });
      const auto aware_cfg = plan.cache_configs.at(0);

      for (SweepMode mode : cfg.modes) {
        SweepCell cell;
        cell.block_rows = n;
        cell.block_cols = m;
        cell.path = path;
        cell.mode = mode;

        auto call = [&] {
          if (mode == SweepMode::sparsity_aware) {
            const Matrix y = bsr::spmm(work.sparse, work.operand, path, aware_cfg);
            sink = sink + (y.data.empty() ? 0.0 : y.data[0]);
          } else {
            const Matrix y =
                bsr::dense_mm(work.pruned_dense, work.operand, path, oblivious_cfg);
            sink = sink + (y.data.empty() ? 0.0 : y.data[0]);
          }
        };

        call();  // warm-up, discarded
        bool guard_hit = false;
        for (std::size_t r = 0; r < cfg.repeats; ++r)
          cell.samples_ms.push_back(timed_sample(call, cell.inner_iterations, guard_hit));
        if (guard_hit) {
          std::ostringstream os;
          os << "timer resolution guard raised inner iterations to "
             << cell.inner_iterations << " for " << n << "x" << m << " "
             << kernel_path_name(path) << " " << sweep_mode_name(mode);
          report.notes.push_back(os.str());
        }
        cell.stats = compute_stats(cell.samples_ms);
        report.cells.push_back(std::move(cell));
      }
    }
  }
  return report;
}

void write_sweep_csv(std::ostream& out, const SweepReport& report) {
  const auto& cfg = report.config;
  out << "# " << report.schema << "\n";
  out << "# seed = " << cfg.seed << "\n";
  out << "# dims = " << cfg.dims << "\n";
  out << "# batch = " << cfg.batch << "\n";
  out << "# sparsity = " << fmt_double(cfg.sparsity) << "\n";
  out << "# repeats = " << cfg.repeats << "\n";
  out << "# pad = " << (cfg.pad ? "true" : "false") << "\n";
  out << "# pin_core = " << (cfg.pin_core ? "true" : "false") << "\n";
  out << "# shapes =";
  for (const auto& [n, m] : cfg.shapes) out << " " << n << "x" << m;
  out << "\n# paths =";
  for (auto p : cfg.paths) out << " " << kernel_path_name(p);
  out << "\n# modes =";
  for (auto m : cfg.modes) out << " " << sweep_mode_name(m);
  out << "\n# machine = " << report.machine << "\n";
  for (const auto& note : report.notes) out << "# note = " << note << "\n";
  out << "block_rows,block_cols,kernel_path,mode,run_index,inner_iterations,ms\n";
  for (const auto& cell : report.cells) {
    for (std::size_t r = 0; r < cell.samples_ms.size(); ++r) {
      out << cell.block_rows << "," << cell.block_cols << ","
          << kernel_path_name(cell.path) << "," << sweep_mode_name(cell.mode) << ","
          << r << "," << cell.inner_iterations << "," << fmt_double(cell.samples_ms[r])
          << "\n";
    }
  }
}

namespace {

json stats_to_json(const TimingStats& t) {
  return json{{"min_ms", t.min_ms},
              {"max_ms", t.max_ms},
              {"median_ms", t.median_ms},
              {"mean_ms", t.mean_ms},
              {"std_ms", t.std_ms}};
}

TimingStats stats_from_json(const json& j) {
  TimingStats t;
  t.min_ms = j.at("min_ms").get<double>();
  t.max_ms = j.at("max_ms").get<double>();
  t.median_ms = j.at("median_ms").get<double>();
  t.mean_ms = j.at("mean_ms").get<double>();
  t.std_ms = j.at("std_ms").get<double>();
  return t;
}

}  // namespace

std::string sweep_report_to_json(const SweepReport& report) {
  const auto& cfg = report.config;
  json jshapes = json::array();
  for (const auto& [n, m] : cfg.shapes) jshapes.push_back(json::array({n, m}));
  json jpaths = json::array();
  for (auto p : cfg.paths) jpaths.push_back(kernel_path_name(p));
  json jmodes = json::array();
  for (auto m : cfg.modes) jmodes.push_back(sweep_mode_name(m));

  json jcells = json::array();
  for (const auto& cell : report.cells) {
    jcells.push_back(json{{"block_rows", cell.block_rows},
                          {"block_cols", cell.block_cols},
                          {"kernel_path", kernel_path_name(cell.path)},
                          {"mode", sweep_mode_name(cell.mode)},
                          {"runs", cell.samples_ms.size()},
                          {"inner_iterations", cell.inner_iterations},
                          {"samples_ms", cell.samples_ms},
                          {"stats", stats_to_json(cell.stats)}});
  }

  json j{{"schema", report.schema},
         {"config",
          {{"dims", cfg.dims},
           {"batch", cfg.batch},
           {"sparsity", cfg.sparsity},
           {"shapes", jshapes},
           {"repeats", cfg.repeats},
           {"seed", cfg.seed},
           {"pad", cfg.pad},
           {"pin_core", cfg.pin_core},
           {"paths", jpaths},
           {"modes", jmodes}}},
         {"machine",
          {{"descriptor", report.machine},
           {"core_count", report.hardware.core_count},
           {"cache_bytes", report.hardware.cache_bytes},
           {"isa_tag", report.hardware.isa_tag}}},
         {"notes", report.notes},
         {"cells", jcells}};
  return j.dump(2) + "\n";
}

SweepReport sweep_report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw io_error(std::string("sweep report: invalid JSON: ") + e.what());
  }
  try {
    SweepReport report;
    report.schema = j.at("schema").get<std::string>();
    if (report.schema != "psbr.sweep.v1")
      throw io_error("sweep report: unknown schema '" + report.schema + "'");
    const auto& jc = j.at("config");
    report.config.dims = jc.at("dims").get<std::size_t>();
    report.config.batch = jc.at("batch").get<std::size_t>();
    report.config.sparsity = jc.at("sparsity").get<double>();
    for (const auto& s : jc.at("shapes"))
      report.config.shapes.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    report.config.repeats = jc.at("repeats").get<std::size_t>();
    report.config.seed = jc.at("seed").get<std::uint64_t>();
    report.config.pad = jc.at("pad").get<bool>();
    report.config.pin_core = jc.at("pin_core").get<bool>();
    for (const auto& p : jc.at("paths"))
      report.config.paths.push_back(parse_kernel_path(p.get<std::string>()));
    for (const auto& m : jc.at("modes"))
      report.config.modes.push_back(parse_sweep_mode(m.get<std::string>()));
    const auto& jm = j.at("machine");
    report.machine = jm.at("descriptor").get<std::string>();
    report.hardware.core_count = jm.at("core_count").get<unsigned>();
    report.hardware.cache_bytes = jm.at("cache_bytes").get<std::size_t>();
    report.hardware.isa_tag = jm.at("isa_tag").get<std::string>();
    for (const auto& n : j.at("notes")) report.notes.push_back(n.get<std::string>());
    for (const auto& c : j.at("cells")) {
      SweepCell cell;
      cell.block_rows = c.at("block_rows").get<std::size_t>();
      cell.block_cols = c.at("block_cols").get<std::size_t>();
      cell.path = parse_kernel_path(c.at("kernel_path").get<std::string>());
      cell.mode = parse_sweep_mode(c.at("mode").get<std::string>());
      cell.inner_iterations = c.at("inner_iterations").get<std::size_t>();
      for (const auto& s : c.at("samples_ms")) cell.samples_ms.push_back(s.get<double>());
      cell.stats = stats_from_json(c.at("stats"));
      report.cells.push_back(std::move(cell));
    }
    return report;
  } catch (const json::exception& e) {
    throw io_error(std::string("sweep report: missing or mistyped field: ") + e.what());
  }
}

std::string format_sweep_report(const SweepReport& report) {
  std::ostringstream os;
  const auto& cfg = report.config;
  os << "sweep report (" << report.schema << ")\n";
  os << "  machine : " << report.machine << "\n";
  os << "  workload: " << cfg.dims << "x" << cfg.dims << " times " << cfg.dims << "x"
     << cfg.batch << ", sparsity " << fmt_double(cfg.sparsity) << ", " << cfg.repeats
     << " repeats, seed " << cfg.seed << "\n";
  for (const auto& note : report.notes) os << "  note    : " << note << "\n";
  os << "\n  shape    path        mode                   min_ms   median_ms     "
        "mean_ms      max_ms      std_ms\n";
  for (const auto& cell : report.cells) {
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux%zu", cell.block_rows, cell.block_cols);
    char line[256];
    std::snprintf(line, sizeof line, "  %-8s %-11s %-20s %9.4f   %9.4f   %9.4f   %9.4f   %9.4f\n",
                  shape, kernel_path_name(cell.path), sweep_mode_name(cell.mode),
                  cell.stats.min_ms, cell.stats.median_ms, cell.stats.mean_ms,
                  cell.stats.max_ms, cell.stats.std_ms);
    os << line;
  }
  return os.str();
}

}  // namespace psbr::bench
