#include "psbr/sched_cache.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

namespace psbr::sched {

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::spmm: return "spmm";
    case OpKind::spmv: return "spmv";
    case OpKind::dense_mm: return "dense_mm";
  }
  return "unknown";
}

HardwareProfile detect_hardware() {
  HardwareProfile hw;
  hw.core_count = std::max(1u, std::thread::hardware_concurrency());
#ifdef _SC_LEVEL2_CACHE_SIZE
  if (const long l2 = ::sysconf(_SC_LEVEL2_CACHE_SIZE); l2 > 0)
    hw.cache_bytes = static_cast<std::size_t>(l2);
#endif
  hw.isa_tag = bsr::vectorized_path_available() ? "avx2+fma" : "scalar";
  hw.max_mem_per_block = hw.cache_bytes;
  hw.max_threads_per_block = hw.core_count;
  return hw;
}

BsrStructure structure_of(const bsr::BsrMatrix& m) {
  BsrStructure s;
  s.rows = m.rows;
  s.cols = m.cols;
  s.block_rows = m.block_rows;
  s.block_cols = m.block_cols;
  s.indptr = m.indptr;
  s.indices = m.indices;
  return s;
}

std::uint64_t structure_digest(const BsrStructure& s) {
  Fnv1a h;
  h.update_u64(s.rows);
  h.update_u64(s.cols);
  h.update_u64(s.block_rows);
  h.update_u64(s.block_cols);
  h.update_u64(s.indptr.size());
  for (std::uint32_t v : s.indptr) h.update_u32(v);
  h.update_u64(s.indices.size());
  for (std::uint32_t v : s.indices) h.update_u32(v);
  return h.digest();
}

TaskDescriptor make_task(OpKind op, const bsr::BsrMatrix& m,
                         std::size_t operand_cols, const HardwareProfile& hw) {
  if (operand_cols < 1) throw parameter_error("task: operand_cols must be >= 1");
  TaskDescriptor t;
  t.op_kind = op;
  t.structure = structure_of(m);
  t.structure_key = structure_digest(t.structure);
  t.operand_cols = operand_cols;
  t.hardware = hw;
  return t;
}

void submit(TaskBuffer& buffer, TaskDescriptor task) {
  std::size_t slot = buffer.structures.size();
  for (std::size_t i = 0; i < buffer.structures.size(); ++i) {
    // Digest first (cheap), full tuple compare on a hit (collision safety).
    if (buffer.structure_keys[i] == task.structure_key &&
        buffer.structures[i] == task.structure) {
      slot = i;
      break;
    }
  }
  if (slot == buffer.structures.size()) {
    buffer.structures.push_back(task.structure);
    buffer.structure_keys.push_back(task.structure_key);
  }
  buffer.task_slot.push_back(slot);
  buffer.tasks.push_back(std::move(task));
}

SimilarityKey default_similarity_key(const TaskDescriptor& t) {
  Fnv1a dims;
  dims.update_u64(t.structure.rows);
  dims.update_u64(t.structure.cols);
  dims.update_u64(t.operand_cols);
  return SimilarityKey{
      (static_cast<std::uint64_t>(t.structure.block_rows) << 32) |
          static_cast<std::uint64_t>(t.structure.block_cols & 0xffffffffull),
      dims.digest(),
      static_cast<std::uint64_t>(t.op_kind),
  };
}

namespace {

// Stable bucketing: preserves first-appearance order of both the buckets and
// the items inside each bucket.
std::vector<std::vector<std::size_t>> bucket_stable(
    const std::vector<std::size_t>& items,
    const std::function<std::uint64_t(std::size_t)>& key_of) {
  std::vector<std::uint64_t> keys;
  std::vector<std::vector<std::size_t>> buckets;
  for (std::size_t it : items) {
    const std::uint64_t k = key_of(it);
    std::size_t b = keys.size();
    for (std::size_t i = 0; i < keys.size(); ++i) {
      if (keys[i] == k) {
        b = i;
        break;
      }
    }
    if (b == keys.size()) {
      keys.push_back(k);
      buckets.emplace_back();
    }
    buckets[b].push_back(it);
  }
  return buckets;
}

ExecutionPlan build_plan(
    const TaskBuffer& buffer,
    const std::function<bsr::KernelConfig(const TaskDescriptor&)>* selector,
    const SimilarityKeyFn& key_fn) {
  ExecutionPlan plan;
  const std::size_t slots = buffer.cache_size();
  if (buffer.tasks.empty()) return plan;

  // Tasks per structure slot, submission order inside each group.
  std::vector<std::vector<std::size_t>> groups(slots);
  for (std::size_t i = 0; i < buffer.tasks.size(); ++i)
    groups[buffer.task_slot[i]].push_back(i);

  std::vector<SimilarityKey> group_key(slots);
  for (std::size_t s = 0; s < slots; ++s)
    group_key[s] = key_fn(buffer.tasks[groups[s].front()]);

  // Hierarchical clustering, strongest similarity level first. Singleton
  // keys at every level leave first-seen (submission) order untouched.
  std::vector<std::size_t> slot_ids(slots);
  for (std::size_t s = 0; s < slots; ++s) slot_ids[s] = s;

  std::vector<std::size_t> ordered_slots;
  ordered_slots.reserve(slots);
  for (auto& level1 : bucket_stable(slot_ids, [&](std::size_t s) { return group_key[s][0]; })) {
    for (auto& level2 : bucket_stable(level1, [&](std::size_t s) { return group_key[s][1]; })) {
      for (auto& level3 :
           bucket_stable(level2, [&](std::size_t s) { return group_key[s][2]; })) {
        ordered_slots.insert(ordered_slots.end(), level3.begin(), level3.end());
      }
    }
  }

  for (std::size_t s : ordered_slots) {
    for (std::size_t task_index : groups[s]) plan.order.push_back({task_index, s});
  }

  plan.cache_keys = buffer.structure_keys;
  plan.cache_configs.resize(slots);
  for (std::size_t s = 0; s < slots; ++s) {
    const TaskDescriptor& rep = buffer.tasks[groups[s].front()];
    plan.cache_configs[s] =
        selector ? (*selector)(rep) : fallback_config(rep.structure, rep.hardware);
  }
  return plan;
}

}  // namespace

ExecutionPlan schedule(const TaskBuffer& buffer, const SimilarityKeyFn& key_fn) {
  return build_plan(buffer, nullptr, key_fn);
}

ExecutionPlan schedule(
    const TaskBuffer& buffer,
    const std::function<bsr::KernelConfig(const TaskDescriptor&)>& selector,
    const SimilarityKeyFn& key_fn) {
  return build_plan(buffer, &selector, key_fn);
}

std::string ExecutionPlan::dump() const {
  std::ostringstream os;
  os << "execution plan: " << order.size() << " tasks, " << cache_keys.size()
     << " cached structures\n";
  for (std::size_t s = 0; s < cache_keys.size(); ++s) {
    os << "  slot " << s << ": key=" << std::hex << cache_keys[s] << std::dec
       << " config tile=" << cache_configs[s].col_tile
       << " grain=" << cache_configs[s].row_grain << "\n";
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    os << "  [" << i << "] task " << order[i].task_index << " -> slot "
       << order[i].cache_slot << "\n";
  }
  return os.str();
}

bsr::KernelConfig fallback_config(const BsrStructure& s, const HardwareProfile& hw) {
  const std::size_t grid_rows = s.rows ? ceil_div(s.rows, s.block_rows) : 1;
  bsr::KernelConfig cfg;
  cfg.col_tile = 0;
  cfg.row_grain = std::max<std::size_t>(1, grid_rows / std::max(1u, hw.core_count));
  return cfg;
}

std::vector<bsr::KernelConfig> candidate_configs(const TaskDescriptor& task,
                                                 const HardwareProfile& hw) {
  const auto& s = task.structure;
  const std::size_t grid_rows = s.rows ? ceil_div(s.rows, s.block_rows) : 1;

  // Tile sized so one output panel plus operand rows fit the per-core cache.
  std::size_t t_fit = hw.cache_bytes / (2 * sizeof(double) * std::max<std::size_t>(s.block_rows, 1));
  t_fit = (t_fit / 16) * 16;
  t_fit = std::max<std::size_t>(t_fit, 16);

  std::vector<std::size_t> tiles{0};
  for (std::size_t t : {std::size_t{64}, t_fit}) {
    if (t < task.operand_cols && std::find(tiles.begin(), tiles.end(), t) == tiles.end())
      tiles.push_back(t);
  }

  std::vector<std::size_t> grains;
  grains.push_back(std::max<std::size_t>(1, grid_rows / std::max(1u, hw.core_count)));
  if (std::find(grains.begin(), grains.end(), std::size_t{1}) == grains.end())
    grains.push_back(1);

  std::vector<bsr::KernelConfig> out;
  for (std::size_t t : tiles) {
    for (std::size_t g : grains) out.push_back(bsr::KernelConfig{t, g});
  }
  return out;
}

namespace {

// Synthetic operands with the task's structure; values are irrelevant to
// runtime, so everything is filled with ones.
struct TrialFixture {
  bsr::BsrMatrix a;
  Matrix a_dense;
  Matrix b;
  std::vector<double> x;

  explicit TrialFixture(const TaskDescriptor& task) {
    const auto& s = task.structure;
    a.rows = s.rows;
    a.cols = s.cols;
    a.block_rows = s.block_rows;
    a.block_cols = s.block_cols;
    a.indptr = s.indptr;
    a.indices = s.indices;
    a.data.assign(s.indices.size() * s.block_rows * s.block_cols, 1.0);
    a.validate();
    if (task.op_kind == OpKind::dense_mm) a_dense = bsr_to_dense(a);
    if (task.op_kind == OpKind::spmv)
      x.assign(s.cols, 1.0);
    else
      b = Matrix(s.cols, task.operand_cols, 1.0);
  }
};

double run_trial(const TrialFixture& fx, const TaskDescriptor& task,
                 const bsr::KernelConfig& cfg, bsr::KernelPath path) {
  volatile double sink = 0.0;
  auto call = [&] {
    switch (task.op_kind) {
      case OpKind::spmm: {
        auto y = bsr::spmm(fx.a, fx.b, path, cfg);
        sink = sink + (y.data.empty() ? 0.0 : y.data[0]);
        break;
      }
      case OpKind::spmv: {
        auto y = bsr::spmv(fx.a, fx.x);
        sink = sink + (y.empty() ? 0.0 : y[0]);
        break;
      }
      case OpKind::dense_mm: {
        auto y = bsr::dense_mm(fx.a_dense, fx.b, path, cfg);
        sink = sink + (y.data.empty() ? 0.0 : y.data[0]);
        break;
      }
    }
  };

  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  call();
  auto t1 = clock::now();
  double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  if (ms < 0.1) {
    // Too fast for the timer: amortize over enough iterations.
    const int iters = static_cast<int>(std::ceil(0.1 / std::max(ms, 1e-6)));
    t0 = clock::now();
    for (int i = 0; i < iters; ++i) call();
    t1 = clock::now();
    ms = std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
  }
  return ms;
}

}  // namespace

KernelSelection select_kernel_config(const TaskDescriptor& task,
                                     const HardwareProfile& hw,
                                     bsr::KernelPath path) {
  const auto candidates = candidate_configs(task, hw);
  return select_kernel_config(task, hw, candidates, path);
}

KernelSelection select_kernel_config(const TaskDescriptor& task,
                                     const HardwareProfile& hw,
                                     std::span<const bsr::KernelConfig> candidates,
                                     bsr::KernelPath path) {
  KernelSelection fallback{fallback_config(task.structure, hw), 0.0, false};
  if (candidates.empty()) return fallback;

  try {
    const TrialFixture fx(task);
    KernelSelection best;
    bool have_best = false;
    for (const auto& cfg : candidates) {
      std::array<double, 3> trials{};
      for (auto& t : trials) t = run_trial(fx, task, cfg, path);
      std::sort(trials.begin(), trials.end());
      const double median = trials[1];
      if (!std::isfinite(median)) return fallback;
      // Strict comparison: equal medians keep the earlier candidate.
      if (!have_best || median < best.median_ms) {
        best = KernelSelection{cfg, median, true};
        have_best = true;
      }
    }
    return best;
  } catch (const std::exception&) {
    return fallback;
  }
}

}  // namespace psbr::sched
