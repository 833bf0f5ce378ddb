#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "psbr/bsr.hpp"
#include "psbr/common.hpp"

// Structure-reuse scheduler: tasks carry a digest of their sparse structure
// (never the values); identical structures share one plan-cache entry, and
// similar tasks are placed adjacently in the execution plan.

namespace psbr::sched {

enum class OpKind { spmm, spmv, dense_mm };

const char* op_kind_name(OpKind k);

struct HardwareProfile {
  unsigned core_count = 1;
  std::size_t cache_bytes = 1u << 20;  // per-core L2 (best effort)
  std::string isa_tag = "scalar";
  // Carried for profile completeness; the candidate set only consults
  // core_count and cache_bytes.
  std::size_t max_mem_per_block = 0;
  std::size_t max_threads_per_block = 0;
};

HardwareProfile detect_hardware();

// The structural tuple: everything about a BSR matrix except its values.
struct BsrStructure {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t block_rows = 1;
  std::size_t block_cols = 1;
  std::vector<std::uint32_t> indptr;
  std::vector<std::uint32_t> indices;

  bool operator==(const BsrStructure& o) const = default;
};

BsrStructure structure_of(const bsr::BsrMatrix& m);

// Stable 64-bit digest over the canonical little-endian serialization of the
// tuple. Digest equality is only a hint; callers resolve collisions by full
// comparison.
std::uint64_t structure_digest(const BsrStructure& s);

struct TaskDescriptor {
  OpKind op_kind = OpKind::spmm;
  BsrStructure structure;
  std::uint64_t structure_key = 0;
  std::size_t operand_cols = 1;  // dense operand width (1 for spmv)
  HardwareProfile hardware;
};

TaskDescriptor make_task(OpKind op, const bsr::BsrMatrix& m,
                         std::size_t operand_cols, const HardwareProfile& hw);

struct TaskBuffer {
  std::vector<TaskDescriptor> tasks;  // submission order

  // Distinct structures in first-seen order; tasks reference them by slot.
  std::vector<BsrStructure> structures;
  std::vector<std::uint64_t> structure_keys;  // parallel to structures
  std::vector<std::size_t> task_slot;         // parallel to tasks

  std::size_t cache_size() const { return structures.size(); }
};

// Appends the task; adds a cache entry only for a previously unseen
// structural tuple (digest match alone is not enough).
void submit(TaskBuffer& buffer, TaskDescriptor task);

// Similarity levels, strongest first: block shape, then matrix/operand
// dimensions, then operator kind. Tasks are clustered hierarchically by
// these keys; the extractor is injectable for experimentation.
using SimilarityKey = std::array<std::uint64_t, 3>;
using SimilarityKeyFn = std::function<SimilarityKey(const TaskDescriptor&)>;
SimilarityKey default_similarity_key(const TaskDescriptor& t);

struct PlanEntry {
  std::size_t task_index = 0;  // into buffer.tasks
  std::size_t cache_slot = 0;  // into plan cache
};

struct ExecutionPlan {
  std::vector<PlanEntry> order;  // a permutation of the buffer
  std::vector<std::uint64_t> cache_keys;        // per structure slot
  std::vector<bsr::KernelConfig> cache_configs; // parallel to cache_keys

  std::string dump() const;  // human-readable plan listing
};

// Groups tasks by structure (submission order within a group), then places
// groups so that similar ones are adjacent, preserving first-seen order
// inside every similarity cluster. Buffers with pairwise-dissimilar
// structures therefore keep pure submission order. Cache configs are filled
// by the selector when given, else with fallback_config.
ExecutionPlan schedule(const TaskBuffer& buffer,
                       const SimilarityKeyFn& key_fn = default_similarity_key);
ExecutionPlan schedule(
    const TaskBuffer& buffer,
    const std::function<bsr::KernelConfig(const TaskDescriptor&)>& selector,
    const SimilarityKeyFn& key_fn = default_similarity_key);

// Documented measurement-failure default: full-width tile, block-rows split
// evenly across cores.
bsr::KernelConfig fallback_config(const BsrStructure& s, const HardwareProfile& hw);

// Deterministic candidate set for the measured search; derived from the
// structure plus core_count and cache_bytes only.
std::vector<bsr::KernelConfig> candidate_configs(const TaskDescriptor& task,
                                                 const HardwareProfile& hw);

struct KernelSelection {
  bsr::KernelConfig config;
  double median_ms = 0.0;  // of the winning candidate
  bool measured = false;   // false when the fallback was used
};

// Small measured search: runs each candidate 3 times on synthetic data with
// the task's structure (serially, to keep timings uncontaminated) and keeps
// the median; ties resolve to the earliest candidate. Any measurement
// failure falls back to fallback_config.
KernelSelection select_kernel_config(const TaskDescriptor& task,
                                     const HardwareProfile& hw,
                                     bsr::KernelPath path = bsr::default_kernel_path());
KernelSelection select_kernel_config(const TaskDescriptor& task,
                                     const HardwareProfile& hw,
                                     std::span<const bsr::KernelConfig> candidates,
                                     bsr::KernelPath path = bsr::default_kernel_path());

}  // namespace psbr::sched
