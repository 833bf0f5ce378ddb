#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "psbr/common.hpp"

// Block Sparse Row storage and kernels. A BsrMatrix keeps the logical
// (unpadded) dimensions; the block grid is the ceiling division, so boundary
// blocks of a padded matrix hold zeros in their phantom lanes. Matrices are
// immutable after construction and safe to share across threads.

namespace psbr::bsr {

struct BsrMatrix {
  std::size_t rows = 0;        // logical row count
  std::size_t cols = 0;        // logical column count
  std::size_t block_rows = 1;  // r
  std::size_t block_cols = 1;  // c
  std::vector<std::uint32_t> indptr;   // grid_rows() + 1 entries
  std::vector<std::uint32_t> indices;  // block-column per stored block, ascending per row
  std::vector<double> data;            // stored blocks, r*c each, row-major in-block

  std::size_t grid_rows() const { return rows ? ceil_div(rows, block_rows) : 0; }
  std::size_t grid_cols() const { return cols ? ceil_div(cols, block_cols) : 0; }
  std::size_t stored_blocks() const { return indices.size(); }

  void validate() const;  // throws structural_error on any invariant breach
};

// Conversion. A block is stored iff it contains an entry with |value| >
// zero_tol (default: exact zeros only, since shrinkage produces exact
// zeros). Without pad, dimensions must divide the block shape.
BsrMatrix dense_to_bsr(const Matrix& dense, std::size_t block_rows,
                       std::size_t block_cols, double zero_tol = 0.0,
                       bool pad = false);

Matrix bsr_to_dense(const BsrMatrix& m);

// Zeroes the floor(target * block_count) blocks of smallest Frobenius norm
// (ties broken by block-row then block-col order, computed over real entries
// only). Returns the pruned matrix and the kept mask over the block grid.
struct PruneResult {
  Matrix pruned;
  std::vector<std::uint8_t> kept;  // grid row-major, 1 = survived
};

PruneResult prune_to_blocks(const Matrix& dense, std::size_t block_rows,
                            std::size_t block_cols, double target_block_sparsity,
                            bool pad = false);

// Kernel execution controls. col_tile limits how many output columns one
// inner pass touches (0 = full width); row_grain is the number of block-rows
// (or dense rows for dense_mm) per parallel work unit.
struct KernelConfig {
  std::size_t col_tile = 0;
  std::size_t row_grain = 1;
};

enum class KernelPath { reference, vectorized };

// True when the vectorized kernels can run on this CPU (AVX2 + FMA).
bool vectorized_path_available();

// vectorized when available, reference otherwise.
KernelPath default_kernel_path();

// Parallelism cap: hardware concurrency, clamped by the PSBR_THREADS
// environment variable when set.
unsigned thread_budget();

// Sparse a times dense b. Deterministic: block-rows iterate stored blocks in
// index order and each output row panel is owned by exactly one worker.
Matrix spmm(const BsrMatrix& a, const Matrix& b,
            KernelPath path = default_kernel_path(), const KernelConfig& cfg = {});

std::vector<double> spmv(const BsrMatrix& a, std::span<const double> x);

// Structure-oblivious baseline: the same multiply without skipping zeros.
Matrix dense_mm(const Matrix& a, const Matrix& b,
                KernelPath path = default_kernel_path(), const KernelConfig& cfg = {});

}  // namespace psbr::bsr
