#include "psbr/bsr.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <thread>
#include <tuple>

namespace psbr::bsr {

void BsrMatrix::validate() const {
  if (block_rows < 1 || block_cols < 1)
    throw structural_error("bsr: block shape entries must be >= 1");
  const std::size_t gr = grid_rows();
  const std::size_t gc = grid_cols();
  if (indptr.size() != gr + 1) throw structural_error("bsr: indptr length mismatch");
  if (indptr.front() != 0) throw structural_error("bsr: indptr must start at 0");
  for (std::size_t i = 1; i < indptr.size(); ++i) {
    if (indptr[i] < indptr[i - 1]) throw structural_error("bsr: indptr must be non-decreasing");
  }
  if (indptr.back() != indices.size())
    throw structural_error("bsr: indptr end does not match stored block count");
  for (std::size_t i = 0; i < gr; ++i) {
    for (std::size_t k = indptr[i]; k < indptr[i + 1]; ++k) {
      if (indices[k] >= gc) throw structural_error("bsr: block column out of range");
      if (k > indptr[i] && indices[k] <= indices[k - 1])
        throw structural_error("bsr: block columns must be strictly ascending per row");
    }
  }
  if (data.size() != indices.size() * block_rows * block_cols)
    throw structural_error("bsr: data length does not match stored blocks");
}

namespace {

std::size_t checked_grid(std::size_t extent, std::size_t block, bool pad, const char* what) {
  if (block < 1) throw parameter_error(std::string("bsr: ") + what + " block must be >= 1");
  if (!pad && extent % block != 0)
    throw dimension_error(std::string("bsr: ") + what +
                          " not divisible by block shape (pass pad to round up)");
  return ceil_div(extent, block);
}

}  // namespace

BsrMatrix dense_to_bsr(const Matrix& dense, std::size_t block_rows,
                       std::size_t block_cols, double zero_tol, bool pad) {
  if (zero_tol < 0.0) throw parameter_error("bsr: zero_tol must be >= 0");
  const std::size_t gr = checked_grid(dense.rows, block_rows, pad, "rows");
  const std::size_t gc = checked_grid(dense.cols, block_cols, pad, "cols");

  BsrMatrix out;
  out.rows = dense.rows;
  out.cols = dense.cols;
  out.block_rows = block_rows;
  out.block_cols = block_cols;
  out.indptr.assign(gr + 1, 0);

  for (std::size_t bi = 0; bi < gr; ++bi) {
    const std::size_t row0 = bi * block_rows;
    const std::size_t row1 = std::min(row0 + block_rows, dense.rows);
    for (std::size_t bj = 0; bj < gc; ++bj) {
      const std::size_t col0 = bj * block_cols;
      const std::size_t col1 = std::min(col0 + block_cols, dense.cols);
      bool keep = false;
      for (std::size_t i = row0; i < row1 && !keep; ++i) {
        for (std::size_t j = col0; j < col1; ++j) {
          if (std::fabs(dense(i, j)) > zero_tol) {
            keep = true;
            break;
          }
        }
      }
      if (!keep) continue;
      out.indices.push_back(static_cast<std::uint32_t>(bj));
      const std::size_t base = out.data.size();
      out.data.resize(base + block_rows * block_cols, 0.0);
      for (std::size_t i = row0; i < row1; ++i) {
        for (std::size_t j = col0; j < col1; ++j) {
          out.data[base + (i - row0) * block_cols + (j - col0)] = dense(i, j);
        }
      }
    }
    out.indptr[bi + 1] = static_cast<std::uint32_t>(out.indices.size());
  }
  return out;
}

Matrix bsr_to_dense(const BsrMatrix& m) {
  m.validate();
  Matrix out(m.rows, m.cols, 0.0);
  for (std::size_t bi = 0; bi < m.grid_rows(); ++bi) {
    const std::size_t row0 = bi * m.block_rows;
    const std::size_t row1 = std::min(row0 + m.block_rows, m.rows);
    for (std::size_t k = m.indptr[bi]; k < m.indptr[bi + 1]; ++k) {
      const std::size_t col0 = m.indices[k] * m.block_cols;
      const std::size_t col1 = std::min(col0 + m.block_cols, m.cols);
      const double* block = m.data.data() + k * m.block_rows * m.block_cols;
      for (std::size_t i = row0; i < row1; ++i) {
        for (std::size_t j = col0; j < col1; ++j) {
          out(i, j) = block[(i - row0) * m.block_cols + (j - col0)];
        }
      }
    }
  }
  return out;
}

PruneResult prune_to_blocks(const Matrix& dense, std::size_t block_rows,
                            std::size_t block_cols, double target_block_sparsity,
                            bool pad) {
  if (target_block_sparsity < 0.0 || target_block_sparsity > 1.0)
    throw parameter_error("bsr: target block sparsity must lie in [0,1]");
  const std::size_t gr = checked_grid(dense.rows, block_rows, pad, "rows");
  const std::size_t gc = checked_grid(dense.cols, block_cols, pad, "cols");

  // (norm, block-row, block-col), sorted ascending so the smallest blocks go
  // first and ties resolve in grid order.
  std::vector<std::tuple<double, std::size_t, std::size_t>> order;
  order.reserve(gr * gc);
  for (std::size_t bi = 0; bi < gr; ++bi) {
    const std::size_t row1 = std::min((bi + 1) * block_rows, dense.rows);
    for (std::size_t bj = 0; bj < gc; ++bj) {
      const std::size_t col1 = std::min((bj + 1) * block_cols, dense.cols);
      double norm2 = 0.0;
      for (std::size_t i = bi * block_rows; i < row1; ++i) {
        for (std::size_t j = bj * block_cols; j < col1; ++j) {
          norm2 += dense(i, j) * dense(i, j);
        }
      }
      order.emplace_back(std::sqrt(norm2), bi, bj);
    }
  }
  std::sort(order.begin(), order.end());

  PruneResult out;
  out.pruned = dense;
  out.kept.assign(gr * gc, 1);
  const std::size_t drop =
      static_cast<std::size_t>(target_block_sparsity * static_cast<double>(gr * gc));
  for (std::size_t k = 0; k < drop; ++k) {
    const auto [norm, bi, bj] = order[k];
    out.kept[bi * gc + bj] = 0;
    const std::size_t row1 = std::min((bi + 1) * block_rows, dense.rows);
    const std::size_t col1 = std::min((bj + 1) * block_cols, dense.cols);
    for (std::size_t i = bi * block_rows; i < row1; ++i) {
      for (std::size_t j = bj * block_cols; j < col1; ++j) out.pruned(i, j) = 0.0;
    }
  }
  return out;
}

bool vectorized_path_available() {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

KernelPath default_kernel_path() {
  return vectorized_path_available() ? KernelPath::vectorized : KernelPath::reference;
}

unsigned thread_budget() {
  unsigned budget = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PSBR_THREADS")) {
    char* end = nullptr;
    const unsigned long parsed = std::strtoul(env, &end, 10);
    if (end != env && parsed >= 1)
      budget = std::min<unsigned long>(budget, parsed);
  }
  return budget;
}

namespace {

// Runs unit indices [0, units) across the thread budget; each unit is
// processed by exactly one worker, so writers never overlap.
template <class Fn>
void run_units(std::size_t units, const Fn& fn) {
  const unsigned budget =
      static_cast<unsigned>(std::min<std::size_t>(thread_budget(), units));
  if (budget <= 1) {
    for (std::size_t u = 0; u < units; ++u) fn(u);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(budget);
  for (unsigned t = 0; t < budget; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t u = t; u < units; u += budget) fn(u);
    });
  }
  for (auto& th : pool) th.join();
}

struct AxpyRef {
  void operator()(double* out, const double* in, double w, std::size_t n) const {
    for (std::size_t i = 0; i < n; ++i) out[i] += w * in[i];
  }
};

struct AxpyAvx2 {
  __attribute__((target("avx2,fma"))) void operator()(double* out, const double* in,
                                                      double w, std::size_t n) const {
    const __m256d vw = _mm256_set1_pd(w);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
      __m256d a = _mm256_fmadd_pd(vw, _mm256_loadu_pd(in + i), _mm256_loadu_pd(out + i));
      __m256d b =
          _mm256_fmadd_pd(vw, _mm256_loadu_pd(in + i + 4), _mm256_loadu_pd(out + i + 4));
      _mm256_storeu_pd(out + i, a);
      _mm256_storeu_pd(out + i + 4, b);
    }
    for (; i + 4 <= n; i += 4) {
      _mm256_storeu_pd(
          out + i, _mm256_fmadd_pd(vw, _mm256_loadu_pd(in + i), _mm256_loadu_pd(out + i)));
    }
    for (; i < n; ++i) out[i] += w * in[i];
  }
};

// One block-row range of the sparse multiply. Loop order keeps the output
// row panel hot while stored blocks stream by; the innermost axpy runs over
// a contiguous slice of b's row.
template <class Axpy>
void spmm_rows(const BsrMatrix& a, const Matrix& b, Matrix& out, std::size_t bi_begin,
               std::size_t bi_end, std::size_t tile, const Axpy& axpy) {
  for (std::size_t bi = bi_begin; bi < bi_end; ++bi) {
    const std::size_t row0 = bi * a.block_rows;
    const std::size_t row1 = std::min(row0 + a.block_rows, a.rows);
    for (std::size_t t0 = 0; t0 < b.cols; t0 += tile) {
      const std::size_t width = std::min(tile, b.cols - t0);
      for (std::size_t k = a.indptr[bi]; k < a.indptr[bi + 1]; ++k) {
        const std::size_t col0 = a.indices[k] * a.block_cols;
        const std::size_t col1 = std::min(col0 + a.block_cols, a.cols);
        const double* block = a.data.data() + k * a.block_rows * a.block_cols;
        for (std::size_t i = row0; i < row1; ++i) {
          double* out_row = out.row_ptr(i) + t0;
          const double* brow_block = block + (i - row0) * a.block_cols;
          for (std::size_t j = col0; j < col1; ++j) {
            axpy(out_row, b.row_ptr(j) + t0, brow_block[j - col0], width);
          }
        }
      }
    }
  }
}

template <class Axpy>
void dense_rows(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i_begin,
                std::size_t i_end, std::size_t tile, const Axpy& axpy) {
  for (std::size_t i = i_begin; i < i_end; ++i) {
    for (std::size_t t0 = 0; t0 < b.cols; t0 += tile) {
      const std::size_t width = std::min(tile, b.cols - t0);
      double* out_row = out.row_ptr(i) + t0;
      const double* a_row = a.row_ptr(i);
      for (std::size_t k = 0; k < a.cols; ++k) {
        axpy(out_row, b.row_ptr(k) + t0, a_row[k], width);
      }
    }
  }
}

// Whole-range wrappers: the vectorized ones carry the target attribute so
// the template body and the axpy inline into a single AVX2-compiled loop.
void spmm_range_ref(const BsrMatrix& a, const Matrix& b, Matrix& out,
                    std::size_t bi_begin, std::size_t bi_end, std::size_t tile) {
  spmm_rows(a, b, out, bi_begin, bi_end, tile, AxpyRef{});
}

__attribute__((target("avx2,fma"))) void spmm_range_vec(const BsrMatrix& a,
                                                        const Matrix& b, Matrix& out,
                                                        std::size_t bi_begin,
                                                        std::size_t bi_end,
                                                        std::size_t tile) {
  spmm_rows(a, b, out, bi_begin, bi_end, tile, AxpyAvx2{});
}

void dense_range_ref(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i_begin,
                     std::size_t i_end, std::size_t tile) {
  dense_rows(a, b, out, i_begin, i_end, tile, AxpyRef{});
}

__attribute__((target("avx2,fma"))) void dense_range_vec(const Matrix& a, const Matrix& b,
                                                         Matrix& out, std::size_t i_begin,
                                                         std::size_t i_end,
                                                         std::size_t tile) {
  dense_rows(a, b, out, i_begin, i_end, tile, AxpyAvx2{});
}

void check_path(KernelPath path) {
  if (path == KernelPath::vectorized && !vectorized_path_available())
    throw parameter_error("kernel: vectorized path not supported on this CPU");
}

}  // namespace

Matrix spmm(const BsrMatrix& a, const Matrix& b, KernelPath path,
            const KernelConfig& cfg) {
  if (a.cols != b.rows) throw dimension_error("spmm: a.cols must equal b.rows");
  check_path(path);

  Matrix out(a.rows, b.cols, 0.0);
  const std::size_t tile = cfg.col_tile ? cfg.col_tile : std::max<std::size_t>(b.cols, 1);
  const std::size_t grain = std::max<std::size_t>(cfg.row_grain, 1);
  const std::size_t units = ceil_div(std::max<std::size_t>(a.grid_rows(), 1), grain);

  auto unit = [&](std::size_t u) {
    const std::size_t bi_begin = u * grain;
    const std::size_t bi_end = std::min(bi_begin + grain, a.grid_rows());
    if (path == KernelPath::vectorized)
      spmm_range_vec(a, b, out, bi_begin, bi_end, tile);
    else
      spmm_range_ref(a, b, out, bi_begin, bi_end, tile);
  };
  run_units(units, unit);
  return out;
}

std::vector<double> spmv(const BsrMatrix& a, std::span<const double> x) {
  if (a.cols != x.size()) throw dimension_error("spmv: a.cols must equal len(x)");
  std::vector<double> y(a.rows, 0.0);
  for (std::size_t bi = 0; bi < a.grid_rows(); ++bi) {
    const std::size_t row0 = bi * a.block_rows;
    const std::size_t row1 = std::min(row0 + a.block_rows, a.rows);
    for (std::size_t k = a.indptr[bi]; k < a.indptr[bi + 1]; ++k) {
      const std::size_t col0 = a.indices[k] * a.block_cols;
      const std::size_t col1 = std::min(col0 + a.block_cols, a.cols);
      const double* block = a.data.data() + k * a.block_rows * a.block_cols;
      for (std::size_t i = row0; i < row1; ++i) {
        double acc = 0.0;
        for (std::size_t j = col0; j < col1; ++j) {
          acc += block[(i - row0) * a.block_cols + (j - col0)] * x[j];
        }
        y[i] += acc;
      }
    }
  }
  return y;
}

Matrix dense_mm(const Matrix& a, const Matrix& b, KernelPath path,
                const KernelConfig& cfg) {
  if (a.cols != b.rows) throw dimension_error("dense_mm: a.cols must equal b.rows");
  check_path(path);

  Matrix out(a.rows, b.cols, 0.0);
  const std::size_t tile = cfg.col_tile ? cfg.col_tile : std::max<std::size_t>(b.cols, 1);
  // row_grain counts dense rows here (block-rows in spmm).
  const std::size_t grain = std::max<std::size_t>(cfg.row_grain, 1);
  const std::size_t units = ceil_div(std::max<std::size_t>(a.rows, 1), grain);

  auto unit = [&](std::size_t u) {
    const std::size_t i_begin = u * grain;
    const std::size_t i_end = std::min(i_begin + grain, a.rows);
    if (path == KernelPath::vectorized)
      dense_range_vec(a, b, out, i_begin, i_end, tile);
    else
      dense_range_ref(a, b, out, i_begin, i_end, tile);
  };
  run_units(units, unit);
  return out;
}

}  // namespace psbr::bsr
