#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "psbr/bsr.hpp"

using psbr::Matrix;
using namespace psbr::bsr;

namespace {

Matrix random_block_sparse(std::size_t rows, std::size_t cols, std::size_t br,
                           std::size_t bc, double block_sparsity, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (auto& v : m.data) v = nd(rng);
  if (block_sparsity > 0.0) {
    auto pruned = prune_to_blocks(m, br, bc, block_sparsity, true);
    return pruned.pruned;
  }
  return m;
}

double rel_frobenius(const Matrix& got, const Matrix& want) {
  REQUIRE(got.same_shape(want));
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double d = got.data[i] - want.data[i];
    num += d * d;
    den += want.data[i] * want.data[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace

TEST_CASE("identity converts to diagonal blocks") {
  Matrix eye(4, 4, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
  auto b = dense_to_bsr(eye, 2, 2);
  CHECK(b.stored_blocks() == 2);
  CHECK(b.indptr == std::vector<std::uint32_t>{0, 1, 2});
  CHECK(b.indices == std::vector<std::uint32_t>{0, 1});
  CHECK(b.data == std::vector<double>{1, 0, 0, 1, 1, 0, 0, 1});
}

TEST_CASE("all-zero matrix stores nothing") {
  Matrix z(6, 4, 0.0);
  auto b = dense_to_bsr(z, 2, 2);
  CHECK(b.stored_blocks() == 0);
  CHECK(b.indptr == std::vector<std::uint32_t>{0, 0, 0, 0});
  auto back = bsr_to_dense(b);
  CHECK(back == z);
}

TEST_CASE("round-trips are bit-exact across sparsities") {
  for (double sparsity : {0.0, 0.5, 0.9, 1.0}) {
    auto m = random_block_sparse(64, 64, 32, 1, sparsity, 42);
    auto b = dense_to_bsr(m, 32, 1);
    CHECK(bsr_to_dense(b) == m);
  }
}

TEST_CASE("padded round-trip preserves non-divisible shapes") {
  auto m = random_block_sparse(50, 30, 1, 1, 0.0, 7);
  CHECK_THROWS_AS(dense_to_bsr(m, 16, 4), psbr::dimension_error);
  auto b = dense_to_bsr(m, 16, 4, 0.0, true);
  CHECK(b.rows == 50);
  CHECK(b.cols == 30);
  CHECK(b.grid_rows() == 4);
  CHECK(b.grid_cols() == 8);
  CHECK(bsr_to_dense(b) == m);
}

TEST_CASE("conversion is structurally deterministic") {
  auto m = random_block_sparse(48, 48, 4, 1, 0.7, 99);
  auto b1 = dense_to_bsr(m, 4, 1);
  auto b2 = dense_to_bsr(m, 4, 1);
  CHECK(b1.indptr == b2.indptr);
  CHECK(b1.indices == b2.indices);
  CHECK(b1.data == b2.data);
}

TEST_CASE("zero tolerance keeps sub-threshold values inside stored blocks") {
  Matrix m(2, 2, 0.0);
  m(0, 0) = 1.0;
  m(0, 1) = 1e-8;  // same 1x2 block as the 1.0: stored verbatim
  m(1, 0) = 1e-8;  // alone in its block: dropped at tol 1e-6
  auto b = dense_to_bsr(m, 1, 2, 1e-6);
  CHECK(b.stored_blocks() == 1);
  auto back = bsr_to_dense(b);
  CHECK(back(0, 0) == 1.0);
  CHECK(back(0, 1) == 1e-8);
  CHECK(back(1, 0) == 0.0);
}

TEST_CASE("validate rejects malformed structures") {
  auto m = random_block_sparse(8, 8, 2, 2, 0.5, 5);
  auto good = dense_to_bsr(m, 2, 2);
  CHECK_NOTHROW(good.validate());

  auto bad = good;
  bad.indptr.pop_back();
  CHECK_THROWS_AS(bad.validate(), psbr::structural_error);

  bad = good;
  std::size_t wide_row = good.grid_rows();
  for (std::size_t i = 0; i < good.grid_rows(); ++i) {
    if (good.indptr[i + 1] - good.indptr[i] >= 2) {
      wide_row = i;
      break;
    }
  }
  REQUIRE(wide_row < good.grid_rows());  // some block-row holds two blocks
  std::swap(bad.indices[bad.indptr[wide_row]], bad.indices[bad.indptr[wide_row] + 1]);
  CHECK_THROWS_AS(bad.validate(), psbr::structural_error);

  bad = good;
  bad.indices.back() = 100;
  CHECK_THROWS_AS(bad.validate(), psbr::structural_error);

  bad = good;
  bad.data.pop_back();
  CHECK_THROWS_AS(bad.validate(), psbr::structural_error);

  bad = good;
  bad.indptr[1] = 200;
  CHECK_THROWS_AS(bad.validate(), psbr::structural_error);
}

TEST_CASE("pruning endpoints") {
  auto m = random_block_sparse(16, 16, 1, 1, 0.0, 3);
  auto keep_all = prune_to_blocks(m, 2, 1, 0.0);
  CHECK(keep_all.pruned == m);
  for (auto k : keep_all.kept) CHECK(k == 1);

  auto drop_all = prune_to_blocks(m, 2, 1, 1.0);
  for (double v : drop_all.pruned.data) CHECK(v == 0.0);
  for (auto k : drop_all.kept) CHECK(k == 0);
}

TEST_CASE("pruning matches a brute-force norm sort") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t rows = 8 + 8 * (rep % 8);
    Matrix m(rows, 64);
    for (auto& v : m.data) v = nd(rng);
    const double target = 0.5;
    auto res = prune_to_blocks(m, 2, 1, target);

    // independent recomputation: all block norms, sorted with the tie-break
    const std::size_t gr = rows / 2, gc = 64;
    std::vector<std::tuple<double, std::size_t, std::size_t>> norms;
    for (std::size_t bi = 0; bi < gr; ++bi) {
      for (std::size_t bj = 0; bj < gc; ++bj) {
        const double a = m(bi * 2, bj), b = m(bi * 2 + 1, bj);
        norms.emplace_back(std::sqrt(a * a + b * b), bi, bj);
      }
    }
    std::sort(norms.begin(), norms.end());
    const std::size_t drop = static_cast<std::size_t>(target * static_cast<double>(gr * gc));
    std::vector<std::uint8_t> want(gr * gc, 1);
    for (std::size_t k = 0; k < drop; ++k)
      want[std::get<1>(norms[k]) * gc + std::get<2>(norms[k])] = 0;
    CHECK(res.kept == want);

    // surviving entries unchanged, dropped blocks zero
    for (std::size_t bi = 0; bi < gr; ++bi) {
      for (std::size_t bj = 0; bj < gc; ++bj) {
        for (std::size_t r = 0; r < 2; ++r) {
          const double got = res.pruned(bi * 2 + r, bj);
          CHECK(got == (want[bi * gc + bj] ? m(bi * 2 + r, bj) : 0.0));
        }
      }
    }
  }
}

TEST_CASE("pruning tie-break zeroes earlier grid positions first") {
  Matrix m(4, 1, 1.0);  // four 1x1 blocks with identical norms
  auto res = prune_to_blocks(m, 1, 1, 0.5);
  CHECK(res.kept == std::vector<std::uint8_t>{0, 0, 1, 1});
}

TEST_CASE("spmm identity and empty") {
  Matrix eye(8, 8, 0.0);
  for (std::size_t i = 0; i < 8; ++i) eye(i, i) = 1.0;
  auto b_eye = dense_to_bsr(eye, 2, 2);
  auto x = random_block_sparse(8, 5, 1, 1, 0.0, 21);
  for (auto path : {KernelPath::reference, KernelPath::vectorized}) {
    if (path == KernelPath::vectorized && !vectorized_path_available()) continue;
    auto y = spmm(b_eye, x, path);
    CHECK(rel_frobenius(y, x) == 0.0);
  }

  Matrix zero(8, 8, 0.0);
  auto b_zero = dense_to_bsr(zero, 2, 2);
  auto y0 = spmm(b_zero, x, KernelPath::reference);
  for (double v : y0.data) CHECK(v == 0.0);
}

TEST_CASE("spmm matches the naive oracle across shapes and sparsities") {
  std::uint64_t seed = 1000;
  for (double sparsity : {0.0, 0.5, 0.9}) {
    for (std::size_t n : {std::size_t{1}, std::size_t{2}, std::size_t{4}, std::size_t{32},
                          std::size_t{64}, std::size_t{256}}) {
      const std::size_t dim = 64;
      auto dense = random_block_sparse(dim, dim, n, 1, sparsity, seed++);
      auto a = dense_to_bsr(dense, n, 1, 0.0, true);
      auto b = random_block_sparse(dim, 16, 1, 1, 0.0, seed++);
      auto want = oracle::naive_matmul(dense, b);

      auto ref = spmm(a, b, KernelPath::reference);
      CHECK(rel_frobenius(ref, want) < 1e-12);
      if (vectorized_path_available()) {
        auto vec = spmm(a, b, KernelPath::vectorized);
        CHECK(rel_frobenius(vec, want) < 1e-5);
      }
    }
  }
}

TEST_CASE("kernel config variations do not change results") {
  auto dense = random_block_sparse(96, 96, 4, 1, 0.6, 500);
  auto a = dense_to_bsr(dense, 4, 1);
  auto b = random_block_sparse(96, 33, 1, 1, 0.0, 501);
  auto want = oracle::naive_matmul(dense, b);

  for (std::size_t tile : {std::size_t{0}, std::size_t{7}, std::size_t{16}, std::size_t{64}}) {
    for (std::size_t grain : {std::size_t{1}, std::size_t{3}, std::size_t{100}}) {
      KernelConfig cfg{tile, grain};
      auto got = spmm(a, b, KernelPath::reference, cfg);
      CHECK(rel_frobenius(got, want) < 1e-12);
      if (vectorized_path_available()) {
        auto gv = spmm(a, b, KernelPath::vectorized, cfg);
        CHECK(rel_frobenius(gv, want) < 1e-12);
      }
    }
  }
}

TEST_CASE("spmv agrees with spmm and the naive matvec") {
  auto dense = random_block_sparse(64, 48, 8, 1, 0.5, 321);
  auto a = dense_to_bsr(dense, 8, 1, 0.0, true);
  std::vector<double> x(48);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : x) v = nd(rng);

  auto y = spmv(a, x);
  auto want = oracle::naive_matvec(dense, x);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y[i] == doctest::Approx(want[i]).epsilon(1e-12));

  Matrix xcol(48, 1);
  xcol.data = x;
  auto via_spmm = spmm(a, xcol, KernelPath::reference);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y[i] == doctest::Approx(via_spmm(i, 0)).epsilon(1e-12));
}

TEST_CASE("dense_mm matches the naive oracle on both paths") {
  auto a = random_block_sparse(40, 56, 1, 1, 0.0, 600);
  auto b = random_block_sparse(56, 24, 1, 1, 0.0, 601);
  auto want = oracle::naive_matmul(a, b);
  auto ref = dense_mm(a, b, KernelPath::reference);
  CHECK(rel_frobenius(ref, want) < 1e-12);
  if (vectorized_path_available()) {
    auto vec = dense_mm(a, b, KernelPath::vectorized, KernelConfig{16, 4});
    CHECK(rel_frobenius(vec, want) < 1e-12);
  }
}

TEST_CASE("shape mismatches are rejected") {
  auto dense = random_block_sparse(16, 16, 2, 1, 0.0, 71);
  auto a = dense_to_bsr(dense, 2, 1);
  Matrix wrong(8, 4, 1.0);
  CHECK_THROWS_AS(spmm(a, wrong), psbr::dimension_error);
  std::vector<double> xw(8, 1.0);
  CHECK_THROWS_AS(spmv(a, xw), psbr::dimension_error);
  CHECK_THROWS_AS(dense_mm(dense, wrong), psbr::dimension_error);
}

TEST_CASE("thread budget respects the environment cap") {
  ::setenv("PSBR_THREADS", "1", 1);
  CHECK(thread_budget() == 1);
  ::unsetenv("PSBR_THREADS");
  CHECK(thread_budget() >= 1);

  // results identical under any budget
  auto dense = random_block_sparse(64, 64, 4, 1, 0.5, 808);
  auto a = dense_to_bsr(dense, 4, 1);
  auto b = random_block_sparse(64, 16, 1, 1, 0.0, 809);
  auto multi = spmm(a, b, KernelPath::reference);
  ::setenv("PSBR_THREADS", "1", 1);
  auto single = spmm(a, b, KernelPath::reference);
  ::unsetenv("PSBR_THREADS");
  CHECK(multi == single);
}

TEST_CASE("sparse execution beats the oblivious kernel at high sparsity") {
  // Coarse ordering check at a reduced size; the full-size ordering is part
  // of the benchmark suite.
  const std::size_t dim = 512, batch = 64;
  auto dense = random_block_sparse(dim, dim, 32, 1, 0.9, 900);
  auto a = dense_to_bsr(dense, 32, 1);
  auto b = random_block_sparse(dim, batch, 1, 1, 0.0, 901);

  auto time_ms = [](auto&& fn) {
    double best = 1e300;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
  };

  volatile double sink = 0.0;
  const double t_sparse = time_ms([&] {
    auto y = spmm(a, b, KernelPath::reference);
    sink = sink + y.data[0];
  });
  const double t_dense = time_ms([&] {
    auto y = dense_mm(dense, b, KernelPath::reference);
    sink = sink + y.data[0];
  });
  CHECK(t_sparse < t_dense);
}
