#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace psbr {

// Error taxonomy shared by all modules.
class dimension_error : public std::runtime_error {
 public:
  explicit dimension_error(const std::string& what) : std::runtime_error(what) {}
};

class parameter_error : public std::invalid_argument {
 public:
  explicit parameter_error(const std::string& what) : std::invalid_argument(what) {}
};

class structural_error : public std::runtime_error {
 public:
  explicit structural_error(const std::string& what) : std::runtime_error(what) {}
};

class divergence_error : public std::runtime_error {
 public:
  explicit divergence_error(const std::string& what) : std::runtime_error(what) {}
};

class convergence_error : public std::runtime_error {
 public:
  explicit convergence_error(const std::string& what) : std::runtime_error(what) {}
};

class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

// Row-major dense matrix of doubles. Column vectors are d x 1.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row_ptr(std::size_t i) { return data.data() + i * cols; }
  const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Matrix& o) const = default;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// FNV-1a over little-endian canonical bytes. Stable across platforms; used
// for structure keys and per-cell seed derivation.
struct Fnv1a {
  std::uint64_t state = 0xcbf29ce484222325ull;

  void update_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      state ^= b[i];
      state *= 0x100000001b3ull;
    }
  }

  void update_u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    update_bytes(b, 8);
  }

  void update_u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    update_bytes(b, 4);
  }

  std::uint64_t digest() const { return state; }
};

inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> parts) {
  Fnv1a h;
  h.update_u64(master);
  for (std::uint64_t p : parts) h.update_u64(p);
  return h.digest();
}

}  // namespace psbr
