#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "psbr/bsr.hpp"
#include "psbr/common.hpp"
#include "psbr/optimizer.hpp"

// One binary container codec for checkpoints and exported block-sparse
// weights. Layout, all little-endian:
//   magic "PSBR" | version u32
//   per tensor section (repeated to end of file):
//     name_len u32 | name bytes (UTF-8)
//     rows u32 | cols u32 | block_rows u32 | block_cols u32
//     indptr_len u64 | indptr u32[] | indices_len u64 | indices u32[]
//     data_len u64 | data f32[]
// Values are float32 on disk, double in memory. A dense tensor is one block
// with block_rows = rows, block_cols = cols.

namespace psbr::container {

inline constexpr std::uint32_t format_version = 1;

struct TensorSection {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::uint32_t block_rows = 1;
  std::uint32_t block_cols = 1;
  std::vector<std::uint32_t> indptr;
  std::vector<std::uint32_t> indices;
  std::vector<float> data;
};

TensorSection to_section(const std::string& name, const bsr::BsrMatrix& m);
TensorSection to_section(const std::string& name, const Matrix& dense);
bsr::BsrMatrix section_to_bsr(const TensorSection& s);   // validates structure
Matrix section_to_dense(const TensorSection& s);

void write_container(std::ostream& out, const std::vector<TensorSection>& sections);
std::vector<TensorSection> read_container(std::istream& in);  // throws io_error

void save_container(const std::string& path, const std::vector<TensorSection>& sections);
std::vector<TensorSection> load_container(const std::string& path);

// A checkpoint is weights plus optimizer state in a single container. State
// sections use a reserved "::" marker in their names ("w::m", "w::v",
// "w::gamma", "w::meta" holding [ell, shrunk], global "::step"), so tensor
// names themselves must not contain "::".
struct Checkpoint {
  std::vector<opt::WeightTensor> params;
  opt::OptimizerState state;
  // Optional provenance text (the producing run's resolved configuration);
  // stored as a leading "::config" section, byte-preserved.
  std::string config_echo;
};

// Text blob <-> section helpers (bytes stored as float values 0..255).
TensorSection text_section(const std::string& name, const std::string& text);
std::string section_text(const TensorSection& s);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);  // throws io_error

}  // namespace psbr::container
