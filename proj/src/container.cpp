#include "psbr/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace psbr::container {

namespace {

constexpr char magic[4] = {'P', 'S', 'B', 'R'};
constexpr std::uint32_t max_name_len = 1u << 16;
constexpr std::uint64_t max_array_len = 1ull << 32;

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
      static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::ostream& out, float v) {
  static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

bool get_u64(std::istream& in, std::uint64_t& v) {
  std::uint32_t lo = 0, hi = 0;
  if (!get_u32(in, lo) || !get_u32(in, hi)) return false;
  v = static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32);
  return true;
}

[[noreturn]] void truncated(const std::string& what) {
  throw io_error("container: truncated file while reading " + what);
}

std::uint32_t need_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!get_u32(in, v)) truncated(what);
  return v;
}

std::uint64_t need_u64(std::istream& in, const std::string& what) {
  std::uint64_t v = 0;
  if (!get_u64(in, v)) truncated(what);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const std::string& what) {
  if (v > std::numeric_limits<std::uint32_t>::max())
    throw io_error("container: " + what + " does not fit the format's 32-bit field");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

TensorSection to_section(const std::string& name, const bsr::BsrMatrix& m) {
  m.validate();
  TensorSection s;
  s.name = name;
  s.rows = checked_u32(m.rows, "rows");
  s.cols = checked_u32(m.cols, "cols");
  s.block_rows = checked_u32(m.block_rows, "block_rows");
  s.block_cols = checked_u32(m.block_cols, "block_cols");
  s.indptr = m.indptr;
  s.indices = m.indices;
  s.data.reserve(m.data.size());
  for (double v : m.data) s.data.push_back(static_cast<float>(v));
  return s;
}

TensorSection to_section(const std::string& name, const Matrix& dense) {
  TensorSection s;
  s.name = name;
  s.rows = checked_u32(dense.rows, "rows");
  s.cols = checked_u32(dense.cols, "cols");
  s.block_rows = s.rows;
  s.block_cols = s.cols;
  s.indptr = {0, 1};
  s.indices = {0};
  s.data.reserve(dense.data.size());
  for (double v : dense.data) s.data.push_back(static_cast<float>(v));
  if (dense.size() == 0) {  // degenerate but representable: no stored block
    s.block_rows = std::max<std::uint32_t>(s.rows, 1);
    s.block_cols = std::max<std::uint32_t>(s.cols, 1);
    const std::size_t grid_rows = s.rows ? ceil_div(s.rows, s.block_rows) : 0;
    s.indptr.assign(grid_rows + 1, 0);
    s.indices.clear();
  }
  return s;
}

bsr::BsrMatrix section_to_bsr(const TensorSection& s) {
  bsr::BsrMatrix m;
  m.rows = s.rows;
  m.cols = s.cols;
  m.block_rows = s.block_rows;
  m.block_cols = s.block_cols;
  m.indptr = s.indptr;
  m.indices = s.indices;
  m.data.reserve(s.data.size());
  for (float v : s.data) m.data.push_back(static_cast<double>(v));
  try {
    m.validate();
  } catch (const structural_error& e) {
    throw io_error("container: section '" + s.name + "' is corrupt: " + e.what());
  }
  return m;
}

Matrix section_to_dense(const TensorSection& s) { return bsr_to_dense(section_to_bsr(s)); }

void write_container(std::ostream& out, const std::vector<TensorSection>& sections) {
  out.write(magic, 4);
  put_u32(out, format_version);
  for (const auto& s : sections) {
    put_u32(out, checked_u32(s.name.size(), "name length"));
    out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    put_u32(out, s.rows);
    put_u32(out, s.cols);
    put_u32(out, s.block_rows);
    put_u32(out, s.block_cols);
    put_u64(out, s.indptr.size());
    for (std::uint32_t v : s.indptr) put_u32(out, v);
    put_u64(out, s.indices.size());
    for (std::uint32_t v : s.indices) put_u32(out, v);
    put_u64(out, s.data.size());
    for (float v : s.data) put_f32(out, v);
  }
  if (!out) throw io_error("container: write failed");
}

std::vector<TensorSection> read_container(std::istream& in) {
  char got[4] = {};
  in.read(got, 4);
  if (in.gcount() != 4 || std::memcmp(got, magic, 4) != 0)
    throw io_error("container: bad magic bytes (not a PSBR file)");
  const std::uint32_t version = need_u32(in, "format version");
  if (version != format_version)
    throw io_error("container: unsupported format version " + std::to_string(version));

  std::vector<TensorSection> sections;
  for (;;) {
    if (in.peek() == std::char_traits<char>::eof()) break;  // clean section boundary
    std::uint32_t name_len = 0;
    if (!get_u32(in, name_len)) truncated("name length");
    if (name_len > max_name_len) throw io_error("container: unreasonable name length");
    TensorSection s;
    s.name.resize(name_len);
    in.read(s.name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len)) truncated("name");
    s.rows = need_u32(in, "rows");
    s.cols = need_u32(in, "cols");
    s.block_rows = need_u32(in, "block_rows");
    s.block_cols = need_u32(in, "block_cols");

    const std::uint64_t n_indptr = need_u64(in, "indptr length");
    if (n_indptr > max_array_len) throw io_error("container: unreasonable indptr length");
    s.indptr.resize(n_indptr);
    for (auto& v : s.indptr) v = need_u32(in, "indptr");

    const std::uint64_t n_indices = need_u64(in, "indices length");
    if (n_indices > max_array_len) throw io_error("container: unreasonable indices length");
    s.indices.resize(n_indices);
    for (auto& v : s.indices) v = need_u32(in, "indices");

    const std::uint64_t n_data = need_u64(in, "data length");
    if (n_data > max_array_len) throw io_error("container: unreasonable data length");
    s.data.resize(n_data);
    for (auto& v : s.data) v = std::bit_cast<float>(need_u32(in, "data"));

    sections.push_back(std::move(s));
  }
  return sections;
}

void save_container(const std::string& path, const std::vector<TensorSection>& sections) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("container: cannot open '" + path + "' for writing");
  write_container(out, sections);
  out.flush();
  if (!out) throw io_error("container: write to '" + path + "' failed");
}

std::vector<TensorSection> load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("container: cannot open '" + path + "'");
  return read_container(in);
}

namespace {

Matrix row_vector(const std::vector<double>& v) {
  Matrix m(v.empty() ? 0 : 1, v.size());
  m.data = v;
  return m;
}

const TensorSection& expect_section(const std::vector<TensorSection>& sections,
                                    std::size_t i, const std::string& name) {
  if (i >= sections.size())
    throw io_error("checkpoint: missing section '" + name + "'");
  if (sections[i].name != name)
    throw io_error("checkpoint: expected section '" + name + "', found '" +
                   sections[i].name + "'");
  return sections[i];
}

}  // namespace

TensorSection text_section(const std::string& name, const std::string& text) {
  TensorSection s;
  s.name = name;
  s.rows = 1;
  s.cols = checked_u32(text.size(), "text length");
  s.block_rows = 1;
  s.block_cols = std::max<std::uint32_t>(s.cols, 1);
  if (text.empty()) {
    s.indptr = {0, 0};
  } else {
    s.indptr = {0, 1};
    s.indices = {0};
    s.data.reserve(text.size());
    for (unsigned char c : text) s.data.push_back(static_cast<float>(c));
  }
  return s;
}

std::string section_text(const TensorSection& s) {
  std::string text;
  text.reserve(s.data.size());
  for (float v : s.data) {
    if (!(v >= 0.0f && v <= 255.0f) || v != static_cast<float>(static_cast<int>(v)))
      throw io_error("container: section '" + s.name + "' is not a text blob");
    text.push_back(static_cast<char>(static_cast<int>(v)));
  }
  return text;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  if (ckpt.state.tensors.size() != ckpt.params.size())
    throw parameter_error("checkpoint: state does not match the parameter list");

  std::vector<TensorSection> sections;
  if (!ckpt.config_echo.empty())
    sections.push_back(text_section("::config", ckpt.config_echo));
  sections.push_back(
      to_section("::step", row_vector({static_cast<double>(ckpt.state.k)})));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& p = ckpt.params[i];
    const auto& st = ckpt.state.tensors[i];
    if (p.name.find("::") != std::string::npos)
      throw parameter_error("checkpoint: tensor name '" + p.name +
                            "' uses the reserved \"::\" marker");
    Matrix m_mat(p.value.rows, p.value.cols), v_mat(p.value.rows, p.value.cols);
    m_mat.data = st.m;
    v_mat.data = st.v;
    sections.push_back(to_section(p.name, p.value));
    sections.push_back(to_section(p.name + "::m", m_mat));
    sections.push_back(to_section(p.name + "::v", v_mat));
    sections.push_back(to_section(p.name + "::gamma", row_vector(st.gamma.gamma)));
    sections.push_back(to_section(
        p.name + "::meta",
        row_vector({static_cast<double>(st.gamma.ell), st.shrunk ? 1.0 : 0.0})));
  }
  save_container(path, sections);
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto sections = load_container(path);
  Checkpoint ckpt;
  std::size_t first = 0;
  if (!sections.empty() && sections[0].name == "::config") {
    ckpt.config_echo = section_text(sections[0]);
    first = 1;
  }
  if (first >= sections.size() || sections[first].name != "::step")
    throw io_error("checkpoint: missing '::step' section");
  if ((sections.size() - first - 1) % 5 != 0)
    throw io_error("checkpoint: malformed section grouping");

  const auto step_vals = section_to_dense(sections[first]);
  if (step_vals.size() != 1) throw io_error("checkpoint: malformed '::step' section");
  ckpt.state.k = static_cast<std::uint64_t>(step_vals.data[0]);

  for (std::size_t i = first + 1; i < sections.size(); i += 5) {
    const auto& head = sections[i];
    if (head.name.find("::") != std::string::npos)
      throw io_error("checkpoint: unexpected state section '" + head.name + "'");
    opt::WeightTensor p;
    p.name = head.name;
    p.value = section_to_dense(head);

    opt::TensorState st;
    st.m = section_to_dense(expect_section(sections, i + 1, head.name + "::m")).data;
    st.v = section_to_dense(expect_section(sections, i + 2, head.name + "::v")).data;
    st.gamma.gamma =
        section_to_dense(expect_section(sections, i + 3, head.name + "::gamma")).data;
    const auto meta =
        section_to_dense(expect_section(sections, i + 4, head.name + "::meta"));
    if (meta.size() != 2) throw io_error("checkpoint: malformed meta section");
    st.gamma.ell = static_cast<int>(meta.data[0]);
    st.shrunk = meta.data[1] != 0.0;
    if (st.m.size() != p.value.size() || st.v.size() != p.value.size())
      throw io_error("checkpoint: moment shape mismatch for '" + p.name + "'");

    ckpt.params.push_back(std::move(p));
    ckpt.state.tensors.push_back(std::move(st));
  }
  return ckpt;
}

}  // namespace psbr::container
