#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "doctest.h"
#include "psbr/bench.hpp"
#include "psbr/bsr.hpp"
#include "psbr/container.hpp"
#include "psbr/optimizer.hpp"
#include "psbr/toy_models.hpp"

#ifndef PSBR_CLI_PATH
#error "PSBR_CLI_PATH must point at the built binary"
#endif

using namespace psbr;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

const std::string& work_dir() {
  static const std::string dir = [] {
    std::string tmpl = "/tmp/psbr_cli_XXXXXX";
    char* made = ::mkdtemp(tmpl.data());
    REQUIRE(made != nullptr);
    return std::string(made);
  }();
  return dir;
}

CmdResult run_cli(const std::string& args) {
  const std::string log = work_dir() + "/cli_out.txt";
  const std::string cmd = "cd " + work_dir() + " && " PSBR_CLI_PATH " " + args + " > " +
                          log + " 2>&1";
  const int status = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const std::string& name) {
  std::ifstream in(work_dir() + "/" + name, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string path_of(const std::string& name) { return work_dir() + "/" + name; }

double csv_final_nonzero_fraction(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line, last;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
    last = line;
  }
  REQUIRE(!last.empty());
  const auto pos = last.rfind(',');
  return std::stod(last.substr(pos + 1));
}

}  // namespace

TEST_CASE("train: final CSV nonzero_fraction matches the checkpoint report") {
  const auto r = run_cli("train --seed 11 --steps 150 --out t1.psbr");
  REQUIRE(r.exit_code == 0);

  const double csv_fraction = csv_final_nonzero_fraction(slurp("t1.psbr.csv"));
  const auto ckpt = container::load_checkpoint(path_of("t1.psbr"));
  const auto report = opt::sparsity_report(ckpt.params);
  CHECK(csv_fraction == doctest::Approx(report.nonzero_fraction).epsilon(1e-12));
  CHECK(ckpt.state.k == 150);
  CHECK(!ckpt.config_echo.empty());
  CHECK(ckpt.config_echo.find("seed = 11") != std::string::npos);
}

TEST_CASE("train: steps=0 is a usage error with exit 1") {
  const auto r = run_cli("train --steps 0 --out t_zero.psbr");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("steps") != std::string::npos);
}

TEST_CASE("train: same seed twice gives byte-identical CSVs") {
  REQUIRE(run_cli("train --seed 21 --steps 80 --out same_a.psbr").exit_code == 0);
  REQUIRE(run_cli("train --seed 21 --steps 80 --out same_b.psbr").exit_code == 0);
  CHECK(slurp("same_a.psbr.csv") == slurp("same_b.psbr.csv"));
}

TEST_CASE("train: divergence aborts with exit 2") {
  const auto r = run_cli("train --alpha 1e9 --prox-off --steps 40 --out div.psbr");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("diverged") != std::string::npos);
}

TEST_CASE("train: unwritable output path is exit 1") {
  const auto r = run_cli("train --steps 20 --out /nonexistent_dir/x.psbr");
  CHECK(r.exit_code == 1);
}

TEST_CASE("config file provides defaults, flags override") {
  {
    std::ofstream cfg(path_of("train.cfg"));
    cfg << "# resolved defaults\nseed = 31\nsteps = 60\n";
  }
  REQUIRE(run_cli("--config train.cfg train --out from_cfg.psbr").exit_code == 0);
  const auto a = container::load_checkpoint(path_of("from_cfg.psbr"));
  CHECK(a.state.k == 60);
  CHECK(a.config_echo.find("seed = 31") != std::string::npos);

  REQUIRE(run_cli("--config train.cfg train --steps 25 --out cfg_override.psbr")
              .exit_code == 0);
  CHECK(container::load_checkpoint(path_of("cfg_override.psbr")).state.k == 25);
}

TEST_CASE("export-bsr: round-trips weights exactly; bad divisibility fails") {
  REQUIRE(run_cli("train --seed 41 --steps 120 --out e1.psbr").exit_code == 0);
  const auto ckpt = container::load_checkpoint(path_of("e1.psbr"));

  REQUIRE(run_cli("export-bsr e1.psbr --block-shape 4x1 --out e1_w.psbr").exit_code == 0);
  const auto sections = container::load_container(path_of("e1_w.psbr"));
  const container::TensorSection* wsec = nullptr;
  for (const auto& s : sections)
    if (s.name == "w") wsec = &s;
  REQUIRE(wsec != nullptr);
  CHECK(container::section_to_dense(*wsec) == ckpt.params[0].value);

  // 3 does not divide 100 and --pad is absent.
  const auto bad = run_cli("export-bsr e1.psbr --block-shape 3x1 --out e1_bad.psbr");
  CHECK(bad.exit_code == 1);
  CHECK(bad.output.find("divisible") != std::string::npos);
  // With --pad it succeeds and still round-trips exactly.
  REQUIRE(run_cli("export-bsr e1.psbr --block-shape 3x1 --pad --out e1_pad.psbr")
              .exit_code == 0);
  const auto padded = container::load_container(path_of("e1_pad.psbr"));
  for (const auto& s : padded)
    if (s.name == "w") CHECK(container::section_to_dense(s) == ckpt.params[0].value);
}

TEST_CASE("export-bsr: zero tensor becomes a zero-block section") {
  opt::OptimizerConfig cfg;
  std::vector<opt::WeightTensor> params{{"w", Matrix(8, 4, 0.0)}};
  auto state = opt::init_state(params, cfg);
  container::save_checkpoint(path_of("zero.psbr"), {params, state, ""});

  REQUIRE(run_cli("export-bsr zero.psbr --block-shape 2x2 --out zero_w.psbr").exit_code ==
          0);
  const auto sections = container::load_container(path_of("zero_w.psbr"));
  for (const auto& s : sections) {
    if (s.name != "w") continue;
    CHECK(s.indices.empty());
    CHECK(s.data.empty());
    CHECK(container::section_to_dense(s) == Matrix(8, 4, 0.0));
  }
}

TEST_CASE("export-bsr: corrupt checkpoint is exit 1 with a diagnostic") {
  {
    std::ofstream junk(path_of("junk.psbr"), std::ios::binary);
    junk << "PSBRxxxxgarbage";
  }
  const auto r = run_cli("export-bsr junk.psbr --block-shape 1x1 --out j.psbr");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("error") != std::string::npos);
}

TEST_CASE("infer: identity weights reproduce the input; timing line present") {
  const std::size_t d = 32;
  Matrix eye(d, d);
  for (std::size_t i = 0; i < d; ++i) eye(i, i) = 1.0;
  container::save_container(path_of("eye.psbr"),
                            {container::to_section("w", bsr::dense_to_bsr(eye, 4, 4))});

  std::mt19937_64 rng(77);
  std::normal_distribution<float> g;
  Matrix x(d, 5);
  for (double& v : x.data) v = static_cast<double>(g(rng));
  container::save_container(path_of("x.psbr"), {container::to_section("x", x)});

  const auto r = run_cli("infer eye.psbr x.psbr --out y.psbr");
  REQUIRE(r.exit_code == 0);
  // "mean_ms / std_ms" over 5 runs.
  double mean = 0, stddev = 0;
  REQUIRE(std::sscanf(r.output.c_str(), "%lf / %lf", &mean, &stddev) == 2);
  CHECK(mean >= 0.0);
  CHECK(stddev >= 0.0);

  const auto sections = container::load_container(path_of("y.psbr"));
  const container::TensorSection* ysec = nullptr;
  for (const auto& s : sections)
    if (s.name == "y") ysec = &s;
  REQUIRE(ysec != nullptr);
  CHECK(container::section_to_dense(*ysec) == x);
}

TEST_CASE("infer: exported lasso weights on the serialized design matrix match the "
          "in-process forward pass") {
  REQUIRE(run_cli("train --seed 51 --steps 300 --out lasso.psbr").exit_code == 0);
  REQUIRE(run_cli("export-bsr lasso.psbr --block-shape 4x1 --out lasso_w.psbr")
              .exit_code == 0);

  // Serialize the fixture's design matrix (the same preset the CLI trains).
  const auto problem = toy::make_lasso(200, 100, 10, 0.01, 51);
  container::save_container(path_of("design.psbr"),
                            {container::to_section("a", bsr::dense_to_bsr(problem.a, 1, 1))});

  const auto r = run_cli("infer design.psbr lasso_w.psbr --out pred.psbr");
  REQUIRE(r.exit_code == 0);

  // In-process oracle on the identical float32-serialized operands.
  const auto ckpt = container::load_checkpoint(path_of("lasso.psbr"));
  Matrix a32 = problem.a;
  for (double& v : a32.data) v = static_cast<double>(static_cast<float>(v));
  const auto& w = ckpt.params[0].value;
  Matrix expect(a32.rows, 1);
  for (std::size_t i = 0; i < a32.rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a32.cols; ++j) acc += a32(i, j) * w(j, 0);
    expect(i, 0) = acc;
  }

  const auto sections = container::load_container(path_of("pred.psbr"));
  const container::TensorSection* ysec = nullptr;
  for (const auto& s : sections)
    if (s.name == "y") ysec = &s;
  REQUIRE(ysec != nullptr);
  const Matrix got = container::section_to_dense(*ysec);
  REQUIRE(got.rows == expect.rows);
  double max_err = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i)
    max_err = std::max(max_err, std::fabs(got.data[i] - expect.data[i]));
  CHECK(max_err < 1e-6);
}

TEST_CASE("infer: shape mismatch is exit 1") {
  Matrix w(4, 4, 1.0);
  container::save_container(path_of("w44.psbr"),
                            {container::to_section("w", bsr::dense_to_bsr(w, 2, 2))});
  container::save_container(path_of("x3.psbr"), {container::to_section("x", Matrix(3, 2, 1.0))});
  const auto r = run_cli("infer w44.psbr x3.psbr --out y_bad.psbr");
  CHECK(r.exit_code == 1);
}

TEST_CASE("bench-sweep: repeats=5 and one shape gives exactly 5 samples per cell") {
  const auto r = run_cli(
      "bench-sweep --dims 64 --batch 16 --block-shape 4x1 --repeats 5 --seed 3 "
      "--path reference --out mini");
  REQUIRE(r.exit_code == 0);

  const std::string csv = slurp("mini.csv");
  std::istringstream in(csv);
  std::string line;
  std::size_t aware_rows = 0, oblivious_rows = 0;
  bool saw_schema = false;
  while (std::getline(in, line)) {
    if (line == "# psbr.sweep.v1") saw_schema = true;
    if (line.rfind("4,1,reference,sparsity_aware", 0) == 0) ++aware_rows;
    if (line.rfind("4,1,reference,structure_oblivious", 0) == 0) ++oblivious_rows;
  }
  CHECK(saw_schema);
  CHECK(aware_rows == 5);
  CHECK(oblivious_rows == 5);

  const auto report = bench::sweep_report_from_json(slurp("mini.json"));
  REQUIRE(report.cells.size() == 2);
  for (const auto& cell : report.cells) CHECK(cell.samples_ms.size() == 5);
  CHECK(report.config.seed == 3);
}

TEST_CASE("bench-sweep: sparsity 0 degenerate point succeeds") {
  const auto r = run_cli(
      "bench-sweep --dims 64 --batch 16 --sparsity 0 --block-shape 2x1 --repeats 5 "
      "--path reference --out dense0");
  CHECK(r.exit_code == 0);
  const auto report = bench::sweep_report_from_json(slurp("dense0.json"));
  CHECK(report.config.sparsity == 0.0);
  CHECK(report.cells.size() == 2);
}

TEST_CASE("bench-sweep: repeats below 5 is a usage error") {
  const auto r = run_cli("bench-sweep --dims 64 --repeats 4 --block-shape 1x1 --out bad");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("repeats") != std::string::npos);
}

TEST_CASE("report: pretty-prints an existing sweep JSON") {
  REQUIRE(run_cli(
              "bench-sweep --dims 64 --batch 16 --block-shape 1x1 --repeats 5 "
              "--path reference --out rep")
              .exit_code == 0);
  const auto r = run_cli("report rep.json");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("psbr.sweep.v1") != std::string::npos);
  CHECK(r.output.find("sparsity_aware") != std::string::npos);

  const auto missing = run_cli("report nope.json");
  CHECK(missing.exit_code == 1);
}

TEST_CASE("usage errors exit 1, help exits 0") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("no-such-command").exit_code == 1);
  CHECK(run_cli("").exit_code == 1);  // a subcommand is required
  CHECK(run_cli("export-bsr").exit_code == 1);  // missing positional
}
