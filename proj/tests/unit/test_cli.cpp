// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cli.hpp"
#include "doctest.h"
#include "flow4d/autoenc.hpp"
#include "flow4d/cardiacflow.hpp"
#include "flow4d/completion.hpp"
#include "flow4d/grid.hpp"
#include "flow4d/phantom.hpp"

using namespace flow4d;
namespace fs = std::filesystem;

namespace {

struct Captured {
  int code = 0;
  std::string out;
  std::string err;
};

Captured run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Captured c;
  c.code = cli::run(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  c.out = out.str();
  c.err = err.str();
  return c;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("flow4d_cli_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  std::string operator/(const std::string& leaf) const { return (path_ / leaf).string(); }

 private:
  fs::path path_;
};

// Decodes a binary PPM into (width, height, pixel bytes).
std::tuple<int, int, std::string> parse_ppm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  is.get();
  std::string pixels(std::istreambuf_iterator<char>(is), {});
  REQUIRE(magic == "P6");
  REQUIRE(maxv == 255);
  return {w, h, pixels};
}

std::set<std::tuple<int, int, int>> colors(const std::string& pixels) {
  std::set<std::tuple<int, int, int>> out;
  for (std::size_t i = 0; i + 2 < pixels.size(); i += 3) {
    out.insert({static_cast<unsigned char>(pixels[i]), static_cast<unsigned char>(pixels[i + 1]),
                static_cast<unsigned char>(pixels[i + 2])});
  }
  return out;
}

}  // namespace

TEST_CASE("help lists every command and exits 0") {
  const auto c = run_cli({"--help"});
  CHECK(c.code == 0);
  for (const char* cmd : {"phantom gen", "phantom slices", "train ae", "train lrf", "train cardiacflow",
                          "train completion", "generate lrf", "generate cardiacflow", "complete", "eval",
                          "ablate cardiacflow", "render"}) {
    CHECK_MESSAGE(c.out.find(cmd) != std::string::npos, cmd);
  }
}

TEST_CASE("training commands default to their library schedules") {
  const auto default_of = [](const std::vector<std::string>& args, const std::string& flag) {
    const auto help = run_cli(args).out;
    const auto at = help.find(flag + " ");
    REQUIRE(at != std::string::npos);
    const auto open = help.find('[', at);
    return help.substr(open + 1, help.find(']', open) - open - 1);
  };
  const cardiacflow::CardiacTrainConfig cardiac;
  CHECK(default_of({"train", "cardiacflow", "--help"}, "--epochs") == std::to_string(cardiac.epochs));
  CHECK(default_of({"train", "cardiacflow", "--help"}, "--batch-size") == std::to_string(cardiac.batch_size));
  const completion::CompletionTrainConfig comp;
  CHECK(default_of({"train", "completion", "--help"}, "--epochs") == std::to_string(comp.epochs));
  CHECK(default_of({"train", "completion", "--help"}, "--latent-dim") ==
        std::to_string(completion::default_spec(Dims{}).latent_dim));
  const autoenc::TrainConfig ae;
  CHECK(default_of({"train", "ae", "--help"}, "--epochs") == std::to_string(ae.epochs));
  CHECK(default_of({"generate", "cardiacflow", "--help"}, "--steps") == "1");
}

TEST_CASE("errors are single-line diagnostics with distinct exit codes") {
  TempDir tmp("errors");
  auto c = run_cli({"phantom", "gen", "--bogus", "1", "--out", tmp / "d"});
  CHECK(c.code == 2);
  CHECK(c.err.rfind("flow4d: error:", 0) == 0);
  CHECK(c.err.find('\n') == c.err.size() - 1);

  c = run_cli({"eval", "--pred", tmp / "missing", "--ref", tmp / "missing", "--out", tmp / "r.csv"});
  CHECK(c.code == 1);
  CHECK(c.err.find("missing") != std::string::npos);

  std::ofstream(tmp / "bad.json") << "{\"command\": \"phantom gen\", \"flow4d_config\": 99}";
  c = run_cli({"--config", tmp / "bad.json"});
  CHECK(c.code == 1);
  CHECK(c.err.find("version") != std::string::npos);

  std::ofstream(tmp / "bad.ckpt") << "F4DC garbage";
  c = run_cli({"render", "--input", tmp / "bad.ckpt", "--out", tmp / "r"});
  CHECK(c.code == 1);
}

TEST_CASE("eval rejects mismatched grid dims and names both") {
  TempDir tmp("eval_dims");
  fs::create_directories(tmp / "pred");
  fs::create_directories(tmp / "ref");
  save_grid(tmp / "pred/a.grid", LabelGrid(Dims{8, 8, 8}));
  save_grid(tmp / "ref/a.grid", LabelGrid(Dims{8, 8, 10}));
  const auto c = run_cli({"eval", "--pred", tmp / "pred", "--ref", tmp / "ref", "--out", tmp / "r.csv"});
  CHECK(c.code != 0);
  CHECK(c.err.find(Dims{8, 8, 8}.str()) != std::string::npos);
  CHECK(c.err.find(Dims{8, 8, 10}.str()) != std::string::npos);
  CHECK_FALSE(fs::exists(tmp / "r.csv"));
}

TEST_CASE("eval report rows") {
  TempDir tmp("eval_rows");
  fs::create_directories(tmp / "pred");
  const auto s = phantom::render_sequence(phantom::canonical_subject(), 4, Dims{16, 16, 20});
  save_sequence(tmp / "pred/a.seq", s);
  save_sequence(tmp / "pred/b.seq", s);
  const auto c = run_cli({"eval", "--pred", tmp / "pred", "--ref", tmp / "pred", "--out", tmp / "r.csv"});
  REQUIRE(c.code == 0);
  std::istringstream is(read_bytes(tmp / "r.csv"));
  std::string line;
  std::getline(is, line);
  CHECK(line == "subject_id,frame,class,metric,value");
  int dsc = 0, hd = 0, cyc = 0, fid = 0;
  while (std::getline(is, line)) {
    if (line.find(",dsc,") != std::string::npos) {
      ++dsc;
      CHECK(line.substr(line.rfind(',') + 1) == "1");
    }
    if (line.find(",hd95,") != std::string::npos) ++hd;
    if (line.find(",cycledsc,") != std::string::npos) ++cyc;
    if (line.find(",vfid,") != std::string::npos) ++fid;
  }
  CHECK(dsc == 2 * 4 * 5);
  CHECK(hd == 2 * 4 * 5);
  CHECK(cyc == 2);
  CHECK(fid == 1);
}

TEST_CASE("render: palette, determinism, bounds") {
  TempDir tmp("render");
  save_grid(tmp / "empty.grid", LabelGrid(Dims{6, 5, 4}));
  REQUIRE(run_cli({"render", "--input", tmp / "empty.grid", "--out", tmp / "r1", "--scale", "2"}).code == 0);
  const auto files = [&](const std::string& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".ppm") out.push_back(e.path());
    }
    return out;
  };
  auto ppm = files(tmp / "r1");
  REQUIRE(ppm.size() == 1);
  auto [w, h, pixels] = parse_ppm(read_bytes(ppm.front()));
  CHECK(w == 12);
  CHECK(h == 10);
  CHECK(colors(pixels) == std::set<std::tuple<int, int, int>>{{0, 0, 0}});

  save_sequence(tmp / "heart.seq", phantom::render_sequence(phantom::canonical_subject(), 4));
  REQUIRE(run_cli({"render", "--input", tmp / "heart.seq", "--out", tmp / "a"}).code == 0);
  REQUIRE(run_cli({"render", "--input", tmp / "heart.seq", "--out", tmp / "b"}).code == 0);
  const auto a = files(tmp / "a");
  const auto b = files(tmp / "b");
  REQUIRE(a.size() == 1);
  REQUIRE(b.size() == 1);
  CHECK(read_bytes(a.front()) == read_bytes(b.front()));
  const auto [wa, ha, pa] = parse_ppm(read_bytes(a.front()));
  CHECK(colors(pa).size() >= 3);

  const auto c = run_cli({"render", "--input", tmp / "heart.seq", "--out", tmp / "c", "--view", "lax2ch",
                          "--index", "32"});
  CHECK(c.code != 0);
  CHECK(c.err.find("outside") != std::string::npos);
}

TEST_CASE("rerunning from the resolved config reproduces outputs bit-exactly") {
  TempDir tmp("config");
  REQUIRE(run_cli({"phantom", "gen", "--subjects", "2", "--frames", "3", "--dims", "16,16,20", "--out", tmp / "d"})
              .code == 0);
  REQUIRE(run_cli({"train", "ae", "--data", tmp / "d", "--epochs", "2", "--latent-dim", "4", "--encoder-hidden",
                   "16", "--decoder-hidden", "16", "--seed", "3", "--out", tmp / "ae.ckpt"})
              .code == 0);
  REQUIRE(fs::exists(tmp / "ae.ckpt.config.json"));
  REQUIRE(run_cli({"--config", tmp / "ae.ckpt.config.json", "--out", tmp / "ae2.ckpt"}).code == 0);
  CHECK(read_bytes(tmp / "ae.ckpt") == read_bytes(tmp / "ae2.ckpt"));

  REQUIRE(run_cli({"--config", tmp / "ae.ckpt.config.json", "--seed", "4", "--out", tmp / "ae3.ckpt"}).code == 0);
  CHECK(read_bytes(tmp / "ae.ckpt") != read_bytes(tmp / "ae3.ckpt"));

  REQUIRE(run_cli({"phantom", "slices", "--data", tmp / "d", "--out", tmp / "s1"}).code == 0);
  REQUIRE(run_cli({"--config", tmp / "s1/config.json", "--out", tmp / "s2"}).code == 0);
  CHECK(read_bytes(tmp / "s1/subject_0001/frame_003.slices") ==
        read_bytes(tmp / "s2/subject_0001/frame_003.slices"));
}

TEST_CASE("threads do not change generated artifacts") {
  TempDir tmp("threads");
  REQUIRE(run_cli({"phantom", "gen", "--subjects", "3", "--frames", "2", "--dims", "16,16,20", "--out", tmp / "a"})
              .code == 0);
  REQUIRE(run_cli({"--threads", "3", "phantom", "gen", "--subjects", "3", "--frames", "2", "--dims", "16,16,20",
                   "--out", tmp / "b"})
              .code == 0);
  for (const char* f : {"subject_0000.seq", "subject_0001.seq", "subject_0002.seq"}) {
    CHECK(read_bytes(fs::path(tmp / "a") / f) == read_bytes(fs::path(tmp / "b") / f));
  }
}
