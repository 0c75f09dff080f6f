#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

#include "commands.hpp"
#include "csnet/error.hpp"
#include "support.hpp"

using namespace csnet;
using namespace csnet::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("csnet_cli_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig small_config(std::uint64_t seed) {
  RunConfig c = profile_defaults("desk");
  c.seed = seed;
  c.dataset.fixed_slices = 6;
  c.dataset.slice_span = {2, 3};
  c.finalize();
  return c;
}

}  // namespace

TEST_CASE("unknown config keys are rejected") {
  CHECK_THROWS_AS(parse_run_config(R"({"sed": 1})"), UsageError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"learning_rate": 1}})"), UsageError);
  CHECK_THROWS_AS(parse_run_config(R"({"graph": {"fov_margins": {"top": 1}}})"), UsageError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"lr": "fast"}})"), UsageError);
  CHECK_THROWS_AS(parse_run_config(R"({"profile": "laptop"})"), UsageError);
  CHECK_THROWS_AS(parse_run_config("{"), UsageError);
}

TEST_CASE("profiles and overrides") {
  auto full = parse_run_config("{}");
  CHECK(full.graph.patch_size_px == 64);
  CHECK(full.model.patch_size_px == 64);

  auto desk = parse_run_config(R"({"profile": "desk", "seed": 9, "train": {"subject_epochs": 3}})");
  CHECK(desk.graph.patch_size_px == desk_graph_config().patch_size_px);
  CHECK(desk.graph.patch_spacing_mm == desk_graph_config().patch_spacing_mm);
  CHECK(desk.model.patch_size_px == 16);
  CHECK(desk.train.subject_epochs == 3);
  desk.finalize();
  CHECK(desk.model.seed == 9);
  CHECK(desk.train.seed == 9);
  CHECK(desk.dataset.seed == 9);

  auto mismatch = parse_run_config(R"({"profile": "desk", "model": {"patch_size_px": 32}})");
  CHECK_THROWS_AS(mismatch.finalize(), UsageError);

  auto bad_split = parse_run_config(R"({"train": {"train_fraction": 0.9, "val_fraction": 0.1}})");
  CHECK_THROWS_AS(bad_split.finalize(), UsageError);
}

TEST_CASE("config echo round trips") {
  auto c = parse_run_config(R"({"profile": "desk", "seed": 4, "graph": {"edges": {"cross": false}},
                                "dataset": {"fixed_spacing_mm": 3.3}, "paths": {"run_dir": "r"}})");
  const auto text = to_json(c);
  const auto back = parse_run_config(text);
  CHECK(to_json(back) == text);
  CHECK_FALSE(back.edges.cross);
  CHECK(back.dataset.fixed_spacing_mm == 3.3);
}

TEST_CASE("paths are resolved before execution") {
  auto c = parse_run_config(R"({"paths": {"data_dir": "a/b", "run_dir": "/tmp/x"}})");
  resolve_paths(c, "/base");
  CHECK(c.paths.data_dir == fs::path("/base/a/b"));
  CHECK(c.paths.graph_dir == fs::path("/base/graphs"));
  CHECK(c.paths.run_dir == fs::path("/tmp/x"));
}

TEST_CASE("gen with zero subjects writes an empty manifest") {
  TempDir t;
  CHECK(cmd_gen(small_config(1), t.path / "d", false, {0}) == 0);
  const auto m = nlohmann::json::parse(slurp(t.path / "d" / "manifest.json"));
  CHECK(m["subjects"].empty());
  CHECK(fs::exists(t.path / "d" / "config.json"));
}

TEST_CASE("gen is reproducible and refuses to overwrite") {
  TempDir t;
  const auto c = small_config(7);
  CHECK(cmd_gen(c, t.path / "a", false, {3}) == 0);
  CHECK(cmd_gen(c, t.path / "b", false, {3}) == 0);
  CHECK(slurp(t.path / "a" / "manifest.json") == slurp(t.path / "b" / "manifest.json"));
  for (const auto& e : fs::recursive_directory_iterator(t.path / "a" / "subjects")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), t.path / "a");
    CHECK(slurp(e.path()) == slurp(t.path / "b" / rel));
  }
  CHECK_THROWS_AS(cmd_gen(c, t.path / "a", false, {3}), UsageError);
  CHECK(cmd_gen(c, t.path / "a", true, {3}) == 0);
}

TEST_CASE("build-graph honours edge flags and is idempotent") {
  TempDir t;
  const auto c = small_config(2);
  REQUIRE(cmd_gen(c, t.path / "d", false, {2}) == 0);
  BuildGraphOptions o;
  o.manifest = t.path / "d" / "manifest.json";
  REQUIRE(cmd_build_graph(c, t.path / "g1", false, o) == 0);
  REQUIRE(cmd_build_graph(c, t.path / "g2", false, o) == 0);
  o.no_adjacent = true;
  REQUIRE(cmd_build_graph(c, t.path / "g3", false, o) == 0);

  const auto index = nlohmann::json::parse(slurp(t.path / "g1" / "graphs.json"));
  REQUIRE(index["graphs"].size() == 2);
  for (const auto& e : index["graphs"]) {
    const std::string f = e["file"];
    CHECK(slurp(t.path / "g1" / f) == slurp(t.path / "g2" / f));
    const auto full = load_graph(t.path / "g1" / f);
    const auto cut = load_graph(t.path / "g3" / f);
    CHECK(full.adjacency.count(EdgeKind::Adjacent) > 0);
    CHECK(cut.adjacency.count(EdgeKind::Adjacent) == 0);
    CHECK(cut.adjacency.count(EdgeKind::Surface) == full.adjacency.count(EdgeKind::Surface));
    CHECK(full.subject_grade.has_value());
  }
}

TEST_CASE("build-graph fails when no subject has a usable volume") {
  TempDir t;
  const auto c = small_config(3);
  nlohmann::json m{{"subjects", {{{"id", "x"}, {"volume", "missing.json"}}}}};
  std::ofstream(t.path / "manifest.json") << m.dump();
  BuildGraphOptions o;
  o.manifest = t.path / "manifest.json";
  CHECK_THROWS_AS(cmd_build_graph(c, t.path / "g", false, o), DataError);
}

TEST_CASE("eval reports all three levels") {
  TempDir t;
  const auto c = small_config(5);
  REQUIRE(cmd_gen(c, t.path / "d", false, {4}) == 0);
  BuildGraphOptions b;
  b.manifest = t.path / "d" / "manifest.json";
  REQUIRE(cmd_build_graph(c, t.path / "g", false, b) == 0);
  StageOptions o;
  o.graphs = t.path / "g";
  o.split = "all";
  REQUIRE(cmd_eval(c, t.path / "r", false, o) == 0);
  const auto j = nlohmann::json::parse(slurp(t.path / "r" / "eval_metrics.json"));
  for (const char* level : {"subject", "slice", "patch"}) {
    REQUIRE(j["levels"].contains(level));
    CHECK(j["levels"][level]["n"].get<int>() > 0);
  }
  CHECK(j["levels"]["subject"]["n"] == 4);
  o.split = "bogus";
  CHECK_THROWS_AS(cmd_eval(c, t.path / "r", true, o), UsageError);
}

TEST_CASE("train with folds writes one run per fold and the mean") {
  TempDir t;
  auto c = small_config(3);
  c.train.pretrain = false;
  c.train.subject_epochs = 1;
  c.train.patch_head_epochs = 2;
  c.finalize();
  REQUIRE(cmd_gen(c, t.path / "d", false, {9}) == 0);
  BuildGraphOptions b;
  b.manifest = t.path / "d" / "manifest.json";
  REQUIRE(cmd_build_graph(c, t.path / "g", false, b) == 0);
  StageOptions o;
  o.graphs = t.path / "g";
  o.folds = 3;
  REQUIRE(cmd_train(c, t.path / "cv", false, o) == 0);
  const auto j = nlohmann::json::parse(slurp(t.path / "cv" / "cv_metrics.json"));
  CHECK(j["folds"].size() == 3);
  int tested = 0;
  for (int f = 0; f < 3; ++f) {
    const auto dir = t.path / "cv" / ("fold_" + std::to_string(f));
    CHECK(fs::exists(dir / "model.ck"));
    tested += nlohmann::json::parse(slurp(dir / "split.json"))["test"].size();
  }
  CHECK(tested == 9);
  CHECK(j["mean"]["subject"].contains("acc"));
  CHECK_THROWS_AS(cmd_train(c, t.path / "cv", false, o), UsageError);
}

TEST_CASE("attention PLY has one element per vertex") {
  const auto g = testing::phantom_graph(11, 2, 6);
  CsnetModel<float> m(testing::tiny_model_config());
  std::mt19937_64 rng(1);
  testing::randomize_heads(m, rng);
  const auto a = vertex_attention(m, g, 2);
  std::vector<int> pred(g.size(), 1);
  const auto ply = attention_ply(g, pred, a, true);

  std::istringstream in(ply);
  std::string line;
  std::size_t vertices = 0, edges = 0;
  while (std::getline(in, line) && line != "end_header") {
    if (line.rfind("element vertex ", 0) == 0) vertices = std::stoul(line.substr(15));
    if (line.rfind("element edge ", 0) == 0) edges = std::stoul(line.substr(13));
  }
  CHECK(vertices == g.size());
  CHECK(edges == g.adjacency.count(EdgeKind::Surface) / 2);
  for (std::size_t i = 0; i < vertices; ++i) {
    float x, y, z, att;
    int grade, cart;
    REQUIRE(static_cast<bool>(in >> x >> y >> z >> grade >> att >> cart));
    CHECK(att >= 0.0f);
    CHECK(att <= 1.0f);
    CHECK(grade == 1);
    CHECK(cart == g.vertices[i].cartilage_id);
  }
  std::size_t edge_lines = 0;
  int u, v;
  while (in >> u >> v) ++edge_lines;
  CHECK(edge_lines == edges);

  const auto bare = attention_ply(g, pred, a, false);
  CHECK(bare.find("element edge") == std::string::npos);
  CHECK_THROWS_AS(attention_ply(g, {1}, a, false), UsageError);
}
