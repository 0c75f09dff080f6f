#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"

#include "csnet/error.hpp"
#include "csnet/graph.hpp"
#include "support.hpp"

using namespace csnet;

namespace {

std::optional<EdgeKind> brute_force_kind(const std::vector<SurfaceVertex>& vs, std::size_t i, std::size_t j,
                                         double d_c, double d_a) {
  const auto& a = vs[i];
  const auto& b = vs[j];
  double d2 = 0;
  for (int k = 0; k < 3; ++k) d2 += std::pow(double(a.coord_mm[k]) - b.coord_mm[k], 2);
  const double d = std::sqrt(d2);
  if (a.slice_index == b.slice_index && a.cartilage_id == b.cartilage_id) {
    const float lo = std::min(a.arc_pos_mm, b.arc_pos_mm), hi = std::max(a.arc_pos_mm, b.arc_pos_mm);
    for (std::size_t k = 0; k < vs.size(); ++k)
      if (k != i && k != j && vs[k].slice_index == a.slice_index && vs[k].cartilage_id == a.cartilage_id &&
          vs[k].arc_pos_mm > lo && vs[k].arc_pos_mm < hi)
        return std::nullopt;
    return EdgeKind::Surface;
  }
  if (a.slice_index == b.slice_index && d < d_c) return EdgeKind::Cross;
  if (std::abs(a.slice_index - b.slice_index) == 1 && a.cartilage_id == b.cartilage_id && d < d_a)
    return EdgeKind::Adjacent;
  return std::nullopt;
}

std::vector<SurfaceVertex> random_vertices(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<float> pos(0.0f, 40.0f);
  std::uniform_int_distribution<int> slice(0, 4), cart(0, 2);
  std::vector<SurfaceVertex> vs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& v = vs[static_cast<std::size_t>(i)];
    v.slice_index = slice(rng);
    v.cartilage_id = static_cast<std::uint8_t>(cart(rng));
    v.coord_mm = {static_cast<float>(v.slice_index * 4.5), pos(rng), pos(rng)};
    v.arc_pos_mm = static_cast<float>(i) * 0.5f + pos(rng);
  }
  return vs;
}

}  // namespace

TEST_CASE("vertex step and edge thresholds") {
  const auto cfg = desk_graph_config();
  CHECK(cfg.patch_extent_mm() == doctest::Approx(19.392));
  CHECK(GraphBuildConfig{}.patch_extent_mm() == doctest::Approx(19.392));
  CHECK(cfg.vertex_step_mm() == doctest::Approx(9.696));
  const double p = cfg.vertex_step_mm();
  const double extent = cfg.patch_extent_mm();
  CHECK((extent - p) / (extent + p) == doctest::Approx(1.0 / 3.0));
  CHECK(cfg.d_a_mm(4.5) == doctest::Approx(15.926).epsilon(1e-4));
  CHECK(cfg.d_c_mm == doctest::Approx(9.696));
}

TEST_CASE("open 60 mm run holds 7 centred vertices") {
  const auto cfg = desk_graph_config();
  const auto a = vertex_arc_positions(60.0, cfg);
  REQUIRE(a.size() == 7);
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i] - a[i - 1] == doctest::Approx(cfg.vertex_step_mm()));
  CHECK(a.front() == doctest::Approx(60.0 - a.back()));
  CHECK(vertex_arc_positions(0.0, cfg).size() == 1);
}

TEST_CASE("build_edges matches the brute-force predicate") {
  std::mt19937_64 rng(11);
  const auto cfg = desk_graph_config();
  for (int trial = 0; trial < 20; ++trial) {
    const auto vs = random_vertices(rng, 5 + trial * 4);
    const auto adj = build_edges(vs, cfg, 4.5);
    for (std::size_t i = 0; i < vs.size(); ++i)
      for (std::size_t j = 0; j < vs.size(); ++j) {
        const auto want = i == j ? std::optional<EdgeKind>(EdgeKind::SelfLoop)
                                 : brute_force_kind(vs, i, j, cfg.d_c_mm, cfg.d_a_mm(4.5));
        CHECK(adj.find(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)) == want);
      }
  }
}

TEST_CASE("phantom graph satisfies its invariants") {
  const auto g = testing::phantom_graph(21, 2);
  CHECK_NOTHROW(check_graph_invariants(g));
  CHECK(g.size() > 50);
  CHECK(g.adjacency.count(EdgeKind::SelfLoop) == g.size());
  CHECK(g.adjacency.count(EdgeKind::Surface) > 0);
  CHECK(g.adjacency.count(EdgeKind::Adjacent) > 0);
  for (const auto& v : g.vertices) {
    CHECK(v.patch.size() == 16u * 16u);
    CHECK(g.fov.contains(v.coord_mm[1], v.coord_mm[2]));
    CHECK(v.coord_mm[0] == doctest::Approx(v.slice_index * g.inter_slice_spacing_mm));
  }
  for (double c : normalized_coords(g)) {
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
  CHECK(g.fov.x_max_mm - g.fov.x_min_mm == doctest::Approx(100.0));
  CHECK(g.fov.y_max_mm - g.fov.y_min_mm == doctest::Approx(100.0));
}

TEST_CASE("vertices average two to four adjacent neighbours per neighbouring slice") {
  const auto g = testing::phantom_graph(23, 0, 20);
  REQUIRE(g.inter_slice_spacing_mm == 4.5);
  std::set<std::pair<int, int>> present;
  for (const auto& v : g.vertices) present.insert({v.slice_index, v.cartilage_id});
  std::size_t links = 0, slots = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& v = g.vertices[i];
    for (int ds : {-1, 1})
      if (present.count({v.slice_index + ds, v.cartilage_id})) ++slots;
    for (std::uint32_t e = g.adjacency.row_ptr[i]; e < g.adjacency.row_ptr[i + 1]; ++e)
      if (g.adjacency.kinds[e] == EdgeKind::Adjacent) ++links;
  }
  REQUIRE(slots > 0);
  const double mean = static_cast<double>(links) / static_cast<double>(slots);
  CHECK(mean >= 2.0);
  CHECK(mean <= 4.0);
}

TEST_CASE("FOV is anchored on the patella") {
  auto v = make_volume(3, 60, 60, 4.0, 1.0, 1.0);
  for (int s = 0; s < 3; ++s)
    for (int r = 20; r < 30; ++r)
      for (int c = 15; c < 22; ++c) v.labels.at(s, r, c) = static_cast<std::uint8_t>(Bone::Patella);
  const auto fov = adjust_fov(v, desk_graph_config());
  CHECK(fov.y_min_mm == doctest::Approx(20.0 - 9.0));
  CHECK(fov.x_min_mm == doctest::Approx(15.0 - 3.0));
  auto no_patella = make_volume(3, 10, 10, 4.0, 1.0, 1.0);
  no_patella.labels.at(1, 5, 5) = static_cast<std::uint8_t>(Bone::Femur);
  CHECK_THROWS_AS(adjust_fov(no_patella, desk_graph_config()), DataError);
}

TEST_CASE("edge masks drop exactly the masked kinds") {
  const auto g = testing::phantom_graph(22, 1);
  const auto none = filter_edges(g, {false, false, false});
  CHECK(none.adjacency.num_entries() == g.size());
  const auto no_adj = filter_edges(g, {true, true, false});
  CHECK(no_adj.adjacency.count(EdgeKind::Adjacent) == 0);
  CHECK(no_adj.adjacency.count(EdgeKind::Surface) == g.adjacency.count(EdgeKind::Surface));
  CHECK(no_adj.adjacency.count(EdgeKind::Cross) == g.adjacency.count(EdgeKind::Cross));
  CHECK(filter_edges(g, {}) == g);
  CHECK_NOTHROW(check_graph_invariants(no_adj));
}

TEST_CASE("graph files round trip and rebuilding is idempotent") {
  PhantomSpec s;
  s.seed = 4;
  s.dims = {6, 150, 150};
  const auto p = generate_phantom_with_retry(s);
  const auto cfg = desk_graph_config();
  const auto g1 = build_graph(p.volume, cfg, "a");
  const auto g2 = build_graph(p.volume, cfg, "a");
  CHECK(g1 == g2);
  const auto dir = std::filesystem::temp_directory_path() / "csnet_graph_rt";
  std::filesystem::create_directories(dir);
  save_graph(g1, dir / "a.graph");
  CHECK(load_graph(dir / "a.graph") == g1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("patch sampling is zero outside the volume") {
  auto v = make_volume(2, 10, 10, 4.0, 1.0, 1.0);
  for (auto& x : v.intensity.raw()) x = 1.0f;
  auto cfg = desk_graph_config();
  cfg.patch_size_px = 4;
  cfg.patch_spacing_mm = 1.0;
  const auto inside = sample_patch(v, 0, 5.0, 5.0, cfg);
  for (float x : inside) CHECK(x == doctest::Approx(1.0f));
  const auto outside = sample_patch(v, 0, 100.0, 100.0, cfg);
  for (float x : outside) CHECK(x == 0.0f);
}
