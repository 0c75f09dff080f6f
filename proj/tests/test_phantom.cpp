#include <filesystem>

#include "doctest.h"

#include "csnet/error.hpp"
#include "csnet/phantom.hpp"
#include "support.hpp"

using namespace csnet;

namespace {

PhantomSpec defect_spec(std::uint64_t seed, DefectGrade grade, int n_defects = 1) {
  PhantomSpec s;
  s.seed = seed;
  s.dims = {10, 150, 150};
  s.n_defects = n_defects;
  s.defect_grade = grade;
  s.noise_sigma = 0.0;
  return s;
}

}  // namespace

TEST_CASE("clean phantom has no defects") {
  PhantomSpec s;
  s.seed = 3;
  s.dims = {8, 150, 150};
  const auto p = generate_phantom_full(s);
  CHECK(p.truth.subject_grade == 0);
  CHECK(p.truth.defect_regions.empty());
  CHECK_NOTHROW(p.truth.validate(8));
  CHECK_NOTHROW(p.volume.validate());
  const auto cfg = desk_graph_config();
  auto g = build_graph(p.volume, cfg);
  attach_ground_truth(g, p.volume, p.truth, cfg);
  for (int v : g.patch_grades) CHECK(v == 0);
}

TEST_CASE("ground truth grades follow the region maxima") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto p = generate_phantom_with_retry(defect_spec(seed, DefectGrade::G1, 2));
    CHECK_NOTHROW(p.truth.validate(10));
    CHECK(p.truth.subject_grade == 1);
    CHECK(p.truth.defect_regions.size() >= 2u * 3u);
    for (const auto& r : p.truth.defect_regions) {
      CHECK(r.arc_hi_mm - r.arc_lo_mm == doctest::Approx(20.0));
      CHECK(p.truth.slice_grades[static_cast<std::size_t>(r.slice)] >= r.grade);
    }
  }
  GroundTruth bad;
  bad.subject_grade = 2;
  bad.slice_grades = {0, 1};
  CHECK_THROWS_AS(bad.validate(2), DataError);
  CHECK_THROWS_AS(bad.validate(3), DataError);
}

TEST_CASE("full-thickness defects blank the cartilage band") {
  const auto p = generate_phantom_with_retry(defect_spec(7, DefectGrade::G2));
  const auto clean = [&] {
    auto s = defect_spec(7, DefectGrade::G2);
    s.n_defects = 0;
    return generate_phantom_full(s);
  }();
  std::size_t blanked = 0, band_voxels = 0;
  for (std::size_t i = 0; i < p.band.size(); ++i) {
    if (!p.band.raw()[i]) continue;
    ++band_voxels;
    CHECK(clean.volume.intensity.raw()[i] == doctest::Approx(1.0f));
    if (p.volume.intensity.raw()[i] == 0.0f) ++blanked;
  }
  CHECK(band_voxels > 1000);
  CHECK(blanked > 20);
  CHECK(blanked < band_voxels / 4);
}

TEST_CASE("generation is deterministic in the seed") {
  const auto a = generate_phantom_with_retry(defect_spec(9, DefectGrade::G1));
  const auto b = generate_phantom_with_retry(defect_spec(9, DefectGrade::G1));
  CHECK(a.volume == b.volume);
  CHECK(a.truth == b.truth);
  auto noisy = defect_spec(9, DefectGrade::G1);
  noisy.noise_sigma = 0.05;
  CHECK(generate_phantom_with_retry(noisy).volume == generate_phantom_with_retry(noisy).volume);
}

TEST_CASE("slice maxima of patch labels equal slice grades") {
  for (std::uint64_t seed = 11; seed <= 13; ++seed) {
    const auto g = testing::phantom_graph(seed, 2, 10);
    std::vector<int> mx(static_cast<std::size_t>(g.num_slices), 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      mx[static_cast<std::size_t>(g.vertices[i].slice_index)] =
          std::max(mx[static_cast<std::size_t>(g.vertices[i].slice_index)], g.patch_grades[i]);
    CHECK(mx == g.slice_grades);
  }
}

TEST_CASE("right knees reverse slice grades into graph order") {
  auto s = defect_spec(15, DefectGrade::G2);
  s.laterality = Laterality::Right;
  const auto p = generate_phantom_with_retry(s);
  const auto cfg = desk_graph_config();
  auto g = build_graph(p.volume, cfg);
  attach_ground_truth(g, p.volume, p.truth, cfg);
  auto rev = p.truth.slice_grades;
  std::reverse(rev.begin(), rev.end());
  CHECK(g.slice_grades == rev);
  CHECK(std::count(g.patch_grades.begin(), g.patch_grades.end(), 2) > 0);
}

TEST_CASE("impossible defects raise placement errors") {
  auto s = defect_spec(5, DefectGrade::G1);
  s.defect_arc_mm = 400.0;
  CHECK_THROWS_AS(generate_phantom_with_retry(s, 2), PlacementError);
  auto bad = defect_spec(5, DefectGrade::G1);
  bad.slice_span = 0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("dataset grade mix tracks the cohort proportions") {
  DatasetOptions o;
  o.seed = 2;
  o.n_subjects = 200;
  const auto specs = make_dataset_specs(o);
  REQUIRE(specs.size() == 200);
  int counts[3] = {0, 0, 0};
  for (const auto& s : specs) {
    const int g = s.n_defects == 0 ? 0 : s.defect_grade == DefectGrade::G2 ? 2 : 1;
    ++counts[g];
    CHECK(s.dims[0] >= 18);
    CHECK(s.inter_slice_spacing_mm >= 3.3);
    CHECK(s.inter_slice_spacing_mm <= 4.5);
  }
  CHECK(counts[0] == 86);
  CHECK(counts[1] == 61);
  CHECK(counts[2] == 53);
  CHECK(make_dataset_specs(o).front().seed == specs.front().seed);
  o.n_subjects = 0;
  CHECK(make_dataset_specs(o).empty());
}

TEST_CASE("ground truth JSON round trip") {
  const auto p = generate_phantom_with_retry(defect_spec(17, DefectGrade::G2));
  CHECK(ground_truth_from_json(to_json(p.truth)) == p.truth);
  const auto dir = std::filesystem::temp_directory_path() / "csnet_gt_rt";
  std::filesystem::create_directories(dir);
  save_ground_truth(p.truth, dir / "gt.json");
  CHECK(load_ground_truth(dir / "gt.json") == p.truth);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(ground_truth_from_json("{\"subject_grade\": 1}"), DataError);
}
