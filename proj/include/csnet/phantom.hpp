#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "csnet/error.hpp"
#include "csnet/graph.hpp"
#include "csnet/volume.hpp"

namespace csnet {

enum class DefectGrade : std::uint8_t { G1 = 1, G2 = 2 };

// Optional explicit placement of one defect; unset fields are drawn from the seed.
struct DefectPlacement {
  std::optional<int> cartilage_id;   // 0 femur, 1 tibia, 2 patella
  std::optional<int> first_slice;    // in stored slice order
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  std::array<int, 3> dims{20, 150, 150};  // S, H, W
  double inter_slice_spacing_mm = 4.5;
  std::array<double, 2> in_slice_spacing_mm{0.9, 0.9};
  Laterality laterality = Laterality::Left;
  int n_defects = 0;
  DefectGrade defect_grade = DefectGrade::G1;
  double defect_arc_mm = 20.0;
  double depth_fraction = 0.5;  // G1 only; G2 is always full thickness
  int slice_span = 3;
  double noise_sigma = 0.05;
  std::vector<DefectPlacement> placements;  // at most n_defects entries

  // Throws UsageError.
  void validate() const;
};

struct DefectRegion {
  int cartilage_id = 0;
  int slice = 0;          // stored slice order
  double arc_lo_mm = 0;   // canonical contour arc; arc_hi may exceed the perimeter
  double arc_hi_mm = 0;
  int grade = 0;
  bool operator==(const DefectRegion&) const = default;
};

struct GroundTruth {
  int subject_grade = 0;
  std::vector<int> slice_grades;  // stored slice order
  std::vector<DefectRegion> defect_regions;

  // Throws DataError when the max-grade relations do not hold.
  void validate(int num_slices) const;
  bool operator==(const GroundTruth&) const = default;
};

// Raised when a defect cannot be placed on the available articular surface.
class PlacementError : public DataError {
 public:
  using DataError::DataError;
};

std::pair<LabeledVolume, GroundTruth> generate_phantom(const PhantomSpec& spec);

struct Phantom {
  LabeledVolume volume;
  GroundTruth truth;
  // Synthetic cartilage: 0 outside the band, otherwise the lined bone code.
  Grid3<std::uint8_t> band;
};

Phantom generate_phantom_full(const PhantomSpec& spec);

// Patch grade per vertex: max grade of defect regions whose contour stretch
// crosses the vertex's square footprint. Vertices are in graph slice order.
std::vector<int> label_patches(const LabeledVolume& vol, const GroundTruth& gt,
                               const std::vector<SurfaceVertex>& vertices,
                               const GraphBuildConfig& cfg);

// Fills subject, slice (graph order) and patch grades of a built graph.
void attach_ground_truth(CartilageGraph& g, const LabeledVolume& vol, const GroundTruth& gt,
                         const GraphBuildConfig& cfg);

struct DatasetOptions {
  std::uint64_t seed = 0;
  int n_subjects = 10;
  std::array<double, 3> grade_mix{518.0, 370.0, 317.0};
  std::optional<double> fixed_spacing_mm;  // overrides the sampled inter-slice spacing
  std::optional<int> fixed_slices;
  std::array<int, 2> in_slice_dims{150, 150};
  double in_slice_spacing_mm = 0.9;
  double noise_sigma = 0.05;
  std::array<double, 2> defect_arc_mm{20.0, 30.0};
  std::array<int, 2> slice_span{3, 4};
  double right_knee_fraction = 0.0;
};

// Specs for a cohort with the requested grade mix (allocated by largest
// remainder, then shuffled) and Table-I-like slice count and spacing mix.
std::vector<PhantomSpec> make_dataset_specs(const DatasetOptions& opt);

// Generates a phantom, redrawing defect placement on PlacementError.
Phantom generate_phantom_with_retry(PhantomSpec spec, int attempts = 8);

std::string to_json(const GroundTruth& gt);
GroundTruth ground_truth_from_json(const std::string& text);
void save_ground_truth(const GroundTruth& gt, const std::filesystem::path& path);
GroundTruth load_ground_truth(const std::filesystem::path& path);

}  // namespace csnet
