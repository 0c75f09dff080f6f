#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "csnet/contour.hpp"
#include "csnet/volume.hpp"

namespace csnet {

struct FovMargins {
  double superior_mm = 9.0;   // above the patella's superior extreme
  double extent_si_mm = 100.0;
  double anterior_mm = 3.0;   // in front of the patella's anterior extreme
  double extent_ap_mm = 100.0;
};

struct GraphBuildConfig {
  int patch_size_px = 64;
  double patch_spacing_mm = 0.303;
  double target_iou = 1.0 / 3.0;
  double d_c_mm = 9.696;      // cross-cartilage threshold, p_mm / 2 by default
  double d_a_factor = 0.8;    // D_a = factor * sqrt(t^2 + p_mm^2)
  FovMargins fov_margins;
  int opening_radius_vox = 1;

  double patch_extent_mm() const { return patch_size_px * patch_spacing_mm; }
  // Centre offset along one axis giving two p x p squares the target IoU:
  // IoU(shift) = (p - shift) / (p + shift).
  double vertex_step_mm() const;
  double d_a_mm(double inter_slice_spacing_mm) const;
  // Throws UsageError.
  void validate() const;
};

// Desk-scale config keeping the physical patch footprint of the default
// (64 px at 0.303 mm) with 16 px at 1.212 mm.
GraphBuildConfig desk_graph_config();

struct Fov {
  int slice_first = 0;
  int slice_last = -1;
  double x_min_mm = 0.0;  // anterior bound
  double x_max_mm = 0.0;  // posterior bound
  double y_min_mm = 0.0;  // superior bound
  double y_max_mm = 0.0;  // inferior bound

  bool contains(double x, double y) const {
    return x >= x_min_mm && x <= x_max_mm && y >= y_min_mm && y <= y_max_mm;
  }
  bool operator==(const Fov&) const = default;
};

enum class EdgeKind : std::uint8_t { SelfLoop = 0, Surface = 1, Cross = 2, Adjacent = 3 };

struct EdgeMask {
  bool surface = true;
  bool cross = true;
  bool adjacent = true;
  bool keeps(EdgeKind k) const {
    switch (k) {
      case EdgeKind::Surface: return surface;
      case EdgeKind::Cross: return cross;
      case EdgeKind::Adjacent: return adjacent;
      case EdgeKind::SelfLoop: return true;
    }
    return true;
  }
  bool operator==(const EdgeMask&) const = default;
};

struct SurfaceVertex {
  std::uint8_t cartilage_id = 0;       // 0 femur, 1 tibia, 2 patella
  int slice_index = 0;
  std::array<float, 3> coord_mm{};     // (s * t, x, y)
  float arc_pos_mm = 0.0f;             // monotone along the slice's contour chain
  std::vector<float> patch;            // p * p, row-major (rows = y)
  bool operator==(const SurfaceVertex&) const = default;
};

// CSR adjacency; columns sorted within each row.
struct Adjacency {
  std::vector<std::uint32_t> row_ptr{0};
  std::vector<std::uint32_t> cols;
  std::vector<EdgeKind> kinds;

  std::size_t num_vertices() const { return row_ptr.size() - 1; }
  std::size_t num_entries() const { return cols.size(); }
  std::size_t count(EdgeKind k) const;
  std::optional<EdgeKind> find(std::uint32_t i, std::uint32_t j) const;
  bool operator==(const Adjacency&) const = default;
};

struct CartilageGraph {
  std::string subject_id;
  int patch_size_px = 0;
  double inter_slice_spacing_mm = 0.0;
  int num_slices = 0;
  Fov fov;
  std::vector<SurfaceVertex> vertices;
  Adjacency adjacency;
  std::optional<int> subject_grade;
  std::vector<int> slice_grades;  // indexed by slice (after laterality flip), may be empty
  std::vector<int> patch_grades;  // one per vertex, may be empty

  std::size_t size() const { return vertices.size(); }
  bool operator==(const CartilageGraph&) const = default;
};

// Checks symmetry, one self loop per vertex and the per-kind placement rules.
// Throws DataError describing the first violation.
void check_graph_invariants(const CartilageGraph& g);

Fov adjust_fov(const LabeledVolume& vol, const GraphBuildConfig& cfg);

struct TracedContour {
  int slice = 0;
  std::uint8_t cartilage_id = 0;
  Contour2D contour;  // full closed contour, canonical arc origin
};

// Slice-major then bone order. Expects labels already refined and flipped.
std::vector<TracedContour> trace_contours(const LabeledVolume& vol, const Fov& fov);

// Arc positions of vertex centres on one open stretch of contour of length
// `length_mm`, measured from its start.
std::vector<double> vertex_arc_positions(double length_mm, const GraphBuildConfig& cfg);

std::vector<SurfaceVertex> place_vertices(const std::vector<TracedContour>& contours,
                                          const LabeledVolume& vol, const Fov& fov,
                                          const GraphBuildConfig& cfg);

// Bilinear p x p sample centred at (x, y) mm in slice s, zero outside.
std::vector<float> sample_patch(const LabeledVolume& vol, int slice, double x_mm, double y_mm,
                                const GraphBuildConfig& cfg);

Adjacency build_edges(const std::vector<SurfaceVertex>& vertices, const GraphBuildConfig& cfg,
                      double inter_slice_spacing_mm);

CartilageGraph build_graph(const LabeledVolume& vol, const GraphBuildConfig& cfg,
                           const std::string& subject_id = "");

// Drops masked edge kinds; self loops always stay.
CartilageGraph filter_edges(const CartilageGraph& g, const EdgeMask& mask);

// Vertex coordinates mapped to [-1, 1] per FOV axis, row-major N x 3.
std::vector<double> normalized_coords(const CartilageGraph& g);

void save_graph(const CartilageGraph& g, const std::filesystem::path& path);
CartilageGraph load_graph(const std::filesystem::path& path);

}  // namespace csnet
