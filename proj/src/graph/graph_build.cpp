#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>

#include "csnet/error.hpp"
#include "csnet/graph.hpp"

namespace csnet {

double GraphBuildConfig::vertex_step_mm() const {
  return patch_extent_mm() * (1.0 - target_iou) / (1.0 + target_iou);
}

double GraphBuildConfig::d_a_mm(double t) const {
  const double p = patch_extent_mm();
  return d_a_factor * std::sqrt(t * t + p * p);
}

void GraphBuildConfig::validate() const {
  if (patch_size_px < 8 || patch_size_px % 2 != 0)
    throw UsageError("graph config: patch_size_px must be even and >= 8");
  if (!(patch_spacing_mm > 0) || !(d_c_mm > 0) || !(d_a_factor > 0))
    throw UsageError("graph config: spacing and thresholds must be positive");
  if (!(target_iou > 0) || !(target_iou < 1)) throw UsageError("graph config: target_iou in (0,1)");
  if (!(fov_margins.extent_si_mm > 0) || !(fov_margins.extent_ap_mm > 0))
    throw UsageError("graph config: FOV extents must be positive");
  if (opening_radius_vox < 0) throw UsageError("graph config: negative opening radius");
}

GraphBuildConfig desk_graph_config() {
  GraphBuildConfig cfg;
  cfg.patch_size_px = 16;
  cfg.patch_spacing_mm = 1.212;
  cfg.d_c_mm = cfg.patch_extent_mm() / 2.0;
  return cfg;
}

std::size_t Adjacency::count(EdgeKind k) const {
  return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), k));
}

std::optional<EdgeKind> Adjacency::find(std::uint32_t i, std::uint32_t j) const {
  const auto b = cols.begin() + row_ptr[i];
  const auto e = cols.begin() + row_ptr[i + 1];
  auto it = std::lower_bound(b, e, j);
  if (it == e || *it != j) return std::nullopt;
  return kinds[static_cast<std::size_t>(it - cols.begin())];
}

void check_graph_invariants(const CartilageGraph& g) {
  const auto& a = g.adjacency;
  const std::size_t n = g.vertices.size();
  if (a.num_vertices() != n) throw DataError("graph: adjacency size differs from vertex count");
  if (a.cols.size() != a.kinds.size() || a.row_ptr.back() != a.cols.size())
    throw DataError("graph: CSR arrays inconsistent");
  for (std::uint32_t i = 0; i < n; ++i) {
    int self = 0;
    for (std::uint32_t e = a.row_ptr[i]; e < a.row_ptr[i + 1]; ++e) {
      const std::uint32_t j = a.cols[e];
      const EdgeKind k = a.kinds[e];
      if (j >= n) throw DataError("graph: column out of range");
      if (e > a.row_ptr[i] && a.cols[e - 1] >= j) throw DataError("graph: unsorted row");
      if (a.find(j, i) != k) throw DataError("graph: asymmetric edge");
      const auto& vi = g.vertices[i];
      const auto& vj = g.vertices[j];
      switch (k) {
        case EdgeKind::SelfLoop:
          if (i != j) throw DataError("graph: self-loop kind off the diagonal");
          ++self;
          break;
        case EdgeKind::Surface:
          if (vi.cartilage_id != vj.cartilage_id || vi.slice_index != vj.slice_index || i == j)
            throw DataError("graph: surface edge outside one contour");
          break;
        case EdgeKind::Cross:
          if (vi.cartilage_id == vj.cartilage_id || vi.slice_index != vj.slice_index)
            throw DataError("graph: cross edge within a cartilage or across slices");
          break;
        case EdgeKind::Adjacent:
          if (vi.cartilage_id != vj.cartilage_id || std::abs(vi.slice_index - vj.slice_index) != 1)
            throw DataError("graph: adjacent edge not between neighbouring slices");
          break;
      }
    }
    if (self != 1) throw DataError("graph: vertex without exactly one self loop");
  }
  if (!g.patch_grades.empty() && g.patch_grades.size() != n)
    throw DataError("graph: patch label count differs from vertex count");
}

Fov adjust_fov(const LabeledVolume& input, const GraphBuildConfig& cfg) {
  const LabeledVolume vol = flip_right_knee(input);
  Fov fov;
  double top = std::numeric_limits<double>::infinity();
  double front = std::numeric_limits<double>::infinity();
  int first = -1, last = -1;
  for (int s = 0; s < vol.slices(); ++s) {
    bool any_bone = false;
    for (int r = 0; r < vol.rows(); ++r)
      for (int c = 0; c < vol.cols(); ++c) {
        const auto l = vol.labels.at(s, r, c);
        if (l == 0) continue;
        any_bone = true;
        if (l == static_cast<std::uint8_t>(Bone::Patella)) {
          top = std::min(top, r * vol.row_spacing());
          front = std::min(front, c * vol.col_spacing());
        }
      }
    if (any_bone) {
      if (first < 0) first = s;
      last = s;
    }
  }
  if (!std::isfinite(top)) throw DataError("adjust_fov: no patella label found");
  const auto& m = cfg.fov_margins;
  fov.y_min_mm = top - m.superior_mm;
  fov.y_max_mm = fov.y_min_mm + m.extent_si_mm;
  fov.x_min_mm = front - m.anterior_mm;
  fov.x_max_mm = fov.x_min_mm + m.extent_ap_mm;
  fov.slice_first = first;
  fov.slice_last = last;
  return fov;
}

std::vector<TracedContour> trace_contours(const LabeledVolume& vol, const Fov& fov) {
  std::vector<TracedContour> out;
  for (int s = std::max(0, fov.slice_first); s <= fov.slice_last && s < vol.slices(); ++s) {
    const std::uint8_t* lab = vol.labels.slice_data(s);
    for (std::uint8_t bone = 1; bone <= kMaxLabel; ++bone) {
      morph::Mask m(vol.rows(), vol.cols());
      for (std::size_t i = 0; i < m.px.size(); ++i) m.px[i] = lab[i] == bone;
      const auto pixels = trace_boundary(m);
      if (pixels.empty()) continue;
      Contour2D c = to_physical(pixels, vol.row_spacing(), vol.col_spacing());
      bool inside = false;
      for (std::size_t i = 0; i < c.size() && !inside; ++i) inside = fov.contains(c.x[i], c.y[i]);
      if (!inside) continue;
      out.push_back({s, static_cast<std::uint8_t>(bone - 1), std::move(c)});
    }
  }
  return out;
}

std::vector<double> vertex_arc_positions(double length_mm, const GraphBuildConfig& cfg) {
  if (length_mm < cfg.patch_extent_mm()) return {length_mm / 2.0};
  const double step = cfg.vertex_step_mm();
  const auto n = static_cast<std::size_t>(std::floor(length_mm / step)) + 1;
  const double offset = (length_mm - static_cast<double>(n - 1) * step) / 2.0;
  std::vector<double> pos(n);
  for (std::size_t k = 0; k < n; ++k) pos[k] = offset + static_cast<double>(k) * step;
  return pos;
}

std::vector<float> sample_patch(const LabeledVolume& vol, int slice, double x_mm, double y_mm,
                                const GraphBuildConfig& cfg) {
  const int p = cfg.patch_size_px;
  std::vector<float> patch(static_cast<std::size_t>(p) * p, 0.0f);
  const float* img = vol.intensity.slice_data(slice);
  const int rows = vol.rows(), cols = vol.cols();
  auto px = [&](int r, int c) -> double {
    if (r < 0 || r >= rows || c < 0 || c >= cols) return 0.0;
    return img[static_cast<std::size_t>(r) * cols + c];
  };
  const double half = (p - 1) / 2.0;
  for (int i = 0; i < p; ++i) {
    const double fy = (y_mm + (i - half) * cfg.patch_spacing_mm) / vol.row_spacing();
    const int r0 = static_cast<int>(std::floor(fy));
    const double wy = fy - r0;
    for (int j = 0; j < p; ++j) {
      const double fx = (x_mm + (j - half) * cfg.patch_spacing_mm) / vol.col_spacing();
      const int c0 = static_cast<int>(std::floor(fx));
      const double wx = fx - c0;
      const double v = (1 - wy) * ((1 - wx) * px(r0, c0) + wx * px(r0, c0 + 1)) +
                       wy * ((1 - wx) * px(r0 + 1, c0) + wx * px(r0 + 1, c0 + 1));
      patch[static_cast<std::size_t>(i) * p + j] = static_cast<float>(v);
    }
  }
  return patch;
}

namespace {

void emit_vertex(std::vector<SurfaceVertex>& out, const LabeledVolume& vol, const TracedContour& tc,
                 double canonical_arc, double unwrapped_arc, const GraphBuildConfig& cfg) {
  double x = 0, y = 0;
  tc.contour.point_at(canonical_arc, &x, &y);
  SurfaceVertex v;
  v.cartilage_id = tc.cartilage_id;
  v.slice_index = tc.slice;
  v.coord_mm = {static_cast<float>(tc.slice * vol.inter_slice_spacing_mm), static_cast<float>(x),
                static_cast<float>(y)};
  v.arc_pos_mm = static_cast<float>(unwrapped_arc);
  v.patch = sample_patch(vol, tc.slice, x, y, cfg);
  out.push_back(std::move(v));
}

}  // namespace

std::vector<SurfaceVertex> place_vertices(const std::vector<TracedContour>& contours,
                                          const LabeledVolume& vol, const Fov& fov,
                                          const GraphBuildConfig& cfg) {
  std::vector<SurfaceVertex> out;
  for (const auto& tc : contours) {
    const Contour2D& c = tc.contour;
    const std::size_t n = c.size();
    std::vector<char> inside(n);
    for (std::size_t i = 0; i < n; ++i) inside[i] = fov.contains(c.x[i], c.y[i]);
    const auto n_inside = static_cast<std::size_t>(std::count(inside.begin(), inside.end(), 1));
    if (n_inside == 0) continue;

    if (n_inside == n) {
      // Closed contour: uniform steps from the canonical start.
      const double P = c.perimeter;
      if (P < cfg.patch_extent_mm()) {
        emit_vertex(out, vol, tc, P / 2.0, P / 2.0, cfg);
        continue;
      }
      const double step = cfg.vertex_step_mm();
      const auto count = static_cast<std::size_t>(std::floor(P / step)) + 1;
      for (std::size_t k = 0; k < count; ++k) {
        const double a = static_cast<double>(k) * step;
        if (k > 0 && a >= P - 1e-9) break;  // would coincide with the start
        emit_vertex(out, vol, tc, a, a, cfg);
      }
      continue;
    }

    // Clipped contour: walk from the first inside point that follows an
    // outside point, so every inside run is contiguous in walk order.
    std::size_t rot = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (inside[i] && !inside[(i + n - 1) % n]) {
        rot = i;
        break;
      }
    const double P = c.perimeter;
    auto unwrapped = [&](std::size_t idx) {
      double d = c.arc[idx] - c.arc[rot];
      if (d < 0) d += P;
      return c.arc[rot] + d;
    };
    std::size_t k = 0;
    while (k < n) {
      const std::size_t i = (rot + k) % n;
      if (!inside[i]) {
        ++k;
        continue;
      }
      std::size_t end = k;
      while (end + 1 < n && inside[(rot + end + 1) % n]) ++end;
      const double a0 = unwrapped(i);
      const double a1 = unwrapped((rot + end) % n);
      for (double local : vertex_arc_positions(a1 - a0, cfg))
        emit_vertex(out, vol, tc, a0 + local, a0 + local, cfg);
      k = end + 1;
    }
  }
  return out;
}

Adjacency build_edges(const std::vector<SurfaceVertex>& vertices, const GraphBuildConfig& cfg,
                      double t) {
  const std::size_t n = vertices.size();
  const double d_c = cfg.d_c_mm;
  const double d_a = cfg.d_a_mm(t);

  std::map<int, std::vector<std::uint32_t>> by_slice;
  for (std::uint32_t i = 0; i < n; ++i) by_slice[vertices[i].slice_index].push_back(i);

  std::unordered_map<std::uint64_t, EdgeKind> pairs;
  auto add = [&](std::uint32_t i, std::uint32_t j, EdgeKind k) {
    if (i > j) std::swap(i, j);
    const std::uint64_t key = (static_cast<std::uint64_t>(i) << 32) | j;
    auto [it, fresh] = pairs.emplace(key, k);
    // Surface > Cross > Adjacent, which is ascending enum order.
    if (!fresh && static_cast<int>(k) < static_cast<int>(it->second)) it->second = k;
  };
  auto dist = [&](std::uint32_t i, std::uint32_t j) {
    const auto& a = vertices[i].coord_mm;
    const auto& b = vertices[j].coord_mm;
    const double d0 = double(a[0]) - b[0], d1 = double(a[1]) - b[1], d2 = double(a[2]) - b[2];
    return std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
  };

  for (const auto& [s, ids] : by_slice) {
    // Surface: arc-consecutive within each cartilage of this slice.
    std::map<int, std::vector<std::uint32_t>> by_cart;
    for (auto i : ids) by_cart[vertices[i].cartilage_id].push_back(i);
    for (auto& [l, chain] : by_cart) {
      std::stable_sort(chain.begin(), chain.end(), [&](auto a, auto b) {
        return vertices[a].arc_pos_mm < vertices[b].arc_pos_mm;
      });
      for (std::size_t k = 1; k < chain.size(); ++k) add(chain[k - 1], chain[k], EdgeKind::Surface);
    }
    // Cross: different cartilages within D_c.
    for (std::size_t a = 0; a < ids.size(); ++a)
      for (std::size_t b = a + 1; b < ids.size(); ++b)
        if (vertices[ids[a]].cartilage_id != vertices[ids[b]].cartilage_id &&
            dist(ids[a], ids[b]) < d_c)
          add(ids[a], ids[b], EdgeKind::Cross);
    // Adjacent: same cartilage in slice s + 1 within D_a.
    auto nxt = by_slice.find(s + 1);
    if (nxt == by_slice.end()) continue;
    for (auto i : ids)
      for (auto j : nxt->second)
        if (vertices[i].cartilage_id == vertices[j].cartilage_id && dist(i, j) < d_a)
          add(i, j, EdgeKind::Adjacent);
  }

  std::vector<std::vector<std::pair<std::uint32_t, EdgeKind>>> rows(n);
  for (std::uint32_t i = 0; i < n; ++i) rows[i].emplace_back(i, EdgeKind::SelfLoop);
  for (const auto& [key, k] : pairs) {
    const auto i = static_cast<std::uint32_t>(key >> 32);
    const auto j = static_cast<std::uint32_t>(key & 0xffffffffu);
    rows[i].emplace_back(j, k);
    rows[j].emplace_back(i, k);
  }
  Adjacency adj;
  adj.row_ptr.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::sort(rows[i].begin(), rows[i].end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [j, k] : rows[i]) {
      adj.cols.push_back(j);
      adj.kinds.push_back(k);
    }
    adj.row_ptr[i + 1] = static_cast<std::uint32_t>(adj.cols.size());
  }
  return adj;
}

CartilageGraph build_graph(const LabeledVolume& input, const GraphBuildConfig& cfg,
                           const std::string& subject_id) {
  cfg.validate();
  input.validate();
  const LabeledVolume vol = flip_right_knee(refine_labels(input, cfg.opening_radius_vox));
  CartilageGraph g;
  g.subject_id = subject_id;
  g.patch_size_px = cfg.patch_size_px;
  g.inter_slice_spacing_mm = vol.inter_slice_spacing_mm;
  g.num_slices = vol.slices();
  g.fov = adjust_fov(vol, cfg);
  g.vertices = place_vertices(trace_contours(vol, g.fov), vol, g.fov, cfg);
  if (g.vertices.empty()) throw DataError("build_graph: no surface vertices inside the FOV");
  g.adjacency = build_edges(g.vertices, cfg, vol.inter_slice_spacing_mm);
  return g;
}

CartilageGraph filter_edges(const CartilageGraph& g, const EdgeMask& mask) {
  CartilageGraph out = g;
  Adjacency& a = out.adjacency;
  a.cols.clear();
  a.kinds.clear();
  a.row_ptr.assign(g.size() + 1, 0);
  const Adjacency& src = g.adjacency;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::uint32_t e = src.row_ptr[i]; e < src.row_ptr[i + 1]; ++e)
      if (mask.keeps(src.kinds[e])) {
        a.cols.push_back(src.cols[e]);
        a.kinds.push_back(src.kinds[e]);
      }
    a.row_ptr[i + 1] = static_cast<std::uint32_t>(a.cols.size());
  }
  return out;
}

std::vector<double> normalized_coords(const CartilageGraph& g) {
  std::vector<double> out(g.size() * 3);
  const double s0 = g.fov.slice_first * g.inter_slice_spacing_mm;
  const double s1 = g.fov.slice_last * g.inter_slice_spacing_mm;
  auto norm = [](double v, double lo, double hi) {
    return hi > lo ? 2.0 * (v - lo) / (hi - lo) - 1.0 : 0.0;
  };
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& c = g.vertices[i].coord_mm;
    out[3 * i + 0] = norm(c[0], s0, s1);
    out[3 * i + 1] = norm(c[1], g.fov.x_min_mm, g.fov.x_max_mm);
    out[3 * i + 2] = norm(c[2], g.fov.y_min_mm, g.fov.y_max_mm);
  }
  return out;
}

}  // namespace csnet
