#include "csnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "csnet/contour.hpp"
#include "csnet/error.hpp"

namespace csnet {
namespace {

constexpr float kBackground = 0.45f;
constexpr float kBoneMarrow = 0.25f;
constexpr float kCartilage = 1.0f;
constexpr float kG1Fraction = 0.4f;
constexpr double kArticularProximityMm = 12.0;
constexpr double kMinRunMm = 4.0;

// x = anterior-posterior, y = superior-inferior, z = left-right (mm).
struct Ellipsoid {
  double cx, cy, cz, ax, ay, az;
  bool contains(double x, double y, double z) const {
    const double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
    return u * u + v * v + w * w <= 1.0;
  }
};

struct KneeShape {
  std::vector<Ellipsoid> femur, tibia, patella;
};

KneeShape sample_shape(const PhantomSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> scale_d(0.93, 1.07);
  std::uniform_real_distribution<double> shift_d(-3.0, 3.0);
  std::uniform_real_distribution<double> jitter_d(-1.5, 1.5);
  const double scale = scale_d(rng);
  const double ox = spec.dims[2] * spec.in_slice_spacing_mm[1] / 2.0 + shift_d(rng);
  const double oy = spec.dims[1] * spec.in_slice_spacing_mm[0] / 2.0 + shift_d(rng);
  const double oz = (spec.dims[0] - 1) * spec.inter_slice_spacing_mm / 2.0 + shift_d(rng);
  auto make = [&](double x, double y, double z, double ax, double ay, double az) {
    return Ellipsoid{ox + scale * x + jitter_d(rng), oy + scale * y + jitter_d(rng), oz + z,
                     scale * ax, scale * ay, scale * az};
  };
  KneeShape k;
  // Femur: shaft, condyles and the trochlear bulge facing the patella.
  k.femur.push_back(make(2, -48, 0, 13, 48, 22));
  k.femur.push_back(make(4, -4, 0, 25, 19, 36));
  k.femur.push_back(make(-8, -20, 0, 12, 17, 28));
  // Tibia: plateau and shaft.
  k.tibia.push_back(make(4, 33, 0, 28, 12, 35));
  k.tibia.push_back(make(8, 62, 0, 14, 36, 20));
  // Patella, anterior and superior to the joint line.
  k.patella.push_back(make(-31, -27, 0, 6.5, 14, 18));
  return k;
}

// Two-pass 8-neighbour chamfer distance (mm) to the nearest foreground pixel.
std::vector<double> chamfer_distance(const std::vector<char>& fg, int rows, int cols, double rsp,
                                     double csp) {
  const double inf = std::numeric_limits<double>::infinity();
  const double diag = std::hypot(rsp, csp);
  std::vector<double> d(fg.size(), inf);
  for (std::size_t i = 0; i < fg.size(); ++i)
    if (fg[i]) d[i] = 0.0;
  auto at = [&](int r, int c) -> double& { return d[static_cast<std::size_t>(r) * cols + c]; };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double& v = at(r, c);
      if (c > 0) v = std::min(v, at(r, c - 1) + csp);
      if (r > 0) {
        v = std::min(v, at(r - 1, c) + rsp);
        if (c > 0) v = std::min(v, at(r - 1, c - 1) + diag);
        if (c + 1 < cols) v = std::min(v, at(r - 1, c + 1) + diag);
      }
    }
  for (int r = rows - 1; r >= 0; --r)
    for (int c = cols - 1; c >= 0; --c) {
      double& v = at(r, c);
      if (c + 1 < cols) v = std::min(v, at(r, c + 1) + csp);
      if (r + 1 < rows) {
        v = std::min(v, at(r + 1, c) + rsp);
        if (c + 1 < cols) v = std::min(v, at(r + 1, c + 1) + diag);
        if (c > 0) v = std::min(v, at(r + 1, c - 1) + diag);
      }
    }
  return d;
}

bool in_cyclic_interval(double a, double lo, double hi, double perimeter) {
  if (perimeter <= 0) return false;
  double d = std::fmod(a - lo, perimeter);
  if (d < 0) d += perimeter;
  return d <= hi - lo + 1e-9;
}

// Per slice and bone: traced contour plus the band voxels lining it.
struct SliceBone {
  bool present = false;
  Contour2D contour;
  std::vector<int> band_pixels;      // flat in-slice index
  std::vector<double> band_depth;    // distance to the bone, mm
  std::vector<std::size_t> nearest;  // nearest contour point per band pixel
  std::vector<char> articular;       // per contour point
};

struct ArticularRun {
  double lo = 0, hi = 0;  // unwrapped arc
};

std::vector<ArticularRun> articular_runs(const SliceBone& sb) {
  const auto& c = sb.contour;
  const std::size_t n = c.size();
  std::vector<ArticularRun> runs;
  if (n == 0) return runs;
  const bool all = std::all_of(sb.articular.begin(), sb.articular.end(), [](char v) { return v; });
  if (all) return {{0.0, c.perimeter}};
  std::size_t rot = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (!sb.articular[i] && sb.articular[(i + 1) % n]) {
      rot = (i + 1) % n;
      break;
    }
  auto unwrapped = [&](std::size_t idx) {
    double d = c.arc[idx] - c.arc[rot];
    if (d < 0) d += c.perimeter;
    return c.arc[rot] + d;
  };
  std::size_t k = 0;
  while (k < n) {
    const std::size_t i = (rot + k) % n;
    if (!sb.articular[i]) {
      ++k;
      continue;
    }
    std::size_t end = k;
    while (end + 1 < n && sb.articular[(rot + end + 1) % n]) ++end;
    runs.push_back({unwrapped(i), unwrapped((rot + end) % n)});
    k = end + 1;
  }
  return runs;
}

// Closes cyclic gaps shorter than min_mm, then drops runs shorter than min_mm.
void smooth_flags(std::vector<char>& f, const Contour2D& c, double min_mm) {
  const std::size_t n = f.size();
  if (n == 0) return;
  auto pass = [&](char target) {
    const auto hits = std::count(f.begin(), f.end(), target);
    if (hits == 0 || hits == static_cast<long>(n)) return;
    std::size_t rot = 0;
    while (!(f[rot] == target && f[(rot + n - 1) % n] != target)) ++rot;
    std::size_t k = 0;
    while (k < n) {
      const std::size_t i = (rot + k) % n;
      if (f[i] != target) {
        ++k;
        continue;
      }
      std::size_t end = k;
      while (end + 1 < n && f[(rot + end + 1) % n] == target) ++end;
      double len = c.arc[(rot + end) % n] - c.arc[i];
      if (len < 0) len += c.perimeter;
      if (len < min_mm)
        for (std::size_t m = k; m <= end; ++m) f[(rot + m) % n] = static_cast<char>(!target);
      k = end + 1;
    }
  };
  pass(0);
  pass(1);
}

double unwrap_into(double a, double lo, double perimeter) {
  while (a < lo) a += perimeter;
  return a;
}

}  // namespace

void PhantomSpec::validate() const {
  if (dims[0] < 2 || dims[1] < 16 || dims[2] < 16) throw UsageError("phantom: dims too small");
  if (!(inter_slice_spacing_mm > 0) || !(in_slice_spacing_mm[0] > 0) || !(in_slice_spacing_mm[1] > 0))
    throw UsageError("phantom: spacings must be positive");
  if (n_defects < 0) throw UsageError("phantom: negative defect count");
  if (slice_span < 1) throw UsageError("phantom: defect slice span must be >= 1");
  if (defect_grade == DefectGrade::G1 && !(depth_fraction > 0 && depth_fraction <= 1))
    throw UsageError("phantom: G1 depth fraction must lie in (0, 1]");
  if (!(defect_arc_mm > 0)) throw UsageError("phantom: defect arc must be positive");
  if (noise_sigma < 0) throw UsageError("phantom: negative noise sigma");
  if (static_cast<int>(placements.size()) > n_defects)
    throw UsageError("phantom: more placements than defects");
}

void GroundTruth::validate(int num_slices) const {
  if (static_cast<int>(slice_grades.size()) != num_slices)
    throw DataError("ground truth: slice grade count differs from slice count");
  std::vector<int> expect(slice_grades.size(), 0);
  for (const auto& d : defect_regions) {
    if (d.slice < 0 || d.slice >= num_slices) throw DataError("ground truth: region slice out of range");
    expect[static_cast<std::size_t>(d.slice)] = std::max(expect[static_cast<std::size_t>(d.slice)], d.grade);
  }
  if (expect != slice_grades) throw DataError("ground truth: slice grades differ from region maxima");
  const int mx = slice_grades.empty() ? 0 : *std::max_element(slice_grades.begin(), slice_grades.end());
  if (mx != subject_grade) throw DataError("ground truth: subject grade is not the slice maximum");
}

Phantom generate_phantom_full(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const int S = spec.dims[0], H = spec.dims[1], W = spec.dims[2];
  const double rsp = spec.in_slice_spacing_mm[0], csp = spec.in_slice_spacing_mm[1];
  const double t = spec.inter_slice_spacing_mm;
  const KneeShape shape = sample_shape(spec, rng);

  LabeledVolume vol = make_volume(S, H, W, t, rsp, csp, Laterality::Left);
  for (int s = 0; s < S; ++s) {
    const double z = s * t;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const double x = c * csp, y = r * rsp;
        auto hit = [&](const std::vector<Ellipsoid>& es) {
          return std::any_of(es.begin(), es.end(), [&](const auto& e) { return e.contains(x, y, z); });
        };
        // Higher code wins where shapes overlap.
        std::uint8_t l = 0;
        if (hit(shape.patella)) l = 3;
        else if (hit(shape.tibia)) l = 2;
        else if (hit(shape.femur)) l = 1;
        vol.labels.at(s, r, c) = l;
      }
  }
  vol = refine_labels(vol, 1);

  std::uniform_int_distribution<int> thick_d(2, 4);
  std::array<int, 3> thickness_vox{thick_d(rng), thick_d(rng), thick_d(rng)};
  const double vox = 0.5 * (rsp + csp);

  Grid3<std::uint8_t> band(S, H, W, 0);
  std::vector<std::array<SliceBone, 3>> bones(static_cast<std::size_t>(S));
  for (int s = 0; s < S; ++s) {
    const std::uint8_t* lab = vol.labels.slice_data(s);
    float* img = vol.intensity.slice_data(s);
    const std::size_t npx = vol.labels.slice_size();
    std::array<std::vector<double>, 3> dist;
    std::array<bool, 3> present{};
    for (int b = 0; b < 3; ++b) {
      std::vector<char> fg(npx);
      for (std::size_t i = 0; i < npx; ++i) fg[i] = lab[i] == b + 1;
      present[static_cast<std::size_t>(b)] = std::any_of(fg.begin(), fg.end(), [](char v) { return v; });
      if (present[static_cast<std::size_t>(b)]) dist[static_cast<std::size_t>(b)] = chamfer_distance(fg, H, W, rsp, csp);
    }
    for (std::size_t i = 0; i < npx; ++i) img[i] = lab[i] == 0 ? kBackground : kBoneMarrow;

    for (int b = 0; b < 3; ++b) {
      auto& sb = bones[static_cast<std::size_t>(s)][static_cast<std::size_t>(b)];
      if (!present[static_cast<std::size_t>(b)]) continue;
      sb.present = true;
      morph::Mask m(H, W);
      for (std::size_t i = 0; i < npx; ++i) m.px[i] = lab[i] == b + 1;
      sb.contour = to_physical(trace_boundary(m), rsp, csp);
      const std::size_t n = sb.contour.size();
      sb.articular.assign(n, 0);
      for (std::size_t k = 0; k < n; ++k) {
        const int r = static_cast<int>(std::lround(sb.contour.y[k] / rsp));
        const int c = static_cast<int>(std::lround(sb.contour.x[k] / csp));
        const std::size_t idx = static_cast<std::size_t>(r) * W + c;
        for (int o = 0; o < 3; ++o)
          if (o != b && present[static_cast<std::size_t>(o)] &&
              dist[static_cast<std::size_t>(o)][idx] <= kArticularProximityMm)
            sb.articular[k] = 1;
      }
      smooth_flags(sb.articular, sb.contour, kMinRunMm);
    }
    for (std::size_t i = 0; i < npx; ++i) {
      if (lab[i] != 0) continue;
      int best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (int b = 0; b < 3; ++b)
        if (present[static_cast<std::size_t>(b)] && dist[static_cast<std::size_t>(b)][i] < best_d) {
          best_d = dist[static_cast<std::size_t>(b)][i];
          best = b;
        }
      if (best < 0 || best_d > thickness_vox[static_cast<std::size_t>(best)] * vox + 1e-6) continue;
      auto& sb = bones[static_cast<std::size_t>(s)][static_cast<std::size_t>(best)];
      const double px = static_cast<double>(i % static_cast<std::size_t>(W)) * csp;
      const double py = static_cast<double>(i / static_cast<std::size_t>(W)) * rsp;
      std::size_t nearest = 0;
      double nd = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sb.contour.size(); ++k) {
        const double d = std::hypot(sb.contour.x[k] - px, sb.contour.y[k] - py);
        if (d < nd) {
          nd = d;
          nearest = k;
        }
      }
      if (!sb.articular[nearest]) continue;
      sb.band_pixels.push_back(static_cast<int>(i));
      sb.band_depth.push_back(best_d);
      sb.nearest.push_back(nearest);
      img[i] = kCartilage;
      band.slice_data(s)[i] = static_cast<std::uint8_t>(best + 1);
    }
  }

  GroundTruth gt;
  gt.slice_grades.assign(static_cast<std::size_t>(S), 0);
  const int grade = static_cast<int>(spec.defect_grade);
  const double arc = spec.defect_arc_mm;

  for (int d = 0; d < spec.n_defects; ++d) {
    const DefectPlacement place =
        d < static_cast<int>(spec.placements.size()) ? spec.placements[static_cast<std::size_t>(d)] : DefectPlacement{};
    auto usable = [&](int c, int s) {
      if (s < 0 || s >= S) return false;
      for (const auto& run : articular_runs(bones[static_cast<std::size_t>(s)][static_cast<std::size_t>(c)]))
        if (run.hi - run.lo >= arc) return true;
      return false;
    };
    auto candidate_starts = [&](int c) {
      std::vector<int> out;
      for (int s = 0; s + spec.slice_span <= S; ++s) {
        bool ok = true;
        for (int k = 0; k < spec.slice_span && ok; ++k) ok = usable(c, s + k);
        if (ok) out.push_back(s);
      }
      return out;
    };
    int cart = 0;
    if (place.cartilage_id) {
      cart = *place.cartilage_id;
      if (cart < 0 || cart > 2) throw UsageError("phantom: cartilage id out of range");
    } else {
      std::vector<double> w{0.45, 0.35, 0.20};
      for (int c = 0; c < 3; ++c)
        if (candidate_starts(c).empty()) w[static_cast<std::size_t>(c)] = 0.0;
      if (w[0] + w[1] + w[2] == 0.0)
        throw PlacementError("phantom: no slice range with enough articular surface for the defect");
      cart = std::discrete_distribution<int>(w.begin(), w.end())(rng);
    }
    int first = -1;
    if (place.first_slice) {
      first = *place.first_slice;
    } else {
      const std::vector<int> candidates = candidate_starts(cart);
      if (candidates.empty())
        throw PlacementError("phantom: no slice range with enough articular surface for the defect");
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      first = candidates[pick(rng)];
    }
    const int centre_slice = first + spec.slice_span / 2;
    if (centre_slice < 0 || centre_slice >= S || first + spec.slice_span > S)
      throw PlacementError("phantom: defect slice span leaves the volume");
    const auto& csb = bones[static_cast<std::size_t>(centre_slice)][static_cast<std::size_t>(cart)];
    std::vector<std::size_t> art_points;
    for (std::size_t k = 0; k < csb.articular.size(); ++k)
      if (csb.articular[k]) art_points.push_back(k);
    if (art_points.empty()) throw PlacementError("phantom: no articular surface in the defect slice");
    std::uniform_int_distribution<std::size_t> pick_pt(0, art_points.size() - 1);
    const std::size_t anchor_idx = art_points[pick_pt(rng)];
    const double ax = csb.contour.x[anchor_idx], ay = csb.contour.y[anchor_idx];

    for (int s = first; s < first + spec.slice_span; ++s) {
      auto& sb = bones[static_cast<std::size_t>(s)][static_cast<std::size_t>(cart)];
      if (!sb.present) throw PlacementError("phantom: defect slice lacks the bone");
      const auto runs = articular_runs(sb);
      const double P = sb.contour.perimeter;
      // Point nearest to the anchor on a run long enough for the defect.
      double best = std::numeric_limits<double>::infinity();
      const ArticularRun* run = nullptr;
      double centre = 0;
      for (std::size_t k = 0; k < sb.contour.size(); ++k) {
        if (!sb.articular[k]) continue;
        const double dd = std::hypot(sb.contour.x[k] - ax, sb.contour.y[k] - ay);
        if (dd >= best) continue;
        for (const auto& r : runs) {
          const double a = unwrap_into(sb.contour.arc[k], r.lo, P);
          if (a <= r.hi + 1e-9) {
            if (r.hi - r.lo >= arc) {
              best = dd;
              run = &r;
              centre = a;
            }
            break;
          }
        }
      }
      if (!run) throw PlacementError("phantom: defect arc exceeds available surface length");
      centre = std::clamp(centre, run->lo + arc / 2, run->hi - arc / 2);
      double lo = std::fmod(centre - arc / 2, P);
      if (lo < 0) lo += P;
      gt.defect_regions.push_back({cart, s, lo, lo + arc, grade});

      const double keep_depth = thickness_vox[static_cast<std::size_t>(cart)] * vox *
                                (1.0 - spec.depth_fraction) + 1e-6;
      float* img = vol.intensity.slice_data(s);
      for (std::size_t k = 0; k < sb.band_pixels.size(); ++k) {
        if (!in_cyclic_interval(sb.contour.arc[sb.nearest[k]], lo, lo + arc, P)) continue;
        float& v = img[sb.band_pixels[k]];
        if (spec.defect_grade == DefectGrade::G2) {
          v = 0.0f;
        } else if (v > 0.0f) {
          v = sb.band_depth[k] <= keep_depth ? std::min(v, kG1Fraction * kCartilage) : kBackground;
        }
      }
      gt.slice_grades[static_cast<std::size_t>(s)] = std::max(gt.slice_grades[static_cast<std::size_t>(s)], grade);
    }
  }
  gt.subject_grade = *std::max_element(gt.slice_grades.begin(), gt.slice_grades.end());

  if (spec.noise_sigma > 0) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_sigma));
    for (float& v : vol.intensity.raw()) v += noise(rng);
  }

  if (spec.laterality == Laterality::Right) {
    // Built as a left knee; store mirrored along the slice axis.
    vol.laterality = Laterality::Right;
    LabeledVolume mirrored = flip_right_knee(vol);
    mirrored.laterality = Laterality::Right;
    vol = std::move(mirrored);
    Grid3<std::uint8_t> mb(S, H, W, 0);
    for (int s = 0; s < S; ++s)
      std::copy_n(band.slice_data(S - 1 - s), band.slice_size(), mb.slice_data(s));
    band = std::move(mb);
    std::reverse(gt.slice_grades.begin(), gt.slice_grades.end());
    for (auto& r : gt.defect_regions) r.slice = S - 1 - r.slice;
  }
  gt.validate(S);
  return {std::move(vol), std::move(gt), std::move(band)};
}

std::pair<LabeledVolume, GroundTruth> generate_phantom(const PhantomSpec& spec) {
  Phantom p = generate_phantom_full(spec);
  return {std::move(p.volume), std::move(p.truth)};
}

Phantom generate_phantom_with_retry(PhantomSpec spec, int attempts) {
  for (int a = 0;; ++a) {
    try {
      return generate_phantom_full(spec);
    } catch (const PlacementError&) {
      if (a + 1 >= attempts) throw;
      spec.seed = spec.seed * 6364136223846793005ull + 1442695040888963407ull;
    }
  }
}

std::vector<int> label_patches(const LabeledVolume& vol, const GroundTruth& gt,
                               const std::vector<SurfaceVertex>& vertices,
                               const GraphBuildConfig& cfg) {
  const int S = vol.slices();
  const bool mirrored = vol.laterality == Laterality::Right;
  const LabeledVolume proc = flip_right_knee(refine_labels(vol, cfg.opening_radius_vox));
  const double half = cfg.patch_extent_mm() / 2.0;

  // Contour points covered by each defect region, in graph slice order.
  struct RegionPoints {
    int slice;
    int grade;
    std::vector<std::array<double, 2>> pts;
  };
  std::vector<RegionPoints> regions;
  for (const auto& d : gt.defect_regions) {
    const int gs = mirrored ? S - 1 - d.slice : d.slice;
    if (gs < 0 || gs >= S) throw DataError("label_patches: defect slice out of range");
    morph::Mask m(proc.rows(), proc.cols());
    const std::uint8_t* lab = proc.labels.slice_data(gs);
    for (std::size_t i = 0; i < m.px.size(); ++i) m.px[i] = lab[i] == d.cartilage_id + 1;
    const Contour2D c = to_physical(trace_boundary(m), proc.row_spacing(), proc.col_spacing());
    RegionPoints rp{gs, d.grade, {}};
    if (c.size() == 0) continue;
    for (std::size_t k = 0; k < c.size(); ++k)
      if (in_cyclic_interval(c.arc[k], d.arc_lo_mm, d.arc_hi_mm, c.perimeter))
        rp.pts.push_back({c.x[k], c.y[k]});
    for (double a : {d.arc_lo_mm, d.arc_hi_mm}) {
      double x, y;
      c.point_at(a, &x, &y);
      rp.pts.push_back({x, y});
    }
    regions.push_back(std::move(rp));
  }

  const double xmax = (vol.cols() - 1) * vol.col_spacing();
  const double ymax = (vol.rows() - 1) * vol.row_spacing();
  std::vector<int> out(vertices.size(), 0);
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const auto& v = vertices[i];
    const double x = v.coord_mm[1], y = v.coord_mm[2];
    if (v.slice_index < 0 || v.slice_index >= S || x < -1e-3 || y < -1e-3 || x > xmax + 1e-3 ||
        y > ymax + 1e-3)
      throw DataError("label_patches: vertex outside volume bounds");
    for (const auto& rp : regions) {
      if (rp.slice != v.slice_index || rp.grade <= out[i]) continue;
      const bool hit = std::any_of(rp.pts.begin(), rp.pts.end(), [&](const auto& p) {
        return std::abs(p[0] - x) <= half && std::abs(p[1] - y) <= half;
      });
      if (hit) out[i] = rp.grade;
    }
  }
  return out;
}

void attach_ground_truth(CartilageGraph& g, const LabeledVolume& vol, const GroundTruth& gt,
                         const GraphBuildConfig& cfg) {
  g.subject_grade = gt.subject_grade;
  g.slice_grades = gt.slice_grades;
  if (vol.laterality == Laterality::Right) std::reverse(g.slice_grades.begin(), g.slice_grades.end());
  g.patch_grades = label_patches(vol, gt, g.vertices, cfg);
}

std::vector<PhantomSpec> make_dataset_specs(const DatasetOptions& opt) {
  if (opt.n_subjects < 0) throw UsageError("dataset: negative subject count");
  std::mt19937_64 rng(opt.seed);
  const int n = opt.n_subjects;

  // Largest-remainder allocation of grades.
  const double total = opt.grade_mix[0] + opt.grade_mix[1] + opt.grade_mix[2];
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (std::size_t g = 0; g < 3; ++g) {
    const double exact = n * opt.grade_mix[g] / total;
    counts[g] = static_cast<int>(std::floor(exact));
    rem[g] = exact - counts[g];
    assigned += counts[g];
  }
  while (assigned < n) {
    const auto g = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++counts[g];
    rem[g] = -1.0;
    ++assigned;
  }
  std::vector<int> grades;
  for (int g = 0; g < 3; ++g) grades.insert(grades.end(), static_cast<std::size_t>(counts[static_cast<std::size_t>(g)]), g);
  std::shuffle(grades.begin(), grades.end(), rng);

  // Slice counts and spacings follow the cohort proportions.
  std::discrete_distribution<int> slices_d({46.0, 770.0, 389.0});
  std::uniform_int_distribution<int> many_slices(22, 29);
  std::discrete_distribution<int> spacing_d({382.0, 43.0, 780.0});
  std::uniform_int_distribution<int> mid_spacing(0, 6);  // 3.6 .. 4.2 in 0.1 steps
  std::uniform_real_distribution<double> arc_d(opt.defect_arc_mm[0], opt.defect_arc_mm[1]);
  std::uniform_int_distribution<int> span_d(opt.slice_span[0], opt.slice_span[1]);
  std::uniform_int_distribution<int> n_g1(1, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<PhantomSpec> specs;
  specs.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    PhantomSpec s;
    s.seed = rng();
    const int sc = slices_d(rng);
    s.dims = {sc == 0 ? 18 : sc == 1 ? 20 : many_slices(rng), opt.in_slice_dims[0], opt.in_slice_dims[1]};
    if (opt.fixed_slices) s.dims[0] = *opt.fixed_slices;
    const int tc = spacing_d(rng);
    s.inter_slice_spacing_mm = tc == 0 ? 3.3 : tc == 2 ? 4.5 : 3.6 + 0.1 * mid_spacing(rng);
    if (opt.fixed_spacing_mm) s.inter_slice_spacing_mm = *opt.fixed_spacing_mm;
    s.in_slice_spacing_mm = {opt.in_slice_spacing_mm, opt.in_slice_spacing_mm};
    s.noise_sigma = opt.noise_sigma;
    s.laterality = unit(rng) < opt.right_knee_fraction ? Laterality::Right : Laterality::Left;
    const int g = grades[static_cast<std::size_t>(i)];
    s.defect_arc_mm = arc_d(rng);
    s.slice_span = span_d(rng);
    const int extra = n_g1(rng);
    if (g == 0) {
      s.n_defects = 0;
    } else if (g == 1) {
      s.n_defects = extra;
      s.defect_grade = DefectGrade::G1;
    } else {
      s.n_defects = 1;
      s.defect_grade = DefectGrade::G2;
    }
    specs.push_back(s);
  }
  return specs;
}

std::string to_json(const GroundTruth& gt) {
  nlohmann::json j;
  j["subject_grade"] = gt.subject_grade;
  j["slice_grades"] = gt.slice_grades;
  j["defect_regions"] = nlohmann::json::array();
  for (const auto& d : gt.defect_regions)
    j["defect_regions"].push_back({{"cartilage_id", d.cartilage_id},
                                   {"slice", d.slice},
                                   {"arc_mm", {d.arc_lo_mm, d.arc_hi_mm}},
                                   {"grade", d.grade}});
  return j.dump(2);
}

GroundTruth ground_truth_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    GroundTruth gt;
    gt.subject_grade = j.at("subject_grade").get<int>();
    gt.slice_grades = j.at("slice_grades").get<std::vector<int>>();
    for (const auto& d : j.at("defect_regions")) {
      const auto arc = d.at("arc_mm").get<std::array<double, 2>>();
      gt.defect_regions.push_back({d.at("cartilage_id").get<int>(), d.at("slice").get<int>(), arc[0],
                                   arc[1], d.at("grade").get<int>()});
    }
    gt.validate(static_cast<int>(gt.slice_grades.size()));
    return gt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ground truth JSON: ") + e.what());
  }
}

void save_ground_truth(const GroundTruth& gt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(gt) << '\n';
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing ground truth " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ground_truth_from_json(ss.str());
}

}  // namespace csnet
