#include "csnet/volume.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <string>

#include "json.hpp"

#include "csnet/error.hpp"
#include "csnet/morphology.hpp"

namespace csnet {

static_assert(std::endian::native == std::endian::little,
              "volume payloads are written as native little-endian bytes");

namespace fs = std::filesystem;
using nlohmann::json;

void LabeledVolume::validate() const {
  if (intensity.dims() != labels.dims())
    throw DataError("volume: intensity and label dimensions differ");
  if (labels.slices() < 2) throw DataError("volume: at least two slices required");
  if (labels.rows() < 1 || labels.cols() < 1) throw DataError("volume: empty slice");
  if (!(inter_slice_spacing_mm > 0) || !(in_slice_spacing_mm[0] > 0) ||
      !(in_slice_spacing_mm[1] > 0))
    throw DataError("volume: spacings must be strictly positive");
  for (auto v : labels.raw())
    if (v > kMaxLabel) throw DataError("volume: unknown label code " + std::to_string(v));
}

LabeledVolume make_volume(int slices, int rows, int cols, double t, double row_sp,
                          double col_sp, Laterality lat) {
  LabeledVolume v;
  v.intensity = Grid3<float>(slices, rows, cols, 0.0f);
  v.labels = Grid3<std::uint8_t>(slices, rows, cols, 0);
  v.inter_slice_spacing_mm = t;
  v.in_slice_spacing_mm = {row_sp, col_sp};
  v.laterality = lat;
  return v;
}

namespace {

template <typename T>
void write_raw(const fs::path& p, const std::vector<T>& data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!out) throw DataError("short write to " + p.string());
}

std::vector<char> read_raw(const fs::path& p, std::size_t expected_bytes) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("missing payload " + p.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != expected_bytes)
    throw DataError("payload size mismatch in " + p.string() + ": expected " +
                    std::to_string(expected_bytes) + " bytes, found " + std::to_string(size));
  in.seekg(0);
  std::vector<char> buf(size);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  return buf;
}

}  // namespace

void save_volume(const LabeledVolume& vol, const fs::path& header_path) {
  vol.validate();
  const std::string stem = header_path.stem().string();
  const std::string inten_name = stem + ".intensity.raw";
  const std::string label_name = stem + ".labels.raw";
  const fs::path dir = header_path.parent_path();

  json h;
  h["dims"] = {vol.slices(), vol.rows(), vol.cols()};
  h["dtype"] = "f32";
  h["spacing_mm"] = {vol.inter_slice_spacing_mm, vol.in_slice_spacing_mm[0],
                     vol.in_slice_spacing_mm[1]};
  h["laterality"] = vol.laterality == Laterality::Right ? "right" : "left";
  h["intensity"] = inten_name;
  h["labels"] = label_name;

  write_raw(dir / inten_name, vol.intensity.raw());
  write_raw(dir / label_name, vol.labels.raw());
  std::ofstream out(header_path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + header_path.string());
  out << h.dump(2) << '\n';
}

LabeledVolume load_volume(const fs::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw DataError("missing volume header " + header_path.string());
  json h;
  try {
    h = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed volume header " + header_path.string() + ": " + e.what());
  }
  try {
    const auto dims = h.at("dims").get<std::vector<int>>();
    const auto spacing = h.at("spacing_mm").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3)
      throw DataError("volume header: dims and spacing_mm need three entries");
    if (dims[0] < 0 || dims[1] < 0 || dims[2] < 0) throw DataError("volume header: negative dims");
    const std::string dtype = h.at("dtype").get<std::string>();
    const std::string lat = h.at("laterality").get<std::string>();
    if (lat != "left" && lat != "right") throw DataError("volume header: bad laterality " + lat);

    LabeledVolume v = make_volume(dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2],
                                  lat == "right" ? Laterality::Right : Laterality::Left);
    const fs::path dir = header_path.parent_path();
    const std::size_t n = v.labels.size();

    if (dtype == "f32") {
      auto buf = read_raw(dir / h.at("intensity").get<std::string>(), n * sizeof(float));
      std::copy_n(reinterpret_cast<const float*>(buf.data()), n, v.intensity.raw().begin());
    } else if (dtype == "u8") {
      auto buf = read_raw(dir / h.at("intensity").get<std::string>(), n);
      std::transform(buf.begin(), buf.end(), v.intensity.raw().begin(),
                     [](char b) { return static_cast<float>(static_cast<unsigned char>(b)); });
    } else {
      throw DataError("volume header: unsupported dtype " + dtype);
    }
    auto lbuf = read_raw(dir / h.at("labels").get<std::string>(), n);
    std::copy_n(reinterpret_cast<const std::uint8_t*>(lbuf.data()), n, v.labels.raw().begin());
    v.validate();
    return v;
  } catch (const json::exception& e) {
    throw DataError("volume header " + header_path.string() + ": " + e.what());
  }
}

namespace {

// One pass over every bone label of one slice. Returns true if anything changed.
bool refine_slice(LabeledVolume& v, int s, int radius) {
  const int rows = v.rows(), cols = v.cols();
  std::uint8_t* lab = v.labels.slice_data(s);
  bool changed = false;
  for (std::uint8_t bone = 1; bone <= kMaxLabel; ++bone) {
    morph::Mask m(rows, cols);
    for (std::size_t i = 0; i < m.px.size(); ++i) m.px[i] = lab[i] == bone;
    if (m.empty()) continue;
    const morph::Mask refined = morph::largest_component(morph::fill_holes(morph::open_disk(m, radius)));
    for (std::size_t i = 0; i < m.px.size(); ++i) {
      if (m.px[i] && !refined.px[i]) {
        lab[i] = 0;
        changed = true;
      } else if (!m.px[i] && refined.px[i] && lab[i] == 0) {
        lab[i] = bone;
        changed = true;
      }
    }
  }
  return changed;
}

}  // namespace

LabeledVolume refine_labels(const LabeledVolume& vol, int opening_radius_vox) {
  if (opening_radius_vox < 0) throw UsageError("refine_labels: negative opening radius");
  LabeledVolume out = vol;
  constexpr int kMaxPasses = 16;
  for (int s = 0; s < out.slices(); ++s)
    for (int pass = 0; pass < kMaxPasses && refine_slice(out, s, opening_radius_vox); ++pass) {
    }
  return out;
}

LabeledVolume flip_right_knee(const LabeledVolume& vol) {
  if (vol.laterality != Laterality::Right) return vol;
  LabeledVolume out = vol;
  const int S = vol.slices();
  const std::size_t n = vol.labels.slice_size();
  for (int s = 0; s < S; ++s) {
    std::copy_n(vol.intensity.slice_data(S - 1 - s), n, out.intensity.slice_data(s));
    std::copy_n(vol.labels.slice_data(S - 1 - s), n, out.labels.slice_data(s));
  }
  out.laterality = Laterality::Left;
  return out;
}

}  // namespace csnet
