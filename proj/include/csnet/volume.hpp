#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace csnet {

enum class Laterality : std::uint8_t { Left, Right };

// Bone label codes stored per voxel.
enum class Bone : std::uint8_t { Background = 0, Femur = 1, Tibia = 2, Patella = 3 };

inline constexpr std::uint8_t kMaxLabel = 3;

// Dense slice-major grid: index = (s * rows + r) * cols + c.
template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  Grid3(int slices, int rows, int cols, T fill = T{})
      : slices_(slices), rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(slices) * rows * cols, fill) {}

  int slices() const { return slices_; }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::array<int, 3> dims() const { return {slices_, rows_, cols_}; }
  std::size_t size() const { return data_.size(); }
  std::size_t slice_size() const { return static_cast<std::size_t>(rows_) * cols_; }

  T& at(int s, int r, int c) { return data_[index(s, r, c)]; }
  const T& at(int s, int r, int c) const { return data_[index(s, r, c)]; }

  bool contains(int s, int r, int c) const {
    return s >= 0 && s < slices_ && r >= 0 && r < rows_ && c >= 0 && c < cols_;
  }

  T* slice_data(int s) { return data_.data() + static_cast<std::size_t>(s) * slice_size(); }
  const T* slice_data(int s) const {
    return data_.data() + static_cast<std::size_t>(s) * slice_size();
  }

  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  bool operator==(const Grid3&) const = default;

 private:
  std::size_t index(int s, int r, int c) const {
    return (static_cast<std::size_t>(s) * rows_ + r) * cols_ + c;
  }

  int slices_ = 0;
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

// Sagittal knee volume. Slices run left-right, rows run superior to inferior
// (y), columns run anterior to posterior (x). Physical position of voxel
// (s, r, c) is (s * t, c * col_spacing, r * row_spacing) in (s, x, y) order.
struct LabeledVolume {
  Grid3<float> intensity;
  Grid3<std::uint8_t> labels;
  double inter_slice_spacing_mm = 1.0;
  std::array<double, 2> in_slice_spacing_mm{1.0, 1.0};  // (row, col)
  Laterality laterality = Laterality::Left;

  int slices() const { return labels.slices(); }
  int rows() const { return labels.rows(); }
  int cols() const { return labels.cols(); }
  double row_spacing() const { return in_slice_spacing_mm[0]; }
  double col_spacing() const { return in_slice_spacing_mm[1]; }

  // Throws DataError when an invariant is violated.
  void validate() const;

  bool operator==(const LabeledVolume&) const = default;
};

LabeledVolume make_volume(int slices, int rows, int cols, double t, double row_sp,
                          double col_sp, Laterality lat = Laterality::Left);

// Volume bundle: JSON header at `header_path` plus two raw little-endian
// payload files written next to it.
void save_volume(const LabeledVolume& vol, const std::filesystem::path& header_path);
LabeledVolume load_volume(const std::filesystem::path& header_path);

// Slice-wise morphological clean-up of every bone label: opening with a disk
// of the given radius, hole filling, then keeping the largest 4-connected
// component. Repeated until stable, so the result is a fixed point.
LabeledVolume refine_labels(const LabeledVolume& vol, int opening_radius_vox = 1);

// Right knees are mirrored along the slice axis and relabeled Left.
LabeledVolume flip_right_knee(const LabeledVolume& vol);

}  // namespace csnet
