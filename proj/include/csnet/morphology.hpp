#pragma once

#include <cstdint>
#include <vector>

namespace csnet::morph {

// Row-major binary image; nonzero is foreground.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> px;

  Mask() = default;
  Mask(int r, int c) : rows(r), cols(c), px(static_cast<std::size_t>(r) * c, 0) {}

  bool get(int r, int c) const {
    return r >= 0 && r < rows && c >= 0 && c < cols && px[static_cast<std::size_t>(r) * cols + c];
  }
  void set(int r, int c, bool v) { px[static_cast<std::size_t>(r) * cols + c] = v ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const Mask&) const = default;
};

Mask erode_disk(const Mask& m, int radius);
Mask dilate_disk(const Mask& m, int radius);
Mask open_disk(const Mask& m, int radius);

// Background pixels not 4-connected to the image border become foreground.
Mask fill_holes(const Mask& m);

// 4-connected component labels (0 = background, 1..n in raster discovery
// order) and the component count.
std::vector<int> label_components(const Mask& m, int* count);

// Largest 4-connected component; ties go to the component found first in
// raster order.
Mask largest_component(const Mask& m);

}  // namespace csnet::morph
