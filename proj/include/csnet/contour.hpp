#pragma once

#include <vector>

#include "csnet/morphology.hpp"

namespace csnet {

struct Pixel {
  int row = 0;
  int col = 0;
  bool operator==(const Pixel&) const = default;
};

// Moore-neighbour boundary trace of the component holding the first
// foreground pixel in raster order. The result is a closed cycle (first and
// last pixels are 8-adjacent, the start is not repeated) oriented
// counter-clockwise in (x = col, y = row) coordinates and starting at that
// raster-first pixel. Empty mask gives an empty contour.
std::vector<Pixel> trace_boundary(const morph::Mask& mask);

// Physical 2D contour with cumulative arc length.
struct Contour2D {
  std::vector<double> x;    // mm, anterior-posterior
  std::vector<double> y;    // mm, superior-inferior
  std::vector<double> arc;  // arc[i] = length from point 0 to point i
  double perimeter = 0.0;   // includes the closing segment back to point 0

  std::size_t size() const { return x.size(); }
  // Point at cyclic arc position `a` (taken modulo the perimeter), linearly
  // interpolated between traced pixel centres.
  void point_at(double a, double* px, double* py) const;
};

Contour2D to_physical(const std::vector<Pixel>& pixels, double row_spacing, double col_spacing);

}  // namespace csnet
