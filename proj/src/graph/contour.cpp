#include "csnet/contour.hpp"

#include <algorithm>
#include <cmath>

namespace csnet {
namespace {

// Clockwise on screen (rows grow downward), starting west.
constexpr int kDr[8] = {0, -1, -1, -1, 0, 1, 1, 1};
constexpr int kDc[8] = {-1, -1, 0, 1, 1, 1, 0, -1};

int direction_of(int dr, int dc) {
  for (int k = 0; k < 8; ++k)
    if (kDr[k] == dr && kDc[k] == dc) return k;
  return -1;
}

}  // namespace

std::vector<Pixel> trace_boundary(const morph::Mask& mask) {
  Pixel start{-1, -1};
  for (int r = 0; r < mask.rows && start.row < 0; ++r)
    for (int c = 0; c < mask.cols; ++c)
      if (mask.get(r, c)) {
        start = {r, c};
        break;
      }
  if (start.row < 0) return {};

  std::vector<Pixel> out{start};
  Pixel cur = start;
  int backtrack = 0;  // west of the raster-first pixel is background
  Pixel second{-1, -1};
  // Each boundary pixel is entered at most a handful of times.
  const std::size_t guard = 8 * mask.px.size() + 8;
  for (std::size_t step = 0; step < guard; ++step) {
    int found = -1;
    for (int k = 1; k <= 8; ++k) {
      const int d = (backtrack + k) % 8;
      if (mask.get(cur.row + kDr[d], cur.col + kDc[d])) {
        found = d;
        break;
      }
    }
    if (found < 0) break;  // isolated pixel
    const Pixel next{cur.row + kDr[found], cur.col + kDc[found]};
    // Jacob's criterion: stop when the first move is about to repeat.
    if (cur == start && second.row >= 0 && next == second) break;
    if (second.row < 0) second = next;
    const int prev = (found + 7) % 8;
    const Pixel b{cur.row + kDr[prev], cur.col + kDc[prev]};
    backtrack = direction_of(b.row - next.row, b.col - next.col);
    cur = next;
    if (cur == start) continue;
    out.push_back(cur);
  }

  // Shoelace in (x=col, y=row); positive means counter-clockwise.
  double area2 = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Pixel& a = out[i];
    const Pixel& b = out[(i + 1) % out.size()];
    area2 += static_cast<double>(a.col) * b.row - static_cast<double>(b.col) * a.row;
  }
  if (area2 < 0) std::reverse(out.begin() + 1, out.end());
  return out;
}

Contour2D to_physical(const std::vector<Pixel>& pixels, double row_spacing, double col_spacing) {
  Contour2D c;
  const std::size_t n = pixels.size();
  c.x.resize(n);
  c.y.resize(n);
  c.arc.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.x[i] = pixels[i].col * col_spacing;
    c.y[i] = pixels[i].row * row_spacing;
    c.arc[i] = i == 0 ? 0.0 : c.arc[i - 1] + std::hypot(c.x[i] - c.x[i - 1], c.y[i] - c.y[i - 1]);
  }
  c.perimeter = n == 0 ? 0.0 : c.arc[n - 1] + std::hypot(c.x[0] - c.x[n - 1], c.y[0] - c.y[n - 1]);
  return c;
}

void Contour2D::point_at(double a, double* px, double* py) const {
  const std::size_t n = size();
  if (n == 1 || perimeter <= 0) {
    *px = x.front();
    *py = y.front();
    return;
  }
  a = std::fmod(a, perimeter);
  if (a < 0) a += perimeter;
  // Segment i runs from point i to point (i+1) mod n.
  auto it = std::upper_bound(arc.begin(), arc.end(), a);
  const std::size_t i = static_cast<std::size_t>(std::distance(arc.begin(), it)) - 1;
  const std::size_t j = (i + 1) % n;
  const double seg_end = j == 0 ? perimeter : arc[j];
  const double len = seg_end - arc[i];
  const double f = len > 0 ? (a - arc[i]) / len : 0.0;
  *px = x[i] + f * (x[j] - x[i]);
  *py = y[i] + f * (y[j] - y[i]);
}

}  // namespace csnet
