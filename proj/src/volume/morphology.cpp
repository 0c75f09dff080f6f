#include "csnet/morphology.hpp"

#include <algorithm>
#include <deque>
#include <utility>

namespace csnet::morph {
namespace {

std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> out;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= radius * radius) out.emplace_back(dy, dx);
  return out;
}

constexpr int kDr4[4] = {-1, 1, 0, 0};
constexpr int kDc4[4] = {0, 0, -1, 1};

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(px.begin(), px.end(), [](auto v) { return v != 0; }));
}

Mask erode_disk(const Mask& m, int radius) {
  if (radius <= 0) return m;
  const auto offs = disk_offsets(radius);
  Mask out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      if (!m.get(r, c)) continue;
      bool keep = std::all_of(offs.begin(), offs.end(),
                              [&](auto o) { return m.get(r + o.first, c + o.second); });
      out.set(r, c, keep);
    }
  return out;
}

Mask dilate_disk(const Mask& m, int radius) {
  if (radius <= 0) return m;
  const auto offs = disk_offsets(radius);
  Mask out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      if (!m.get(r, c)) continue;
      for (auto [dy, dx] : offs) {
        const int rr = r + dy, cc = c + dx;
        if (rr >= 0 && rr < m.rows && cc >= 0 && cc < m.cols) out.set(rr, cc, true);
      }
    }
  return out;
}

Mask open_disk(const Mask& m, int radius) { return dilate_disk(erode_disk(m, radius), radius); }

Mask fill_holes(const Mask& m) {
  Mask outside(m.rows, m.cols);
  std::deque<std::pair<int, int>> queue;
  auto seed = [&](int r, int c) {
    if (!m.get(r, c) && !outside.get(r, c)) {
      outside.set(r, c, true);
      queue.emplace_back(r, c);
    }
  };
  for (int r = 0; r < m.rows; ++r) {
    seed(r, 0);
    seed(r, m.cols - 1);
  }
  for (int c = 0; c < m.cols; ++c) {
    seed(0, c);
    seed(m.rows - 1, c);
  }
  while (!queue.empty()) {
    auto [r, c] = queue.front();
    queue.pop_front();
    for (int k = 0; k < 4; ++k) {
      const int rr = r + kDr4[k], cc = c + kDc4[k];
      if (rr >= 0 && rr < m.rows && cc >= 0 && cc < m.cols) seed(rr, cc);
    }
  }
  Mask out(m.rows, m.cols);
  for (std::size_t i = 0; i < out.px.size(); ++i) out.px[i] = outside.px[i] ? 0 : 1;
  return out;
}

std::vector<int> label_components(const Mask& m, int* count) {
  std::vector<int> lab(m.px.size(), 0);
  int next = 0;
  std::deque<std::pair<int, int>> queue;
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * m.cols + c;
      if (!m.px[i] || lab[i]) continue;
      ++next;
      lab[i] = next;
      queue.emplace_back(r, c);
      while (!queue.empty()) {
        auto [qr, qc] = queue.front();
        queue.pop_front();
        for (int k = 0; k < 4; ++k) {
          const int rr = qr + kDr4[k], cc = qc + kDc4[k];
          if (!m.get(rr, cc)) continue;
          const std::size_t j = static_cast<std::size_t>(rr) * m.cols + cc;
          if (lab[j]) continue;
          lab[j] = next;
          queue.emplace_back(rr, cc);
        }
      }
    }
  if (count) *count = next;
  return lab;
}

Mask largest_component(const Mask& m) {
  int n = 0;
  const auto lab = label_components(m, &n);
  Mask out(m.rows, m.cols);
  if (n == 0) return out;
  std::vector<std::size_t> area(static_cast<std::size_t>(n) + 1, 0);
  for (int l : lab) ++area[static_cast<std::size_t>(l)];
  int best = 1;
  for (int l = 2; l <= n; ++l)
    if (area[static_cast<std::size_t>(l)] > area[static_cast<std::size_t>(best)]) best = l;
  for (std::size_t i = 0; i < lab.size(); ++i) out.px[i] = lab[i] == best ? 1 : 0;
  return out;
}

}  // namespace csnet::morph
