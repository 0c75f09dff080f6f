#include <algorithm>

#include "csnet/error.hpp"
#include "csnet/pipeline.hpp"

namespace csnet {

Groups GraphBatch::subject_groups() const {
  Groups g;
  for (const auto& r : ranges) {
    std::vector<std::uint32_t> idx(r.length);
    for (std::uint32_t i = 0; i < r.length; ++i) idx[i] = r.start + i;
    g.add(idx);
  }
  return g;
}

std::vector<int> GraphBatch::subject_labels() const {
  std::vector<int> out;
  for (const auto& h : headers) {
    if (!h.subject_grade) throw DataError("batch: subject " + h.subject_id + " has no grade");
    out.push_back(*h.subject_grade);
  }
  return out;
}

GraphBatch batch_merge(const std::vector<const CartilageGraph*>& graphs) {
  if (graphs.empty()) throw UsageError("batch_merge: no graphs");
  GraphBatch b;
  for (const CartilageGraph* g : graphs) {
    const auto start = static_cast<std::uint32_t>(b.vertices.size());
    const auto n = static_cast<std::uint32_t>(g->size());
    if (n == 0) throw DataError("batch_merge: empty graph " + g->subject_id);
    if (g->adjacency.num_vertices() != n) throw DataError("batch_merge: adjacency size mismatch in " + g->subject_id);
    b.ranges.push_back({start, n});
    b.vertices.insert(b.vertices.end(), g->vertices.begin(), g->vertices.end());
    const auto c = normalized_coords(*g);
    b.coords.insert(b.coords.end(), c.begin(), c.end());
    const auto base = static_cast<std::uint32_t>(b.adjacency.cols.size());
    for (std::size_t i = 1; i < g->adjacency.row_ptr.size(); ++i) b.adjacency.row_ptr.push_back(base + g->adjacency.row_ptr[i]);
    for (auto c2 : g->adjacency.cols) b.adjacency.cols.push_back(c2 + start);
    b.adjacency.kinds.insert(b.adjacency.kinds.end(), g->adjacency.kinds.begin(), g->adjacency.kinds.end());
    CartilageGraph h = *g;
    h.vertices.clear();
    h.adjacency = Adjacency{};
    b.headers.push_back(std::move(h));
  }
  return b;
}

GraphBatch batch_merge(const std::vector<CartilageGraph>& graphs) {
  std::vector<const CartilageGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  return batch_merge(ptrs);
}

void check_batch(const GraphBatch& b) {
  if (b.headers.size() != b.ranges.size()) throw DataError("batch: header count differs from range count");
  std::uint32_t expect = 0;
  for (const auto& r : b.ranges) {
    if (r.start != expect || r.length == 0) throw DataError("batch: subgraph ranges do not tile the vertex set");
    expect += r.length;
  }
  if (expect != b.vertices.size()) throw DataError("batch: ranges do not cover every vertex");
  if (b.adjacency.num_vertices() != b.vertices.size()) throw DataError("batch: adjacency size mismatch");
  if (b.coords.size() != 3 * b.vertices.size()) throw DataError("batch: coordinate table size mismatch");
  for (const auto& r : b.ranges)
    for (std::uint32_t i = r.start; i < r.start + r.length; ++i)
      for (auto e = b.adjacency.row_ptr[i]; e < b.adjacency.row_ptr[i + 1]; ++e)
        if (b.adjacency.cols[e] < r.start || b.adjacency.cols[e] >= r.start + r.length)
          throw DataError("batch: edge crosses a subgraph boundary");
}

std::vector<CartilageGraph> batch_split(const GraphBatch& b) {
  check_batch(b);
  std::vector<CartilageGraph> out;
  for (std::size_t k = 0; k < b.ranges.size(); ++k) {
    const auto& r = b.ranges[k];
    CartilageGraph g = b.headers[k];
    g.vertices.assign(b.vertices.begin() + r.start, b.vertices.begin() + r.start + r.length);
    const auto base = b.adjacency.row_ptr[r.start];
    for (std::uint32_t i = r.start; i < r.start + r.length; ++i) {
      for (auto e = b.adjacency.row_ptr[i]; e < b.adjacency.row_ptr[i + 1]; ++e) {
        g.adjacency.cols.push_back(b.adjacency.cols[e] - r.start);
        g.adjacency.kinds.push_back(b.adjacency.kinds[e]);
      }
      g.adjacency.row_ptr.push_back(b.adjacency.row_ptr[i + 1] - base);
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <typename T>
GraphInput<T> make_batch_input(const GraphBatch& b) {
  check_batch(b);
  GraphInput<T> in;
  const int n = static_cast<int>(b.size());
  const int p = b.headers.front().patch_size_px;
  const std::size_t pp = static_cast<std::size_t>(p) * p;
  in.patches = nd::Tensor<T>({n, p, p, 1});
  for (int i = 0; i < n; ++i) {
    const auto& patch = b.vertices[static_cast<std::size_t>(i)].patch;
    if (patch.size() != pp) throw DataError("batch input: patch sizes differ across subjects");
    std::copy(patch.begin(), patch.end(), in.patches.data.begin() + static_cast<std::ptrdiff_t>(i * pp));
  }
  in.coords = nd::Tensor<T>({n, 3});
  std::transform(b.coords.begin(), b.coords.end(), in.coords.data.begin(), [](double v) { return static_cast<T>(v); });
  in.row_ptr = b.adjacency.row_ptr;
  in.cols = b.adjacency.cols;
  return in;
}

template GraphInput<float> make_batch_input<float>(const GraphBatch&);
template GraphInput<double> make_batch_input<double>(const GraphBatch&);

}  // namespace csnet
