#include <cstring>
#include <fstream>
#include <iterator>

#include "csnet/error.hpp"
#include "csnet/graph.hpp"

namespace csnet {
namespace {

constexpr char kMagic[4] = {'C', 'S', 'G', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kHasSubjectGrade = 1u << 0;
constexpr std::uint32_t kHasSliceGrades = 1u << 1;
constexpr std::uint32_t kHasPatchGrades = 1u << 2;

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t n) : data_(data), n_(n) {}
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* out, std::size_t n) {
    if (pos_ + n > n_) throw DataError("graph file truncated");
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  const char* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_graph(const CartilageGraph& g, const std::filesystem::path& path) {
  const std::uint32_t n = static_cast<std::uint32_t>(g.size());
  const std::uint32_t e = static_cast<std::uint32_t>(g.adjacency.num_entries());
  const std::size_t pp = static_cast<std::size_t>(g.patch_size_px) * g.patch_size_px;
  std::uint32_t flags = 0;
  if (g.subject_grade) flags |= kHasSubjectGrade;
  if (!g.slice_grades.empty()) flags |= kHasSliceGrades;
  if (!g.patch_grades.empty()) flags |= kHasPatchGrades;

  Writer w;
  w.bytes(kMagic, 4);
  w.put(kVersion);
  w.put(n);
  w.put(e);
  w.put(static_cast<std::uint32_t>(g.patch_size_px));
  w.put(flags);
  w.put(static_cast<std::uint32_t>(g.subject_id.size()));
  w.bytes(g.subject_id.data(), g.subject_id.size());
  w.put(g.inter_slice_spacing_mm);
  w.put(static_cast<std::int32_t>(g.num_slices));
  w.put(static_cast<std::int32_t>(g.fov.slice_first));
  w.put(static_cast<std::int32_t>(g.fov.slice_last));
  w.put(g.fov.x_min_mm);
  w.put(g.fov.x_max_mm);
  w.put(g.fov.y_min_mm);
  w.put(g.fov.y_max_mm);
  for (const auto& v : g.vertices) {
    w.put(v.cartilage_id);
    w.put(static_cast<std::uint16_t>(v.slice_index));
    for (float c : v.coord_mm) w.put(c);
    w.put(v.arc_pos_mm);
  }
  for (const auto& v : g.vertices) {
    if (v.patch.size() != pp) throw DataError("save_graph: patch size mismatch");
    w.bytes(v.patch.data(), pp * sizeof(float));
  }
  w.bytes(g.adjacency.row_ptr.data(), g.adjacency.row_ptr.size() * sizeof(std::uint32_t));
  w.bytes(g.adjacency.cols.data(), g.adjacency.cols.size() * sizeof(std::uint32_t));
  w.bytes(g.adjacency.kinds.data(), g.adjacency.kinds.size());
  if (g.subject_grade) w.put(static_cast<std::int32_t>(*g.subject_grade));
  if (!g.slice_grades.empty()) {
    w.put(static_cast<std::uint32_t>(g.slice_grades.size()));
    for (int s : g.slice_grades) w.put(static_cast<std::uint8_t>(s));
  }
  if (!g.patch_grades.empty()) {
    if (g.patch_grades.size() != n) throw DataError("save_graph: patch label count mismatch");
    for (int s : g.patch_grades) w.put(static_cast<std::uint8_t>(s));
  }
  const std::uint64_t sum = fnv1a(w.buffer().data(), w.buffer().size());
  w.put(sum);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw DataError("short write to " + path.string());
}

CartilageGraph load_graph(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing graph file " + path.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t))
    throw DataError("graph file too short: " + path.string());
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw DataError("not a graph file: " + path.string());

  Reader r(buf.data(), buf.size() - sizeof(std::uint64_t));
  char magic[4];
  r.bytes(magic, 4);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw DataError("graph format version " + std::to_string(version) + " unsupported");
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, buf.data() + buf.size() - sizeof(std::uint64_t), sizeof(stored_sum));
  if (fnv1a(buf.data(), buf.size() - sizeof(std::uint64_t)) != stored_sum)
    throw DataError("graph checksum mismatch: " + path.string());

  CartilageGraph g;
  const auto n = r.get<std::uint32_t>();
  const auto e = r.get<std::uint32_t>();
  g.patch_size_px = static_cast<int>(r.get<std::uint32_t>());
  const auto flags = r.get<std::uint32_t>();
  g.subject_id.resize(r.get<std::uint32_t>());
  r.bytes(g.subject_id.data(), g.subject_id.size());
  g.inter_slice_spacing_mm = r.get<double>();
  g.num_slices = r.get<std::int32_t>();
  g.fov.slice_first = r.get<std::int32_t>();
  g.fov.slice_last = r.get<std::int32_t>();
  g.fov.x_min_mm = r.get<double>();
  g.fov.x_max_mm = r.get<double>();
  g.fov.y_min_mm = r.get<double>();
  g.fov.y_max_mm = r.get<double>();

  const std::size_t pp = static_cast<std::size_t>(g.patch_size_px) * g.patch_size_px;
  // Reject counts that cannot fit in the payload before allocating.
  const std::size_t min_bytes = static_cast<std::size_t>(n) * (15 + pp * 4 + 4) + 4 +
                                static_cast<std::size_t>(e) * 5;
  if (min_bytes > r.remaining()) throw DataError("graph file: counts exceed payload");

  g.vertices.resize(n);
  for (auto& v : g.vertices) {
    v.cartilage_id = r.get<std::uint8_t>();
    v.slice_index = r.get<std::uint16_t>();
    for (float& c : v.coord_mm) c = r.get<float>();
    v.arc_pos_mm = r.get<float>();
    if (v.cartilage_id > 2) throw DataError("graph file: bad cartilage id");
  }
  for (auto& v : g.vertices) {
    v.patch.resize(pp);
    r.bytes(v.patch.data(), pp * sizeof(float));
  }
  auto& a = g.adjacency;
  a.row_ptr.resize(static_cast<std::size_t>(n) + 1);
  a.cols.resize(e);
  a.kinds.resize(e);
  r.bytes(a.row_ptr.data(), a.row_ptr.size() * sizeof(std::uint32_t));
  r.bytes(a.cols.data(), a.cols.size() * sizeof(std::uint32_t));
  r.bytes(a.kinds.data(), a.kinds.size());
  if (a.row_ptr.front() != 0 || a.row_ptr.back() != e)
    throw DataError("graph file: CSR row pointers do not span the edge count");
  for (std::size_t i = 1; i < a.row_ptr.size(); ++i)
    if (a.row_ptr[i] < a.row_ptr[i - 1]) throw DataError("graph file: non-monotone row pointers");
  for (std::uint32_t c : a.cols)
    if (c >= n) throw DataError("graph file: column index out of range");
  for (EdgeKind k : a.kinds)
    if (static_cast<int>(k) > 3) throw DataError("graph file: unknown edge kind");

  if (flags & kHasSubjectGrade) g.subject_grade = r.get<std::int32_t>();
  if (flags & kHasSliceGrades) {
    g.slice_grades.resize(r.get<std::uint32_t>());
    for (int& s : g.slice_grades) s = r.get<std::uint8_t>();
  }
  if (flags & kHasPatchGrades) {
    g.patch_grades.resize(n);
    for (int& s : g.patch_grades) s = r.get<std::uint8_t>();
  }
  if (r.remaining() != 0) throw DataError("graph file: trailing bytes");
  return g;
}

}  // namespace csnet
