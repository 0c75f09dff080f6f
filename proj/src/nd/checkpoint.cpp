#include "csnet/nd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "csnet/error.hpp"

namespace csnet::nd {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

constexpr char kMagic[4] = {'C', 'S', 'C', 'K'};
constexpr char kOptMagic[4] = {'A', 'D', 'A', 'M'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const char* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ull;
  }
  return h;
}

struct Out {
  std::vector<char> b;
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    b.insert(b.end(), p, p + sizeof(T));
  }
  void str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
  }
  void tensor(const StoredTensor& t) {
    str(t.name);
    put(static_cast<std::uint8_t>(t.dtype));
    put(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put(static_cast<std::uint32_t>(d));
    put(static_cast<std::uint64_t>(t.values.size()));
    for (double v : t.values) {
      if (t.dtype == DType::F32)
        put(static_cast<float>(v));
      else
        put(v);
    }
  }
};

struct In {
  const char* p;
  std::size_t n, pos = 0;
  void need(std::size_t k) {
    if (pos + k > n) throw DataError("checkpoint truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str() {
    const auto len = get<std::uint32_t>();
    need(len);
    std::string s(p + pos, len);
    pos += len;
    return s;
  }
  StoredTensor tensor() {
    StoredTensor t;
    t.name = str();
    const auto dt = get<std::uint8_t>();
    if (dt > 1) throw DataError("checkpoint: unknown dtype for " + t.name);
    t.dtype = static_cast<DType>(dt);
    const auto rank = get<std::uint32_t>();
    if (rank > 8) throw DataError("checkpoint: implausible rank for " + t.name);
    std::uint64_t expect = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.shape.push_back(static_cast<int>(get<std::uint32_t>()));
      expect *= static_cast<std::uint64_t>(t.shape.back());
    }
    const auto count = get<std::uint64_t>();
    if (count != expect) throw DataError("checkpoint: value count does not match shape for " + t.name);
    const std::size_t width = t.dtype == DType::F32 ? 4 : 8;
    if (count > (n - pos) / width) throw DataError("checkpoint: payload shorter than declared for " + t.name);
    t.values.resize(count);
    for (auto& v : t.values) v = t.dtype == DType::F32 ? static_cast<double>(get<float>()) : get<double>();
    return t;
  }
};

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

template <typename T>
StoredTensor store(const std::string& name, const Tensor<T>& t) {
  StoredTensor s{name, dtype_of<T>(), t.shape, {}};
  s.values.assign(t.data.begin(), t.data.end());
  return s;
}

template <typename T>
void restore(const StoredTensor& s, Tensor<T>& t) {
  if (s.shape != t.shape)
    throw DataError("checkpoint: tensor " + s.name + " has shape " + shape_str(s.shape) + ", expected " +
                    shape_str(t.shape));
  for (std::size_t i = 0; i < s.values.size(); ++i) t.data[i] = static_cast<T>(s.values[i]);
}

template <typename T>
void store_optimizer(Checkpoint& ck, const Adam<T>& opt) {
  ck.has_optimizer = true;
  ck.optimizer_step = opt.state().step;
  ck.optimizer.clear();
  const auto& ps = opt.params();
  for (std::size_t k = 0; k < ps.size(); ++k) ck.optimizer.push_back(store(ps[k]->name + ".m", opt.state().m[k]));
  for (std::size_t k = 0; k < ps.size(); ++k) ck.optimizer.push_back(store(ps[k]->name + ".v", opt.state().v[k]));
}

template <typename T>
void restore_optimizer(const Checkpoint& ck, Adam<T>& opt) {
  if (!ck.has_optimizer) throw DataError("checkpoint has no optimizer section");
  const auto& ps = opt.params();
  if (ck.optimizer.size() != 2 * ps.size()) throw DataError("checkpoint: optimizer section size mismatch");
  AdamState<T> st;
  st.step = ck.optimizer_step;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    Tensor<T> m(ps[k]->value.shape), v(ps[k]->value.shape);
    restore(ck.optimizer[k], m);
    restore(ck.optimizer[ps.size() + k], v);
    st.m.push_back(std::move(m));
    st.v.push_back(std::move(v));
  }
  opt.set_state(std::move(st));
}

std::vector<char> serialize_checkpoint(const Checkpoint& ck) {
  Out o;
  o.b.insert(o.b.end(), kMagic, kMagic + 4);
  o.put(kVersion);
  o.str(ck.meta);
  o.put(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) o.tensor(t);
  o.put(static_cast<std::uint8_t>(ck.has_optimizer ? 1 : 0));
  if (ck.has_optimizer) {
    o.b.insert(o.b.end(), kOptMagic, kOptMagic + 4);
    o.put(ck.optimizer_step);
    o.put(static_cast<std::uint32_t>(ck.optimizer.size()));
    for (const auto& t : ck.optimizer) o.tensor(t);
  }
  o.put(fnv1a(o.b.data(), o.b.size()));
  return std::move(o.b);
}

Checkpoint parse_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 4 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DataError("not a checkpoint file");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  In in{bytes.data(), body};
  in.pos = 4;
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw DataError("checkpoint version " + std::to_string(version) + " unsupported");
  if (fnv1a(bytes.data(), body) != stored) throw DataError("checkpoint checksum mismatch");
  Checkpoint ck;
  ck.meta = in.str();
  const auto nt = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nt; ++i) ck.tensors.push_back(in.tensor());
  ck.has_optimizer = in.get<std::uint8_t>() != 0;
  if (ck.has_optimizer) {
    in.need(4);
    if (std::memcmp(bytes.data() + in.pos, kOptMagic, 4) != 0) throw DataError("checkpoint: bad optimizer section");
    in.pos += 4;
    ck.optimizer_step = in.get<std::int64_t>();
    const auto no = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < no; ++i) ck.optimizer.push_back(in.tensor());
  }
  if (in.pos != body) throw DataError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

template StoredTensor store(const std::string&, const Tensor<float>&);
template StoredTensor store(const std::string&, const Tensor<double>&);
template void restore(const StoredTensor&, Tensor<float>&);
template void restore(const StoredTensor&, Tensor<double>&);
template void store_optimizer(Checkpoint&, const Adam<float>&);
template void store_optimizer(Checkpoint&, const Adam<double>&);
template void restore_optimizer(const Checkpoint&, Adam<float>&);
template void restore_optimizer(const Checkpoint&, Adam<double>&);

}  // namespace csnet::nd
