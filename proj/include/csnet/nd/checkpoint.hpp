#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "csnet/nd/optim.hpp"
#include "csnet/nd/tensor.hpp"

namespace csnet::nd {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::F32;
  std::vector<int> shape;
  std::vector<double> values;  // widened; narrowed back on write for F32
  bool operator==(const StoredTensor&) const = default;
};

struct Checkpoint {
  std::string meta;  // free-form JSON
  std::vector<StoredTensor> tensors;
  bool has_optimizer = false;
  std::int64_t optimizer_step = 0;
  std::vector<StoredTensor> optimizer;  // m then v per parameter
  bool operator==(const Checkpoint&) const = default;

  const StoredTensor* find(const std::string& name) const;
};

template <typename T>
StoredTensor store(const std::string& name, const Tensor<T>& t);
// Throws DataError on dtype-independent shape mismatch.
template <typename T>
void restore(const StoredTensor& s, Tensor<T>& t);

template <typename T>
void store_optimizer(Checkpoint& ck, const Adam<T>& opt);
template <typename T>
void restore_optimizer(const Checkpoint& ck, Adam<T>& opt);

// Layout: "CSCK", u32 version, meta, tensor table, optional optimizer
// section, u64 FNV-1a trailer. Little-endian.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<char> serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(const std::vector<char>& bytes);

}  // namespace csnet::nd
