#pragma once

#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <string>
#include <vector>

namespace csnet::nd {

// 64-byte aligned storage keeps vectorized reductions independent of where
// the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Tensor {
  std::vector<int> shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<T> d);

  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }
  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i < 0 ? rank() + i : i)]; }
  bool empty() const { return data.empty(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  bool operator==(const Tensor&) const = default;
};

std::string shape_str(const std::vector<int>& s);
// Throws ShapeError unless a and b match.
void require_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape, T(0)) {}
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const std::vector<int>& shape() const { return value().shape; }
  int dim(int i) const { return value().dim(i); }
};

// Wengert list. Nodes are appended in evaluation order, so reverse order is
// a valid topological order for backward.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> v);
  // Gradients reaching this node are added to p.grad by backward().
  Var<T> parameter(Parameter<T>& p);
  Var<T> push(Tensor<T> value, bool requires_grad, Backward back);

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  // Lazily allocated, zero-filled gradient buffer.
  Tensor<T>& grad(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. Throws ShapeError for a
  // non-scalar loss.
  void backward(Var<T> loss);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward back;
    Parameter<T>* leaf = nullptr;
  };
  std::vector<Node> nodes_;
  bool record_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

}  // namespace csnet::nd
