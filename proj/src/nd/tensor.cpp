#include "csnet/nd/tensor.hpp"

#include <sstream>

#include "csnet/error.hpp"

namespace csnet::nd {

template <typename T>
Tensor<T>::Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(d.begin(), d.end()) {
  if (count(shape) != data.size())
    throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

void require_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> v) {
  return push(std::move(v), false, nullptr);
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Var<T> v = push(p.value, record_ && p.trainable, nullptr);
  nodes_.back().leaf = record_ && p.trainable ? &p : nullptr;
  return v;
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, bool requires_grad, Backward back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape, T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ShapeError("backward: loss belongs to another tape");
  if (value(loss.id).numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss.id).shape));
  if (!requires_grad(loss.id)) return;
  grad(loss.id).data[0] += T(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.back) n.back(*this, id);
    if (n.leaf)
      for (std::size_t i = 0; i < n.grad.numel(); ++i) n.leaf->grad.data[i] += n.grad.data[i];
  }
  // Only parameter gradients persist across passes.
  for (auto& n : nodes_) n.grad = Tensor<T>();
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace csnet::nd
