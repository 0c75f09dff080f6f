#include "csnet/nd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "csnet/error.hpp"

namespace csnet::nd {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
CMapR<T> as_mat(const Tensor<T>& t, int rows, int cols) {
  return CMapR<T>(t.data.data(), rows, cols);
}
template <typename T>
MapR<T> as_mat(Tensor<T>& t, int rows, int cols) {
  return MapR<T>(t.data.data(), rows, cols);
}

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs)
    if (v.id >= 0 && v.tape->requires_grad(v.id)) return true;
  return false;
}

template <typename T>
void require_rank(const Tensor<T>& t, int r, const char* op) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape));
}

void check_csr(const std::vector<std::uint32_t>& row_ptr, std::size_t entries, const char* op) {
  if (row_ptr.empty() || row_ptr.front() != 0 || row_ptr.back() != entries)
    throw ShapeError(std::string(op) + ": CSR row pointers do not span the entries");
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape(av.shape, bv.shape, "add");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), any_grad({a, b}), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    for (int in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      auto& gi = t.grad(in);
      for (std::size_t i = 0; i < g.numel(); ++i) gi.data[i] += g.data[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape(av.shape, bv.shape, "mul");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), any_grad({a, b}), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& va = t.value(ia);
    const auto& vb = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * vb.data[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * va.data[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  const int ia = a.id;
  return a.tape->push(std::move(out), any_grad({a}), [ia, s](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) gi.data[i] += s * g.data[i];
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  const int ia = a.id;
  return a.tape->push(std::move(out), any_grad({a}), [ia](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x.data[i] > T(0)) gi.data[i] += g.data[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data) s += v;
  const int ia = a.id;
  return a.tape->push(Tensor<T>({1}, s), any_grad({a}), [ia](Tape<T>& t, int self) {
    const T g = t.grad(self).data[0];
    for (auto& v : t.grad(ia).data) v += g;
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) throw ShapeError("matmul: inner dimensions " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  Tensor<T> out({m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), any_grad({a, b}), [ia, ib, m, k, n](Tape<T>& t, int self) {
    const auto g = as_mat(t.grad(self), m, n);
    if (t.requires_grad(ia)) as_mat(t.grad(ia), m, k).noalias() += g * as_mat(t.value(ib), k, n).transpose();
    if (t.requires_grad(ib)) as_mat(t.grad(ib), k, n).noalias() += as_mat(t.value(ia), m, k).transpose() * g;
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv, 2, "linear");
  require_rank(wv, 2, "linear");
  const int n = xv.dim(0), in = xv.dim(1), out_w = wv.dim(1);
  if (wv.dim(0) != in) throw ShapeError("linear: input width " + shape_str(xv.shape) + " vs weight " + shape_str(wv.shape));
  const bool has_bias = bias.id >= 0;
  if (has_bias && bias.value().shape != std::vector<int>{out_w})
    throw ShapeError("linear: bias shape " + shape_str(bias.value().shape));
  Tensor<T> out({n, out_w});
  auto o = as_mat(out, n, out_w);
  o.noalias() = as_mat(xv, n, in) * as_mat(wv, in, out_w);
  if (has_bias) o.rowwise() += as_mat(bias.value(), 1, out_w).row(0);
  const int ix = x.id, iw = w.id, ib = bias.id;
  const bool rg = has_bias ? any_grad({x, w, bias}) : any_grad({x, w});
  return x.tape->push(std::move(out), rg, [ix, iw, ib, n, in, out_w](Tape<T>& t, int self) {
    const auto g = as_mat(t.grad(self), n, out_w);
    if (t.requires_grad(ix)) as_mat(t.grad(ix), n, in).noalias() += g * as_mat(t.value(iw), in, out_w).transpose();
    if (t.requires_grad(iw)) as_mat(t.grad(iw), in, out_w).noalias() += as_mat(t.value(ix), n, in).transpose() * g;
    if (ib >= 0 && t.requires_grad(ib)) as_mat(t.grad(ib), 1, out_w) += g.colwise().sum();
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, int start, int len) {
  const auto& xv = x.value();
  require_rank(xv, 2, "slice_cols");
  const int n = xv.dim(0), w = xv.dim(1);
  if (start < 0 || len < 0 || start + len > w) throw ShapeError("slice_cols: range outside " + shape_str(xv.shape));
  Tensor<T> out({n, len});
  for (int i = 0; i < n; ++i)
    std::copy_n(xv.data.data() + static_cast<std::size_t>(i) * w + start, len,
                out.data.data() + static_cast<std::size_t>(i) * len);
  const int ix = x.id;
  return x.tape->push(std::move(out), any_grad({x}), [ix, n, w, start, len](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < len; ++c)
        gx.data[static_cast<std::size_t>(i) * w + start + c] += g.data[static_cast<std::size_t>(i) * len + c];
  });
}

namespace {

struct ConvGeom {
  int B, H, W, C, Ho, Wo, Cout, k, stride, pad;
  int K() const { return k * k * C; }
  std::size_t rows_per_image() const { return static_cast<std::size_t>(Ho) * Wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, int b0, int nb, T* cols) {
  const int K = g.K();
  for (int b = b0; b < b0 + nb; ++b) {
    const T* img = x + static_cast<std::size_t>(b) * g.H * g.W * g.C;
    for (int oy = 0; oy < g.Ho; ++oy)
      for (int ox = 0; ox < g.Wo; ++ox) {
        T* row = cols + ((static_cast<std::size_t>(b - b0) * g.Ho + oy) * g.Wo + ox) * K;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            T* dst = row + (ky * g.k + kx) * g.C;
            if (iy < 0 || iy >= g.H || ix < 0 || ix >= g.W)
              std::fill_n(dst, g.C, T(0));
            else
              std::memcpy(dst, img + (static_cast<std::size_t>(iy) * g.W + ix) * g.C, sizeof(T) * g.C);
          }
        }
      }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, int b0, int nb, T* dx) {
  const int K = g.K();
  for (int b = b0; b < b0 + nb; ++b) {
    T* img = dx + static_cast<std::size_t>(b) * g.H * g.W * g.C;
    for (int oy = 0; oy < g.Ho; ++oy)
      for (int ox = 0; ox < g.Wo; ++ox) {
        const T* row = cols + ((static_cast<std::size_t>(b - b0) * g.Ho + oy) * g.Wo + ox) * K;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.H) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.W) continue;
            const T* src = row + (ky * g.k + kx) * g.C;
            T* dst = img + (static_cast<std::size_t>(iy) * g.W + ix) * g.C;
            for (int c = 0; c < g.C; ++c) dst[c] += src[c];
          }
        }
      }
  }
}

// Images per im2col chunk, bounding the scratch buffer.
int conv_chunk(const ConvGeom& g) {
  const std::size_t per = g.rows_per_image() * static_cast<std::size_t>(g.K());
  const std::size_t budget = std::size_t{1} << 21;
  return static_cast<int>(std::max<std::size_t>(1, budget / std::max<std::size_t>(per, 1)));
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int kernel, int stride, int pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv, 4, "conv2d");
  require_rank(wv, 2, "conv2d");
  if (kernel < 1 || stride < 1 || pad < 0) throw ShapeError("conv2d: bad kernel/stride/pad");
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), 0, 0, wv.dim(1), kernel, stride, pad};
  g.Ho = (g.H + 2 * pad - kernel) / stride + 1;
  g.Wo = (g.W + 2 * pad - kernel) / stride + 1;
  if (g.Ho < 1 || g.Wo < 1) throw ShapeError("conv2d: input " + shape_str(xv.shape) + " smaller than kernel");
  if (wv.dim(0) != g.K())
    throw ShapeError("conv2d: weight " + shape_str(wv.shape) + " does not match input channels " + std::to_string(g.C));
  const bool has_bias = bias.id >= 0;
  if (has_bias && bias.value().shape != std::vector<int>{g.Cout})
    throw ShapeError("conv2d: bias shape " + shape_str(bias.value().shape));

  Tensor<T> out({g.B, g.Ho, g.Wo, g.Cout});
  const int chunk = conv_chunk(g);
  const int K = g.K();
  Buffer<T> cols;
  const auto wm = as_mat(wv, K, g.Cout);
  for (int b0 = 0; b0 < g.B; b0 += chunk) {
    const int nb = std::min(chunk, g.B - b0);
    const int rows = static_cast<int>(nb * g.rows_per_image());
    cols.resize(static_cast<std::size_t>(rows) * K);
    im2col(xv.data.data(), g, b0, nb, cols.data());
    MapR<T> o(out.data.data() + static_cast<std::size_t>(b0) * g.rows_per_image() * g.Cout, rows, g.Cout);
    o.noalias() = CMapR<T>(cols.data(), rows, K) * wm;
    if (has_bias) o.rowwise() += as_mat(bias.value(), 1, g.Cout).row(0);
  }
  const int ix = x.id, iw = w.id, ib = bias.id;
  const bool rg = has_bias ? any_grad({x, w, bias}) : any_grad({x, w});
  return x.tape->push(std::move(out), rg, [ix, iw, ib, g, chunk](Tape<T>& t, int self) {
    const int K = g.K();
    const auto& gy = t.grad(self);
    const auto& xv = t.value(ix);
    const auto wm = as_mat(t.value(iw), K, g.Cout);
    const bool gx = t.requires_grad(ix), gw = t.requires_grad(iw);
    Buffer<T> cols;
    for (int b0 = 0; b0 < g.B; b0 += chunk) {
      const int nb = std::min(chunk, g.B - b0);
      const int rows = static_cast<int>(nb * g.rows_per_image());
      CMapR<T> dy(gy.data.data() + static_cast<std::size_t>(b0) * g.rows_per_image() * g.Cout, rows, g.Cout);
      cols.resize(static_cast<std::size_t>(rows) * K);
      if (gw) {
        im2col(xv.data.data(), g, b0, nb, cols.data());
        as_mat(t.grad(iw), K, g.Cout).noalias() += CMapR<T>(cols.data(), rows, K).transpose() * dy;
      }
      if (gx) {
        MapR<T>(cols.data(), rows, K).noalias() = dy * wm.transpose();
        col2im_add(cols.data(), g, b0, nb, t.grad(ix).data.data());
      }
    }
    if (ib >= 0 && t.requires_grad(ib))
      as_mat(t.grad(ib), 1, g.Cout) += as_mat(gy, static_cast<int>(gy.numel() / g.Cout), g.Cout).colwise().sum();
  });
}

template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                 const BatchNormOptions& opt) {
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batchnorm: rank must be >= 2");
  const int C = xv.dim(-1);
  const std::size_t M = xv.numel() / static_cast<std::size_t>(C);
  const std::vector<int> cshape{C};
  require_same_shape(gamma.value().shape, cshape, "batchnorm gamma");
  require_same_shape(beta.value().shape, cshape, "batchnorm beta");
  require_same_shape(running_mean.shape, cshape, "batchnorm running mean");
  require_same_shape(running_var.shape, cshape, "batchnorm running var");
  if (opt.train && M < 2) throw ShapeError("batchnorm: training needs more than one value per channel");

  std::vector<T> mean(static_cast<std::size_t>(C)), inv(static_cast<std::size_t>(C));
  if (opt.train) {
    std::vector<double> s(static_cast<std::size_t>(C), 0.0), ss(static_cast<std::size_t>(C), 0.0);
    for (std::size_t m = 0; m < M; ++m)
      for (int c = 0; c < C; ++c) s[static_cast<std::size_t>(c)] += xv.data[m * C + c];
    for (int c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] = static_cast<T>(s[static_cast<std::size_t>(c)] / M);
    for (std::size_t m = 0; m < M; ++m)
      for (int c = 0; c < C; ++c) {
        const double d = xv.data[m * C + c] - static_cast<double>(mean[static_cast<std::size_t>(c)]);
        ss[static_cast<std::size_t>(c)] += d * d;
      }
    for (int c = 0; c < C; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      const double var = ss[cc] / M;
      inv[cc] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      running_mean.data[cc] = static_cast<T>((1 - opt.momentum) * running_mean.data[cc] + opt.momentum * mean[cc]);
      running_var.data[cc] = static_cast<T>((1 - opt.momentum) * running_var.data[cc] +
                                            opt.momentum * var * M / (M - 1));
    }
  } else {
    for (int c = 0; c < C; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      mean[cc] = running_mean.data[cc];
      inv[cc] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data[cc]) + opt.eps));
    }
  }
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  Tensor<T> xhat(xv.shape);
  Tensor<T> out(xv.shape);
  for (std::size_t m = 0; m < M; ++m)
    for (int c = 0; c < C; ++c) {
      const std::size_t i = m * C + c;
      const auto cc = static_cast<std::size_t>(c);
      xhat.data[i] = (xv.data[i] - mean[cc]) * inv[cc];
      out.data[i] = gv[cc] * xhat.data[i] + bv[cc];
    }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  const bool train = opt.train;
  return x.tape->push(std::move(out), any_grad({x, gamma, beta}),
                      [ix, ig, ib, C, M, train, inv, xhat = std::move(xhat)](Tape<T>& t, int self) {
                        const auto& gy = t.grad(self);
                        const auto& gv = t.value(ig).data;
                        std::vector<double> sdy(static_cast<std::size_t>(C), 0.0), sdyx(static_cast<std::size_t>(C), 0.0);
                        for (std::size_t m = 0; m < M; ++m)
                          for (int c = 0; c < C; ++c) {
                            const std::size_t i = m * C + c;
                            sdy[static_cast<std::size_t>(c)] += gy.data[i];
                            sdyx[static_cast<std::size_t>(c)] += gy.data[i] * xhat.data[i];
                          }
                        if (t.requires_grad(ig)) {
                          auto& gg = t.grad(ig).data;
                          for (int c = 0; c < C; ++c) gg[static_cast<std::size_t>(c)] += static_cast<T>(sdyx[static_cast<std::size_t>(c)]);
                        }
                        if (t.requires_grad(ib)) {
                          auto& gb = t.grad(ib).data;
                          for (int c = 0; c < C; ++c) gb[static_cast<std::size_t>(c)] += static_cast<T>(sdy[static_cast<std::size_t>(c)]);
                        }
                        if (!t.requires_grad(ix)) return;
                        auto& gx = t.grad(ix).data;
                        for (std::size_t m = 0; m < M; ++m)
                          for (int c = 0; c < C; ++c) {
                            const std::size_t i = m * C + c;
                            const auto cc = static_cast<std::size_t>(c);
                            if (train) {
                              const double v = (static_cast<double>(gy.data[i]) - sdy[cc] / M -
                                                xhat.data[i] * sdyx[cc] / M) *
                                               gv[cc] * inv[cc];
                              gx[i] += static_cast<T>(v);
                            } else {
                              gx[i] += gy.data[i] * gv[cc] * inv[cc];
                            }
                          }
                      });
}

template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
  const auto& xv = x.value();
  require_rank(xv, 2, "layernorm");
  const int N = xv.dim(0), D = xv.dim(1);
  require_same_shape(gamma.value().shape, {D}, "layernorm gamma");
  require_same_shape(beta.value().shape, {D}, "layernorm beta");
  Tensor<T> xhat(xv.shape), out(xv.shape);
  std::vector<T> inv(static_cast<std::size_t>(N));
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (int i = 0; i < N; ++i) {
    const T* row = xv.data.data() + static_cast<std::size_t>(i) * D;
    double s = 0;
    for (int d = 0; d < D; ++d) s += row[d];
    const double mu = s / D;
    double ss = 0;
    for (int d = 0; d < D; ++d) ss += (row[d] - mu) * (row[d] - mu);
    const double iv = 1.0 / std::sqrt(ss / D + eps);
    inv[static_cast<std::size_t>(i)] = static_cast<T>(iv);
    for (int d = 0; d < D; ++d) {
      const std::size_t k = static_cast<std::size_t>(i) * D + d;
      xhat.data[k] = static_cast<T>((row[d] - mu) * iv);
      out.data[k] = gv[static_cast<std::size_t>(d)] * xhat.data[k] + bv[static_cast<std::size_t>(d)];
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->push(std::move(out), any_grad({x, gamma, beta}),
                      [ix, ig, ib, N, D, inv, xhat = std::move(xhat)](Tape<T>& t, int self) {
                        const auto& gy = t.grad(self).data;
                        const auto& gv = t.value(ig).data;
                        if (t.requires_grad(ig)) {
                          auto& gg = t.grad(ig).data;
                          for (int i = 0; i < N; ++i)
                            for (int d = 0; d < D; ++d) {
                              const std::size_t k = static_cast<std::size_t>(i) * D + d;
                              gg[static_cast<std::size_t>(d)] += gy[k] * xhat.data[k];
                            }
                        }
                        if (t.requires_grad(ib)) {
                          auto& gb = t.grad(ib).data;
                          for (int i = 0; i < N; ++i)
                            for (int d = 0; d < D; ++d) gb[static_cast<std::size_t>(d)] += gy[static_cast<std::size_t>(i) * D + d];
                        }
                        if (!t.requires_grad(ix)) return;
                        auto& gx = t.grad(ix).data;
                        for (int i = 0; i < N; ++i) {
                          double s1 = 0, s2 = 0;
                          for (int d = 0; d < D; ++d) {
                            const std::size_t k = static_cast<std::size_t>(i) * D + d;
                            const double dxh = static_cast<double>(gy[k]) * gv[static_cast<std::size_t>(d)];
                            s1 += dxh;
                            s2 += dxh * xhat.data[k];
                          }
                          for (int d = 0; d < D; ++d) {
                            const std::size_t k = static_cast<std::size_t>(i) * D + d;
                            const double dxh = static_cast<double>(gy[k]) * gv[static_cast<std::size_t>(d)];
                            gx[k] += static_cast<T>(inv[static_cast<std::size_t>(i)] *
                                                    (dxh - s1 / D - xhat.data[k] * s2 / D));
                          }
                        }
                      });
}

template <typename T>
Var<T> global_avg_pool2d(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv, 4, "global_avg_pool2d");
  const int B = xv.dim(0), HW = xv.dim(1) * xv.dim(2), C = xv.dim(3);
  Tensor<T> out({B, C});
  for (int b = 0; b < B; ++b) {
    const T* img = xv.data.data() + static_cast<std::size_t>(b) * HW * C;
    T* o = out.data.data() + static_cast<std::size_t>(b) * C;
    for (int p = 0; p < HW; ++p)
      for (int c = 0; c < C; ++c) o[c] += img[static_cast<std::size_t>(p) * C + c];
    for (int c = 0; c < C; ++c) o[c] /= static_cast<T>(HW);
  }
  const int ix = x.id;
  return x.tape->push(std::move(out), any_grad({x}), [ix, B, HW, C](Tape<T>& t, int self) {
    const auto& g = t.grad(self).data;
    auto& gx = t.grad(ix).data;
    const T s = T(1) / static_cast<T>(HW);
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < HW; ++p)
        for (int c = 0; c < C; ++c)
          gx[(static_cast<std::size_t>(b) * HW + p) * C + c] += g[static_cast<std::size_t>(b) * C + c] * s;
  });
}

template <typename T>
Var<T> softmax_over_segments(Var<T> scores, const std::vector<std::uint32_t>& row_ptr) {
  const auto& sv = scores.value();
  require_rank(sv, 2, "softmax_over_segments");
  const int E = sv.dim(0), h = sv.dim(1);
  check_csr(row_ptr, static_cast<std::size_t>(E), "softmax_over_segments");
  Tensor<T> out(sv.shape);
  const std::size_t n = row_ptr.size() - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t lo = row_ptr[i], hi = row_ptr[i + 1];
    if (hi <= lo) throw ShapeError("softmax_over_segments: empty segment " + std::to_string(i));
    for (int k = 0; k < h; ++k) {
      T mx = sv.data[static_cast<std::size_t>(lo) * h + k];
      for (std::uint32_t e = lo; e < hi; ++e) mx = std::max(mx, sv.data[static_cast<std::size_t>(e) * h + k]);
      T s = 0;
      for (std::uint32_t e = lo; e < hi; ++e) {
        const T v = std::exp(sv.data[static_cast<std::size_t>(e) * h + k] - mx);
        out.data[static_cast<std::size_t>(e) * h + k] = v;
        s += v;
      }
      for (std::uint32_t e = lo; e < hi; ++e) out.data[static_cast<std::size_t>(e) * h + k] /= s;
    }
  }
  const int is = scores.id;
  return scores.tape->push(std::move(out), any_grad({scores}), [is, h, row_ptr](Tape<T>& t, int self) {
    const auto& y = t.value(self).data;
    const auto& gy = t.grad(self).data;
    auto& gx = t.grad(is).data;
    for (std::size_t i = 0; i + 1 < row_ptr.size(); ++i)
      for (int k = 0; k < h; ++k) {
        T dot = 0;
        for (std::uint32_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
          const std::size_t q = static_cast<std::size_t>(e) * h + k;
          dot += y[q] * gy[q];
        }
        for (std::uint32_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
          const std::size_t q = static_cast<std::size_t>(e) * h + k;
          gx[q] += y[q] * (gy[q] - dot);
        }
      }
  });
}

template <typename T>
Var<T> segment_mean(Var<T> x, const std::vector<std::uint32_t>& offsets,
                    const std::vector<std::uint32_t>& indices) {
  const auto& xv = x.value();
  require_rank(xv, 2, "segment_mean");
  const int N = xv.dim(0), D = xv.dim(1);
  check_csr(offsets, indices.size(), "segment_mean");
  const int G = static_cast<int>(offsets.size()) - 1;
  Tensor<T> out({G, D});
  for (int g = 0; g < G; ++g) {
    const auto lo = offsets[static_cast<std::size_t>(g)], hi = offsets[static_cast<std::size_t>(g) + 1];
    if (hi <= lo) throw ShapeError("segment_mean: empty group " + std::to_string(g));
    T* o = out.data.data() + static_cast<std::size_t>(g) * D;
    for (auto e = lo; e < hi; ++e) {
      const auto r = indices[e];
      if (r >= static_cast<std::uint32_t>(N)) throw ShapeError("segment_mean: index out of range");
      const T* row = xv.data.data() + static_cast<std::size_t>(r) * D;
      for (int d = 0; d < D; ++d) o[d] += row[d];
    }
    const T inv = T(1) / static_cast<T>(hi - lo);
    for (int d = 0; d < D; ++d) o[d] *= inv;
  }
  const int ix = x.id;
  return x.tape->push(std::move(out), any_grad({x}), [ix, D, offsets, indices](Tape<T>& t, int self) {
    const auto& g = t.grad(self).data;
    auto& gx = t.grad(ix).data;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const T inv = T(1) / static_cast<T>(offsets[s + 1] - offsets[s]);
      for (auto e = offsets[s]; e < offsets[s + 1]; ++e)
        for (int d = 0; d < D; ++d)
          gx[static_cast<std::size_t>(indices[e]) * D + d] += g[s * D + d] * inv;
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require_rank(logits, 2, "softmax_rows");
  const int B = logits.dim(0), C = logits.dim(1);
  Tensor<T> p(logits.shape);
  for (int b = 0; b < B; ++b) {
    const T* l = logits.data.data() + static_cast<std::size_t>(b) * C;
    T* o = p.data.data() + static_cast<std::size_t>(b) * C;
    const T mx = *std::max_element(l, l + C);
    T s = 0;
    for (int c = 0; c < C; ++c) s += (o[c] = std::exp(l[c] - mx));
    for (int c = 0; c < C; ++c) o[c] /= s;
  }
  return p;
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& classes) {
  const auto& lv = logits.value();
  require_rank(lv, 2, "cross_entropy");
  const int B = lv.dim(0), C = lv.dim(1);
  if (static_cast<int>(classes.size()) != B || B == 0)
    throw ShapeError("cross_entropy: " + std::to_string(classes.size()) + " labels for " + std::to_string(B) + " rows");
  for (int c : classes)
    if (c < 0 || c >= C) throw ShapeError("cross_entropy: class " + std::to_string(c) + " out of range");
  Tensor<T> p = softmax_rows(lv);
  double loss = 0;
  for (int b = 0; b < B; ++b) {
    const T* l = lv.data.data() + static_cast<std::size_t>(b) * C;
    const T mx = *std::max_element(l, l + C);
    double s = 0;
    for (int c = 0; c < C; ++c) s += std::exp(static_cast<double>(l[c] - mx));
    loss += std::log(s) + mx - l[classes[static_cast<std::size_t>(b)]];
  }
  const int il = logits.id;
  return logits.tape->push(Tensor<T>({1}, static_cast<T>(loss / B)), any_grad({logits}),
                           [il, B, C, classes, p = std::move(p)](Tape<T>& t, int self) {
                             const T g = t.grad(self).data[0] / static_cast<T>(B);
                             auto& gl = t.grad(il).data;
                             for (int b = 0; b < B; ++b)
                               for (int c = 0; c < C; ++c) {
                                 const std::size_t k = static_cast<std::size_t>(b) * C + c;
                                 gl[k] += g * (p.data[k] - (classes[static_cast<std::size_t>(b)] == c ? T(1) : T(0)));
                               }
                           });
}

template <typename T>
Var<T> edge_dot(Var<T> q, Var<T> k, const std::vector<std::uint32_t>& row_ptr,
                const std::vector<std::uint32_t>& cols, int heads, T scale) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  require_rank(qv, 2, "edge_dot");
  require_same_shape(qv.shape, kv.shape, "edge_dot");
  const int N = qv.dim(0), W = qv.dim(1);
  if (heads < 1 || W % heads != 0) throw ShapeError("edge_dot: width not divisible by heads");
  if (row_ptr.size() != static_cast<std::size_t>(N) + 1) throw ShapeError("edge_dot: row pointer count");
  check_csr(row_ptr, cols.size(), "edge_dot");
  const int d = W / heads;
  const int E = static_cast<int>(cols.size());
  Tensor<T> out({E, heads});
  for (int i = 0; i < N; ++i) {
    const T* qi = qv.data.data() + static_cast<std::size_t>(i) * W;
    for (auto e = row_ptr[static_cast<std::size_t>(i)]; e < row_ptr[static_cast<std::size_t>(i) + 1]; ++e) {
      if (cols[e] >= static_cast<std::uint32_t>(N)) throw ShapeError("edge_dot: column out of range");
      const T* kj = kv.data.data() + static_cast<std::size_t>(cols[e]) * W;
      for (int h = 0; h < heads; ++h) {
        T s = 0;
        for (int c = 0; c < d; ++c) s += qi[h * d + c] * kj[h * d + c];
        out.data[static_cast<std::size_t>(e) * heads + h] = scale * s;
      }
    }
  }
  const int iq = q.id, ik = k.id;
  return q.tape->push(std::move(out), any_grad({q, k}), [iq, ik, N, W, d, heads, scale, row_ptr, cols](Tape<T>& t, int self) {
    const auto& g = t.grad(self).data;
    const auto& qv = t.value(iq).data;
    const auto& kv = t.value(ik).data;
    const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik);
    T* dq = gq ? t.grad(iq).data.data() : nullptr;
    T* dk = gk ? t.grad(ik).data.data() : nullptr;
    for (int i = 0; i < N; ++i)
      for (auto e = row_ptr[static_cast<std::size_t>(i)]; e < row_ptr[static_cast<std::size_t>(i) + 1]; ++e) {
        const std::size_t j = cols[e];
        for (int h = 0; h < heads; ++h) {
          const T ge = scale * g[static_cast<std::size_t>(e) * heads + h];
          for (int c = 0; c < d; ++c) {
            const std::size_t qi = static_cast<std::size_t>(i) * W + h * d + c;
            const std::size_t kj = j * W + h * d + c;
            if (gq) dq[qi] += ge * kv[kj];
            if (gk) dk[kj] += ge * qv[qi];
          }
        }
      }
  });
}

template <typename T>
Var<T> edge_aggregate(Var<T> alpha, Var<T> v, const std::vector<std::uint32_t>& row_ptr,
                      const std::vector<std::uint32_t>& cols) {
  const auto& av = alpha.value();
  const auto& vv = v.value();
  require_rank(av, 2, "edge_aggregate");
  require_rank(vv, 2, "edge_aggregate");
  const int E = av.dim(0), heads = av.dim(1), N = vv.dim(0), W = vv.dim(1);
  if (static_cast<std::size_t>(E) != cols.size()) throw ShapeError("edge_aggregate: alpha rows vs edge count");
  if (W % heads != 0) throw ShapeError("edge_aggregate: width not divisible by heads");
  if (row_ptr.size() != static_cast<std::size_t>(N) + 1) throw ShapeError("edge_aggregate: row pointer count");
  check_csr(row_ptr, cols.size(), "edge_aggregate");
  const int d = W / heads;
  Tensor<T> out(vv.shape);
  for (int i = 0; i < N; ++i) {
    T* oi = out.data.data() + static_cast<std::size_t>(i) * W;
    for (auto e = row_ptr[static_cast<std::size_t>(i)]; e < row_ptr[static_cast<std::size_t>(i) + 1]; ++e) {
      if (cols[e] >= static_cast<std::uint32_t>(N)) throw ShapeError("edge_aggregate: column out of range");
      const T* vj = vv.data.data() + static_cast<std::size_t>(cols[e]) * W;
      for (int h = 0; h < heads; ++h) {
        const T a = av.data[static_cast<std::size_t>(e) * heads + h];
        for (int c = 0; c < d; ++c) oi[h * d + c] += a * vj[h * d + c];
      }
    }
  }
  const int ia = alpha.id, iv = v.id;
  return alpha.tape->push(std::move(out), any_grad({alpha, v}), [ia, iv, N, W, d, heads, row_ptr, cols](Tape<T>& t, int self) {
    const auto& g = t.grad(self).data;
    const auto& av = t.value(ia).data;
    const auto& vv = t.value(iv).data;
    const bool ga = t.requires_grad(ia), gv = t.requires_grad(iv);
    T* da = ga ? t.grad(ia).data.data() : nullptr;
    T* dv = gv ? t.grad(iv).data.data() : nullptr;
    for (int i = 0; i < N; ++i)
      for (auto e = row_ptr[static_cast<std::size_t>(i)]; e < row_ptr[static_cast<std::size_t>(i) + 1]; ++e) {
        const std::size_t j = cols[e];
        for (int h = 0; h < heads; ++h) {
          const std::size_t ae = static_cast<std::size_t>(e) * heads + h;
          T s = 0;
          for (int c = 0; c < d; ++c) {
            const T gi = g[static_cast<std::size_t>(i) * W + h * d + c];
            s += gi * vv[j * W + h * d + c];
            if (gv) dv[j * W + h * d + c] += av[ae] * gi;
          }
          if (ga) da[ae] += s;
        }
      }
  });
}

#define CSNET_INSTANTIATE(T)                                                                          \
  template Var<T> add(Var<T>, Var<T>);                                                                \
  template Var<T> mul(Var<T>, Var<T>);                                                                \
  template Var<T> scale(Var<T>, T);                                                                   \
  template Var<T> relu(Var<T>);                                                                       \
  template Var<T> sum(Var<T>);                                                                        \
  template Var<T> matmul(Var<T>, Var<T>);                                                             \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                     \
  template Var<T> slice_cols(Var<T>, int, int);                                                       \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int, int);                                      \
  template Var<T> batchnorm(Var<T>, Var<T>, Var<T>, Tensor<T>&, Tensor<T>&, const BatchNormOptions&); \
  template Var<T> layernorm(Var<T>, Var<T>, Var<T>, double);                                          \
  template Var<T> global_avg_pool2d(Var<T>);                                                          \
  template Var<T> softmax_over_segments(Var<T>, const std::vector<std::uint32_t>&);                   \
  template Var<T> segment_mean(Var<T>, const std::vector<std::uint32_t>&,                             \
                               const std::vector<std::uint32_t>&);                                    \
  template Var<T> cross_entropy(Var<T>, const std::vector<int>&);                                     \
  template Var<T> edge_dot(Var<T>, Var<T>, const std::vector<std::uint32_t>&,                         \
                           const std::vector<std::uint32_t>&, int, T);                                \
  template Var<T> edge_aggregate(Var<T>, Var<T>, const std::vector<std::uint32_t>&,                   \
                                 const std::vector<std::uint32_t>&);                                  \
  template Tensor<T> softmax_rows(const Tensor<T>&);

CSNET_INSTANTIATE(float)
CSNET_INSTANTIATE(double)

}  // namespace csnet::nd
