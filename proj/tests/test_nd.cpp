#include <cmath>
#include <random>

#include "doctest.h"

#include "csnet/error.hpp"
#include "csnet/nd/checkpoint.hpp"
#include "csnet/nd/ops.hpp"
#include "csnet/nd/optim.hpp"
#include "gradcheck.hpp"

using namespace csnet;
using namespace csnet::nd;

namespace {

constexpr double kTol = 1e-6;

Parameter<double> rand_param(const std::string& name, std::vector<int> shape, std::mt19937_64& rng,
                             double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return Parameter<double>(name, std::move(t));
}

// Weighted sum so every output entry contributes a distinct gradient.
Var<double> weighted(Tape<double>& tape, Var<double> x) {
  Tensor<double> w(x.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w.data[i] = std::sin(0.37 * static_cast<double>(i) + 0.1);
  return sum(mul(x, tape.constant(std::move(w))));
}

}  // namespace

TEST_CASE("gradients of elementwise and reduction ops") {
  std::mt19937_64 rng(1);
  auto a = rand_param("a", {3, 4}, rng);
  auto b = rand_param("b", {3, 4}, rng, 0.2, 1.0);
  auto r = testing::gradcheck({&a, &b}, [&](Tape<double>& t) {
    auto x = t.parameter(a), y = t.parameter(b);
    return weighted(t, add(mul(x, y), scale(relu(y), 0.5)));
  });
  CHECK(r.max_error < kTol);
}

TEST_CASE("gradients of matmul, linear and slice_cols") {
  std::mt19937_64 rng(2);
  auto x = rand_param("x", {5, 4}, rng);
  auto w = rand_param("w", {4, 6}, rng);
  auto b = rand_param("b", {6}, rng);
  auto m = rand_param("m", {4, 3}, rng);
  auto r = testing::gradcheck({&x, &w, &b, &m}, [&](Tape<double>& t) {
    auto h = linear(t.parameter(x), t.parameter(w), t.parameter(b));
    return weighted(t, matmul(slice_cols(h, 1, 4), slice_cols(t.parameter(m), 0, 3)));
  });
  CHECK(r.max_error < kTol);
}

TEST_CASE("conv2d gradients for stride 1 and 2") {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2}) {
    auto x = rand_param("x", {2, 5, 5, 2}, rng);
    auto w = rand_param("w", {9 * 2, 3}, rng);
    auto b = rand_param("b", {3}, rng);
    auto r = testing::gradcheck({&x, &w, &b}, [&](Tape<double>& t) {
      return weighted(t, conv2d(t.parameter(x), t.parameter(w), t.parameter(b), 3, stride, 1));
    });
    CHECK(r.max_error < kTol);
  }
}

TEST_CASE("conv2d equals direct convolution") {
  std::mt19937_64 rng(4);
  auto x = rand_param("x", {2, 6, 5, 3}, rng);
  auto w = rand_param("w", {9 * 3, 4}, rng);
  auto b = rand_param("b", {4}, rng);
  Tape<double> tape(false);
  const auto out = conv2d(tape.parameter(x), tape.parameter(w), tape.parameter(b), 3, 2, 1).value();
  REQUIRE(out.shape == std::vector<int>{2, 3, 3, 4});
  for (int n = 0; n < 2; ++n)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox)
        for (int co = 0; co < 4; ++co) {
          double acc = b.value[static_cast<std::size_t>(co)];
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              for (int ci = 0; ci < 3; ++ci) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
                acc += x.value.data[static_cast<std::size_t>(((n * 6 + iy) * 5 + ix) * 3 + ci)] *
                       w.value.data[static_cast<std::size_t>(((ky * 3 + kx) * 3 + ci) * 4 + co)];
              }
          CHECK(out.data[static_cast<std::size_t>(((n * 3 + oy) * 3 + ox) * 4 + co)] == doctest::Approx(acc));
        }
}

TEST_CASE("normalization and pooling gradients") {
  std::mt19937_64 rng(5);
  auto x = rand_param("x", {3, 3, 3, 4}, rng);
  auto g = rand_param("g", {4}, rng, 0.5, 1.5);
  auto be = rand_param("be", {4}, rng);
  Tensor<double> rm({4}), rv({4}, 1.0);
  auto r = testing::gradcheck({&x, &g, &be}, [&](Tape<double>& t) {
    auto y = batchnorm(t.parameter(x), t.parameter(g), t.parameter(be), rm, rv, {true, 0.1, 1e-5});
    return weighted(t, global_avg_pool2d(y));
  });
  CHECK(r.max_error < kTol);
  auto r2 = testing::gradcheck({&x, &g, &be}, [&](Tape<double>& t) {
    auto y = batchnorm(t.parameter(x), t.parameter(g), t.parameter(be), rm, rv, {true, 0.1, 1e-5});
    return weighted(t, y);
  });
  CHECK(r2.max_error < kTol);

  auto h = rand_param("h", {4, 6}, rng);
  auto lg = rand_param("lg", {6}, rng, 0.5, 1.5);
  auto lb = rand_param("lb", {6}, rng);
  auto r3 = testing::gradcheck({&h, &lg, &lb}, [&](Tape<double>& t) {
    return weighted(t, layernorm(t.parameter(h), t.parameter(lg), t.parameter(lb)));
  });
  CHECK(r3.max_error < kTol);
}

TEST_CASE("batchnorm running statistics") {
  Tape<double> tape;
  Parameter<double> x("x", Tensor<double>({4, 1}, {1.0, 2.0, 3.0, 6.0}));
  Parameter<double> g("g", Tensor<double>({1}, 1.0)), b("b", Tensor<double>({1}, 0.0));
  Tensor<double> rm({1}, 0.0), rv({1}, 1.0);
  auto y = batchnorm(tape.parameter(x), tape.parameter(g), tape.parameter(b), rm, rv, {true, 0.1, 1e-5});
  // mean 3, biased variance 3.5, unbiased 14/3.
  CHECK(rm[0] == doctest::Approx(0.3));
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
  CHECK(y.value()[0] == doctest::Approx(-2.0 / std::sqrt(3.5 + 1e-5)));
  Tape<double> eval(false);
  auto z = batchnorm(eval.parameter(x), eval.parameter(g), eval.parameter(b), rm, rv, {false, 0.1, 1e-5});
  CHECK(z.value()[0] == doctest::Approx((1.0 - rm[0]) / std::sqrt(rv[0] + 1e-5)));
}

TEST_CASE("graph kernel gradients") {
  std::mt19937_64 rng(6);
  const std::vector<std::uint32_t> row_ptr{0, 2, 3, 6, 8};
  const std::vector<std::uint32_t> cols{0, 2, 1, 0, 2, 3, 2, 3};
  auto q = rand_param("q", {4, 4}, rng);
  auto k = rand_param("k", {4, 4}, rng);
  auto v = rand_param("v", {4, 4}, rng);
  auto r = testing::gradcheck({&q, &k, &v}, [&](Tape<double>& t) {
    auto s = edge_dot(t.parameter(q), t.parameter(k), row_ptr, cols, 2, 0.7);
    auto a = softmax_over_segments(s, row_ptr);
    return weighted(t, edge_aggregate(a, t.parameter(v), row_ptr, cols));
  });
  CHECK(r.max_error < kTol);

  auto x = rand_param("x", {5, 3}, rng);
  const std::vector<std::uint32_t> offsets{0, 2, 5}, idx{4, 0, 1, 2, 3};
  auto r2 = testing::gradcheck({&x}, [&](Tape<double>& t) {
    return cross_entropy(segment_mean(t.parameter(x), offsets, idx), {2, 0});
  });
  CHECK(r2.max_error < kTol);
}

TEST_CASE("segment softmax rows sum to one and reject empty segments") {
  Tape<double> tape(false);
  auto s = tape.constant(Tensor<double>({3, 1}, {1.0, 2.0, 3.0}));
  const auto a = softmax_over_segments(s, {0, 1, 3}).value();
  CHECK(a[0] == doctest::Approx(1.0));
  CHECK(a[1] + a[2] == doctest::Approx(1.0));
  CHECK(a[2] / a[1] == doctest::Approx(std::exp(1.0)));
  CHECK_THROWS_AS(softmax_over_segments(s, {0, 0, 3}), ShapeError);
}

TEST_CASE("cross entropy of uniform logits is ln 3") {
  Tape<double> tape(false);
  auto l = cross_entropy(tape.constant(Tensor<double>({2, 3}, 0.0)), {0, 2});
  CHECK(l.value()[0] == doctest::Approx(std::log(3.0)));
}

TEST_CASE("tape rejects non-scalar losses and accumulates shared leaves") {
  Parameter<double> p("p", Tensor<double>({2}, {1.0, 2.0}));
  Tape<double> tape;
  auto x = tape.parameter(p);
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
  Tape<double> t2;
  auto y = t2.parameter(p);
  t2.backward(sum(add(y, mul(y, y))));
  CHECK(p.grad[0] == doctest::Approx(3.0));
  CHECK(p.grad[1] == doctest::Approx(5.0));
}

TEST_CASE("shape errors") {
  Tape<double> tape(false);
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({3, 2}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("Adam matches the reference update") {
  for (bool decoupled : {false, true}) {
    Parameter<double> p("p", Tensor<double>({2}, {0.5, -1.0}));
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    cfg.decoupled = decoupled;
    Adam<double> opt(cfg, {&p});
    double x[2] = {0.5, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int step = 1; step <= 3; ++step) {
      for (int i = 0; i < 2; ++i) p.grad[static_cast<std::size_t>(i)] = 2.0 * x[i] + 0.3;
      opt.step();
      for (int i = 0; i < 2; ++i) {
        double g = 2.0 * x[i] + 0.3;
        if (!decoupled) g += 0.01 * x[i];
        m[i] = 0.9 * m[i] + 0.1 * g;
        v[i] = 0.999 * v[i] + 0.001 * g * g;
        const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
        if (decoupled) x[i] -= 0.1 * 0.01 * x[i];
        x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(p.value[static_cast<std::size_t>(i)] == doctest::Approx(x[i]).epsilon(1e-12));
      }
      opt.zero_grad();
      CHECK(p.grad[0] == 0.0);
    }
  }
}

TEST_CASE("Adam leaves frozen parameters alone") {
  Parameter<double> p("p", Tensor<double>({1}, 1.0));
  p.trainable = false;
  p.grad[0] = 5.0;
  Adam<double> opt({}, {&p});
  opt.step();
  CHECK(p.value[0] == 1.0);
}

TEST_CASE("initializers respect their bounds") {
  std::mt19937_64 rng(9);
  const auto w = kaiming_uniform<float>({50, 20}, 50, rng);
  const auto b = uniform_bias<float>({20}, 50, rng);
  for (float v : w.data) CHECK(std::abs(v) <= std::sqrt(6.0f / 50.0f));
  for (float v : b.data) CHECK(std::abs(v) <= 1.0f / std::sqrt(50.0f));
}

TEST_CASE("checkpoint round trip and corruption") {
  std::mt19937_64 rng(10);
  Parameter<float> a("a", kaiming_uniform<float>({3, 4}, 3, rng));
  Parameter<float> b("b", kaiming_uniform<float>({4}, 3, rng));
  Adam<float> opt({}, {&a, &b});
  a.grad.data.assign(12, 0.5f);
  opt.step();
  Checkpoint ck;
  ck.meta = R"({"k":1})";
  ck.tensors = {store("a", a.value), store("b", b.value), store("d", Tensor<double>({2}, {1.0 / 3.0, 2.0}))};
  store_optimizer(ck, opt);
  const auto bytes = serialize_checkpoint(ck);
  const auto back = parse_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(back.find("d")->values[0] == 1.0 / 3.0);

  Parameter<float> a2("a", Tensor<float>({3, 4})), b2("b", Tensor<float>({4}));
  restore(*back.find("a"), a2.value);
  CHECK(a2.value == a.value);
  Adam<float> opt2({}, {&a2, &b2});
  restore_optimizer(back, opt2);
  CHECK(opt2.state().step == 1);
  CHECK(opt2.state().m[0] == opt.state().m[0]);

  Tensor<float> wrong({4, 3});
  CHECK_THROWS_AS(restore(*back.find("a"), wrong), DataError);
  for (std::size_t pos : {std::size_t{2}, bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x5a);
    CHECK_THROWS_AS(parse_checkpoint(bad), DataError);
  }
  auto cut = bytes;
  cut.resize(bytes.size() - 9);
  CHECK_THROWS_AS(parse_checkpoint(cut), DataError);
}
