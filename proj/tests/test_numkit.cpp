// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "sglora/errors.hpp"
#include "sglora/numkit.hpp"
#include "sglora/rng.hpp"

using sglora::Error;
using sglora::ErrorCode;
using sglora::Rng;
namespace nk = sglora::numkit;

using Mat64 = nk::Mat<double>;
using Tape64 = nk::Tape<double>;
using Node = Tape64::NodeId;

namespace {

Mat64 random_mat(std::size_t rows, std::size_t cols, Rng& rng,
                 double stddev = 1.0) {
  Mat64 m(rows, cols);
  for (auto& v : m.vec()) v = rng.normal() * stddev;
  return m;
}

// Naive triple-loop product, the reference for matmul.
template <typename T>
nk::Mat<T> matmul_oracle(const nk::Mat<T>& a, const nk::Mat<T>& b) {
  nk::Mat<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T acc = T(0);
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

using Builder = std::function<Node(Tape64&, const std::vector<Node>&)>;

double eval_scalar(const std::vector<Mat64>& inputs, const Builder& build) {
  Tape64 tape;
  std::vector<Node> ids;
  ids.reserve(inputs.size());
  for (const auto& m : inputs) ids.push_back(tape.leaf(m));
  const Node loss = build(tape, ids);
  return tape.value(loss)(0, 0);
}

// Central finite differences against one reverse pass, every coordinate of
// every input.
void check_gradients(std::vector<Mat64> inputs, const Builder& build,
                     double h = 1e-5, double tol = 1e-4) {
  Tape64 tape;
  std::vector<Node> ids;
  for (const auto& m : inputs) ids.push_back(tape.leaf(m));
  const Node loss = build(tape, ids);
  auto grads = tape.backward(loss);

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Mat64& g = grads.at(ids[i]);
    REQUIRE(g.rows() == inputs[i].rows());
    REQUIRE(g.cols() == inputs[i].cols());
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double saved = inputs[i].vec()[k];
      inputs[i].vec()[k] = saved + h;
      const double up = eval_scalar(inputs, build);
      inputs[i].vec()[k] = saved - h;
      const double down = eval_scalar(inputs, build);
      inputs[i].vec()[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double a = g.vec()[k];
      const double err = std::abs(a - fd);
      CHECK(err <= tol * std::max({std::abs(a), std::abs(fd), 1.0}) + 1e-9);
    }
  }
}

}  // namespace

TEST_CASE("matmul identity and pinned product") {
  const auto i2 = Mat64::identity(2);
  const auto b = Mat64::from_rows({{5, 6}, {7, 8}});
  const auto ib = nk::matmul(i2, b);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 2; ++c) CHECK(ib(r, c) == b(r, c));
  }

  const auto a = Mat64::from_rows({{1, 2}, {3, 4}});
  const auto ab = nk::matmul(a, b);
  CHECK(ab(0, 0) == doctest::Approx(19.0));
  CHECK(ab(0, 1) == doctest::Approx(22.0));
  CHECK(ab(1, 0) == doctest::Approx(43.0));
  CHECK(ab(1, 1) == doctest::Approx(50.0));

  const Mat64 zero(2, 3);
  const auto az = nk::matmul(a, zero);
  for (double v : az.vec()) CHECK(v == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle on random shapes") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.below(6);
    const std::size_t k = 1 + rng.below(6);
    const std::size_t n = 1 + rng.below(6);
    const auto a = random_mat(m, k, rng);
    const auto b = random_mat(k, n, rng);
    const auto got = nk::matmul(a, b);
    const auto want = matmul_oracle(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got.vec()[i] == doctest::Approx(want.vec()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul float algebra: identity association and distribution") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    nk::Matrix a(3, 4), b(4, 2), c(4, 2);
    for (auto& v : a.vec()) v = static_cast<float>(rng.normal());
    for (auto& v : b.vec()) v = static_cast<float>(rng.normal());
    for (auto& v : c.vec()) v = static_cast<float>(rng.normal());

    const auto assoc_left = nk::matmul(nk::matmul(a, nk::Matrix::identity(4)), b);
    const auto assoc_right = nk::matmul(a, nk::matmul(nk::Matrix::identity(4), b));
    const auto dist_left = nk::matmul(a, nk::add(b, c));
    const auto dist_right = nk::add(nk::matmul(a, b), nk::matmul(a, c));
    for (std::size_t i = 0; i < assoc_left.size(); ++i) {
      CHECK(assoc_left.vec()[i] ==
            doctest::Approx(assoc_right.vec()[i]).epsilon(1e-5));
      CHECK(dist_left.vec()[i] ==
            doctest::Approx(dist_right.vec()[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("shape violations raise shape errors") {
  const auto a = Mat64::from_rows({{1, 2}, {3, 4}});
  const Mat64 bad(3, 3, 1.0);
  CHECK_THROWS_WITH_AS(nk::matmul(a, bad), doctest::Contains("matmul"), Error);
  try {
    nk::add(a, bad);
    FAIL("add accepted mismatched shapes");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
  }
  try {
    nk::add_bias(a, Mat64(3, 1, 1.0));
    FAIL("add_bias accepted a mismatched bias");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
  }
  try {
    Mat64::from_rows({{1, 2}, {3}});
    FAIL("from_rows accepted a ragged literal");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
  }
}

TEST_CASE("non-finite products are rejected") {
  Mat64 a(1, 1, 1e308);
  Mat64 b(1, 1, 1e308);
  try {
    nk::matmul(a, b);
    FAIL("matmul produced an accepted overflow");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNonFinite);
  }
}

TEST_CASE("mlp_forward value mode: zero weights, identity layer, oracle") {
  // Zero weights: the output is the activation of the bias.
  nk::DenseLayer<double> zero_layer;
  zero_layer.weights = Mat64(3, 2);
  zero_layer.bias = Mat64::from_rows({{0.5}, {-0.5}, {2.0}});
  zero_layer.activation = nk::Activation::kRelu;
  const auto out =
      nk::mlp_forward<double>({zero_layer}, Mat64::from_rows({{1.0}, {2.0}}));
  CHECK(out(0, 0) == doctest::Approx(0.5));
  CHECK(out(1, 0) == doctest::Approx(0.0));
  CHECK(out(2, 0) == doctest::Approx(2.0));

  nk::DenseLayer<double> ident;
  ident.weights = Mat64::identity(2);
  ident.bias = Mat64(2, 1);
  ident.activation = nk::Activation::kIdentity;
  const auto x = Mat64::from_rows({{0.3, -1.0}, {2.0, 4.0}});
  const auto same = nk::mlp_forward<double>({ident}, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(same.vec()[i] == x.vec()[i]);
  }

  // Two layers against a scalar-loop forward oracle.
  Rng rng(13);
  std::vector<nk::DenseLayer<double>> layers(2);
  layers[0].weights = random_mat(4, 2, rng);
  layers[0].bias = random_mat(4, 1, rng);
  layers[0].activation = nk::Activation::kRelu;
  layers[1].weights = random_mat(3, 4, rng);
  layers[1].bias = random_mat(3, 1, rng);
  layers[1].activation = nk::Activation::kIdentity;
  const auto input = Mat64::from_rows({{1.0}, {0.0}});
  const auto got = nk::mlp_forward(layers, input);

  std::vector<double> h = {input(0, 0), input(1, 0)};
  for (const auto& layer : layers) {
    std::vector<double> next(layer.weights.rows(), 0.0);
    for (std::size_t i = 0; i < layer.weights.rows(); ++i) {
      for (std::size_t j = 0; j < layer.weights.cols(); ++j) {
        next[i] += layer.weights(i, j) * h[j];
      }
      next[i] += layer.bias(i, 0);
      if (layer.activation == nk::Activation::kRelu && next[i] < 0.0) {
        next[i] = 0.0;
      }
    }
    h = std::move(next);
  }
  for (std::size_t i = 0; i < h.size(); ++i) {
    CHECK(got(i, 0) == doctest::Approx(h[i]).epsilon(1e-6));
  }

  try {
    nk::mlp_forward<double>({layers[1], layers[0]}, input);
    FAIL("mlp_forward accepted a broken shape chain");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
  }
}

TEST_CASE("taped mlp_forward agrees with value mode") {
  Rng rng(14);
  std::vector<nk::DenseLayer<double>> layers(2);
  layers[0].weights = random_mat(5, 3, rng);
  layers[0].bias = random_mat(5, 1, rng);
  layers[0].activation = nk::Activation::kRelu;
  layers[1].weights = random_mat(2, 5, rng);
  layers[1].bias = random_mat(2, 1, rng);
  layers[1].activation = nk::Activation::kIdentity;
  const auto x = random_mat(3, 4, rng);
  const auto value = nk::mlp_forward(layers, x);

  Tape64 tape;
  std::vector<nk::TapedDense<double>> taped;
  for (const auto& layer : layers) {
    nk::TapedDense<double> tl;
    tl.weights = tape.leaf(layer.weights);
    tl.bias = tape.leaf(layer.bias);
    tl.activation = layer.activation;
    taped.push_back(tl);
  }
  const Node out = nk::mlp_forward(tape, taped, tape.leaf(x));
  const auto& taped_value = tape.value(out);
  REQUIRE(taped_value.same_shape(value));
  for (std::size_t i = 0; i < value.size(); ++i) {
    CHECK(taped_value.vec()[i] == value.vec()[i]);
  }
}

TEST_CASE("backward: pinned scalar cases") {
  // d(x^2)/dx at x=3 is 6.
  {
    Tape64 tape;
    const Node x = tape.leaf(Mat64(1, 1, 3.0));
    const Node loss = tape.sum(tape.square(x));
    auto grads = tape.backward(loss);
    CHECK(grads.at(x)(0, 0) == doctest::Approx(6.0).epsilon(1e-9));
  }
  // A leaf the loss never touches gets a zero gradient of its own shape.
  {
    Tape64 tape;
    const Node x = tape.leaf(Mat64(1, 1, 3.0));
    const Node unused = tape.leaf(Mat64(2, 3, 1.0));
    const Node loss = tape.sum(tape.square(x));
    auto grads = tape.backward(loss);
    const Mat64& g = grads.at(unused);
    REQUIRE(g.rows() == 2);
    REQUIRE(g.cols() == 3);
    for (double v : g.vec()) CHECK(v == 0.0);
  }
  // d(sum x)/dx is all ones.
  {
    Tape64 tape;
    Rng rng(15);
    const Node x = tape.leaf(random_mat(3, 2, rng));
    auto grads = tape.backward(tape.sum(x));
    for (double v : grads.at(x).vec()) CHECK(v == 1.0);
  }
  // Non-scalar loss is API misuse.
  {
    Tape64 tape;
    const Node x = tape.leaf(Mat64(2, 2, 1.0));
    try {
      tape.backward(x);
      FAIL("backward accepted a non-scalar loss");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kContract);
    }
  }
}

TEST_CASE("backward matches central differences on composite graphs") {
  // One composite touching every primitive; 100 seeded trials.
  const Builder build = [](Tape64& tape, const std::vector<Node>& in) {
    const Node a = in[0];     // 2x3
    const Node b = in[1];     // 3x2
    const Node bias = in[2];  // 2x1
    const Node c = in[3];     // 2x2
    const Node d = in[4];     // 2x2

    const Node s1 = tape.mean(
        tape.square(tape.relu(tape.add_bias(tape.matmul(a, b), bias))));
    const Node s2 = tape.sum(tape.mul(tape.exp(tape.scale(c, 0.3)), d));
    const Node s3 = tape.sum(
        tape.square(tape.clamp(tape.sub(c, d), -1.5, 1.5)));
    const Node stacked = tape.concat_rows(c, d);
    const Node s4 = tape.sum(tape.add_scalar(tape.slice_rows(stacked, 1, 3), 0.25));
    return tape.add(tape.add(s1, s2), tape.add(s3, s4));
  };

  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + static_cast<std::uint64_t>(trial));
    std::vector<Mat64> inputs;
    inputs.push_back(random_mat(2, 3, rng));
    inputs.push_back(random_mat(3, 2, rng));
    inputs.push_back(random_mat(2, 1, rng));
    inputs.push_back(random_mat(2, 2, rng));
    inputs.push_back(random_mat(2, 2, rng));
    check_gradients(std::move(inputs), build);
  }
}

TEST_CASE("adam_step: zero grads, pinned first step, damping") {
  std::vector<double> params = {1.0, -2.0, 0.5};
  const std::vector<double> zeros(3, 0.0);
  nk::AdamState<double> state(3, 1e-3);
  nk::adam_step<double>(params, zeros, state);
  CHECK(state.t == 1);
  CHECK(params[0] == 1.0);
  CHECK(params[1] == -2.0);
  CHECK(params[2] == 0.5);

  // First bias-corrected step with a constant gradient g moves by
  // -lr * g / (|g| + eps).
  std::vector<double> p2 = {0.0};
  const std::vector<double> g2 = {0.4};
  nk::AdamState<double> s2(1, 1e-3);
  nk::adam_step<double>(p2, g2, s2);
  CHECK(p2[0] == doctest::Approx(-1e-3 * 0.4 / (0.4 + 1e-8)).epsilon(1e-9));

  // A repeated identical gradient never grows the step size.
  const double first = std::abs(p2[0] - 0.0);
  const double before = p2[0];
  nk::adam_step<double>(p2, g2, s2);
  const double second = std::abs(p2[0] - before);
  CHECK(second <= first * (1.0 + 1e-6));

  std::vector<double> short_params = {1.0};
  const std::vector<double> long_grads = {1.0, 2.0};
  try {
    nk::adam_step<double>(short_params, long_grads, s2);
    FAIL("adam_step accepted mismatched lengths");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
  }
}

TEST_CASE("adam_step matches an independent scalar oracle over 50 steps") {
  Rng rng(16);
  std::vector<double> params = {0.7, -0.3, 1.2, 0.0};
  std::vector<double> oracle = params;
  nk::AdamState<double> state(4, 3e-3);
  double om[4] = {0, 0, 0, 0};
  double ov[4] = {0, 0, 0, 0};
  for (int t = 1; t <= 50; ++t) {
    std::vector<double> grads(4);
    for (auto& g : grads) g = rng.normal();
    nk::adam_step<double>(params, grads, state);
    for (int i = 0; i < 4; ++i) {
      om[i] = 0.9 * om[i] + 0.1 * grads[i];
      ov[i] = 0.999 * ov[i] + 0.001 * grads[i] * grads[i];
      const double mhat = om[i] / (1.0 - std::pow(0.9, t));
      const double vhat = ov[i] / (1.0 - std::pow(0.999, t));
      oracle[i] -= 3e-3 * mhat / (std::sqrt(vhat) + 1e-8);
    }
  }
  for (int i = 0; i < 4; ++i) {
    CHECK(params[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
  }
}

TEST_CASE("gaussian_kl: pinned values and positivity") {
  const std::vector<double> zero = {0.0};
  const std::vector<double> one = {1.0};
  CHECK(nk::gaussian_kl<double>(zero, zero, zero, zero) == doctest::Approx(0.0));
  CHECK(nk::gaussian_kl<double>(one, zero, zero, zero) == doctest::Approx(0.5));

  // q = N(0, 4), p = N(0, 1): 0.5 * (4 - 1 - ln 4).
  const std::vector<double> ln4 = {std::log(4.0)};
  CHECK(nk::gaussian_kl<double>(zero, ln4, zero, zero) ==
        doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))).epsilon(1e-9));

  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = 1 + rng.below(8);
    std::vector<double> qm(dim), ql(dim), pm(dim), pl(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      qm[i] = rng.normal();
      ql[i] = rng.normal();
      pm[i] = rng.normal();
      pl[i] = rng.normal();
    }
    CHECK(nk::gaussian_kl<double>(qm, ql, pm, pl) >= -1e-9);
    CHECK(nk::gaussian_kl<double>(qm, ql, qm, ql) == doctest::Approx(0.0));
  }

  const std::vector<double> two = {0.0, 0.0};
  try {
    nk::gaussian_kl<double>(zero, zero, two, two);
    FAIL("gaussian_kl accepted mismatched dimensions");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
  }
  const std::vector<double> inf = {std::numeric_limits<double>::infinity()};
  try {
    nk::gaussian_kl<double>(zero, inf, zero, zero);
    FAIL("gaussian_kl accepted an infinite log-variance");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNonFinite);
  }
}

TEST_CASE("gaussian_kl matches 1-D numeric quadrature") {
  Rng rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    const double mq = 2.0 * rng.normal();
    const double lq = 1.5 * (2.0 * rng.uniform() - 1.0);
    const double mp = 2.0 * rng.normal();
    const double lp = 1.5 * (2.0 * rng.uniform() - 1.0);

    const std::vector<double> vq_m = {mq}, vq_l = {lq}, vp_m = {mp}, vp_l = {lp};
    const double closed = nk::gaussian_kl<double>(vq_m, vq_l, vp_m, vp_l);

    // Simpson quadrature of q(x) * log(q(x)/p(x)).
    const double sq = std::exp(0.5 * lq);
    const double sp = std::exp(0.5 * lp);
    const double margin = 12.0 * std::max(sq, sp);
    const double lo = std::min(mq, mp) - margin;
    const double hi = std::max(mq, mp) + margin;
    const int n = 20000;  // even
    const double dx = (hi - lo) / n;
    auto integrand = [&](double x) {
      const double log_q =
          -0.5 * std::log(2.0 * 3.14159265358979323846) - 0.5 * lq -
          0.5 * (x - mq) * (x - mq) / std::exp(lq);
      const double log_p =
          -0.5 * std::log(2.0 * 3.14159265358979323846) - 0.5 * lp -
          0.5 * (x - mp) * (x - mp) / std::exp(lp);
      return std::exp(log_q) * (log_q - log_p);
    };
    double acc = integrand(lo) + integrand(hi);
    for (int i = 1; i < n; ++i) {
      acc += integrand(lo + i * dx) * (i % 2 == 1 ? 4.0 : 2.0);
    }
    const double quad = acc * dx / 3.0;
    CHECK(closed == doctest::Approx(quad).epsilon(1e-3));
    CHECK(std::abs(closed - quad) < 1e-3);
  }
}

TEST_CASE("rng substreams and fills replay deterministically") {
  Rng a = Rng::substream(42, "stream.a");
  Rng b = Rng::substream(42, "stream.a");
  Rng c = Rng::substream(42, "stream.b");
  bool any_differs = false;
  for (int i = 0; i < 64; ++i) {
    const double va = a.normal();
    CHECK(va == b.normal());
    if (va != c.normal()) any_differs = true;
  }
  CHECK(any_differs);

  Rng d(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = d.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(d.below(13) < 13);
  }

  std::vector<int> order1 = {0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<int> order2 = order1;
  Rng s1(99), s2(99);
  s1.shuffle(order1);
  s2.shuffle(order2);
  CHECK(order1 == order2);

  Rng e1(5), e2(5);
  const auto m1 = nk::random_normal<double>(3, 4, e1, 1.0);
  const auto m2 = nk::random_normal<double>(3, 4, e2, 2.0);
  for (std::size_t i = 0; i < m1.size(); ++i) {
    CHECK(m2.vec()[i] == doctest::Approx(2.0 * m1.vec()[i]).epsilon(1e-12));
  }
}

TEST_CASE("tape mean rejects empty matrices") {
  Tape64 tape;
  const Node x = tape.leaf(Mat64(1, 1, 1.0));
  (void)x;
  try {
    Tape64 t2;
    const Node empty = t2.leaf(Mat64());
    t2.mean(empty);
    FAIL("mean accepted an empty matrix");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShape);
  }
}
