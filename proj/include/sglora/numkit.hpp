// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense-matrix kernel with reverse-mode gradients. Scope is exactly
// what the conditional generator needs: matmul, bias broadcast, ReLU, a few
// elementwise maps, reductions, Adam, and diagonal-Gaussian KL. Matrices are
// row-major; a batch of B column vectors of dimension d is stored as a d x B
// matrix. float is the working precision; every template can be instantiated
// with double for finite-difference gradient checks.

#ifndef SGLORA_NUMKIT_HPP_
#define SGLORA_NUMKIT_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sglora/errors.hpp"
#include "sglora/rng.hpp"

namespace sglora::numkit {

template <typename T>
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  static Mat from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Mat m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t r = 0;
    for (const auto& row : rows) {
      if (row.size() != m.cols_) {
        raise(ErrorCode::kShape, "ragged row in matrix literal");
      }
      std::size_t c = 0;
      for (T v : row) m(r, c++) = v;
      ++r;
    }
    return m;
  }

  static Mat column(std::span<const T> values) {
    Mat m(values.size(), 1);
    for (std::size_t i = 0; i < values.size(); ++i) m(i, 0) = values[i];
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* row(std::size_t r) { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const { return data_.data() + r * cols_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  bool same_shape(const Mat& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = Mat<float>;
using Matrix64 = Mat<double>;

namespace detail {

template <typename T>
void require_same_shape(const Mat<T>& a, const Mat<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    raise(ErrorCode::kShape,
          std::string(op) + ": " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
              "x" + std::to_string(b.cols()));
  }
}

template <typename T>
void require_finite(const Mat<T>& m, const char* op) {
  if (!m.all_finite()) {
    raise(ErrorCode::kNonFinite, std::string(op) + " produced non-finite values");
  }
}

}  // namespace detail

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
  Mat<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

// Product with a pinned accumulation order: each output element accumulates
// over the shared dimension in ascending order, one scalar chain per element.
// The right operand is transposed up front so both streams are contiguous;
// this changes memory traffic only, never the order of the additions.
template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols() != b.rows()) {
    raise(ErrorCode::kShape, "matmul: inner dims " + std::to_string(a.cols()) +
                                 " vs " + std::to_string(b.rows()));
  }
  const Mat<T> bt = transpose(b);
  Mat<T> out(a.rows(), b.cols());
  const std::size_t shared = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ar = a.row(i);
    std::size_t j = 0;
    for (; j + 4 <= b.cols(); j += 4) {
      const T* b0 = bt.row(j);
      const T* b1 = bt.row(j + 1);
      const T* b2 = bt.row(j + 2);
      const T* b3 = bt.row(j + 3);
      T acc0 = T(0), acc1 = T(0), acc2 = T(0), acc3 = T(0);
      for (std::size_t k = 0; k < shared; ++k) {
        const T av = ar[k];
        acc0 += av * b0[k];
        acc1 += av * b1[k];
        acc2 += av * b2[k];
        acc3 += av * b3[k];
      }
      out(i, j) = acc0;
      out(i, j + 1) = acc1;
      out(i, j + 2) = acc2;
      out(i, j + 3) = acc3;
    }
    for (; j < b.cols(); ++j) {
      const T* br = bt.row(j);
      T acc = T(0);
      for (std::size_t k = 0; k < shared; ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  detail::require_finite(out, "matmul");
  return out;
}

template <typename T>
Mat<T> add(const Mat<T>& a, const Mat<T>& b) {
  detail::require_same_shape(a, b, "add");
  Mat<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] += b.vec()[i];
  return out;
}

template <typename T>
Mat<T> sub(const Mat<T>& a, const Mat<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Mat<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] -= b.vec()[i];
  return out;
}

template <typename T>
Mat<T> hadamard(const Mat<T>& a, const Mat<T>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Mat<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.vec()[i] *= b.vec()[i];
  return out;
}

// Broadcast a rows x 1 bias across every column.
template <typename T>
Mat<T> add_bias(const Mat<T>& a, const Mat<T>& bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows()) {
    raise(ErrorCode::kShape, "add_bias: bias must be " +
                                 std::to_string(a.rows()) + "x1");
  }
  Mat<T> out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T b = bias(i, 0);
    T* r = out.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) r[j] += b;
  }
  return out;
}

enum class Activation { kIdentity, kRelu };

// --------------------------------------------------------------------------
// Reverse-mode tape. Operations execute eagerly and record a backward closure;
// append order is a topological order, so replaying closures in reverse visits
// each node exactly once. The tape owns one value and (during backward) one
// gradient per node. Single-owner: a tape must not be shared across threads.

template <typename T>
class Tape {
 public:
  using NodeId = std::uint32_t;
  using GradMap = std::unordered_map<NodeId, Mat<T>>;

  NodeId leaf(Mat<T> value) {
    detail::require_finite(value, "leaf");
    return push(std::move(value), true, nullptr);
  }

  NodeId matmul(NodeId a, NodeId b) {
    Mat<T> out = numkit::matmul(value(a), value(b));
    return push(std::move(out), false, [a, b](Tape& t, NodeId self) {
      t.accumulate(a, numkit::matmul(t.grad(self), transpose(t.value(b))));
      t.accumulate(b, numkit::matmul(transpose(t.value(a)), t.grad(self)));
    });
  }

  NodeId add(NodeId a, NodeId b) {
    Mat<T> out = numkit::add(value(a), value(b));
    return push(std::move(out), false, [a, b](Tape& t, NodeId self) {
      t.accumulate(a, t.grad(self));
      t.accumulate(b, t.grad(self));
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    Mat<T> out = numkit::sub(value(a), value(b));
    return push(std::move(out), false, [a, b](Tape& t, NodeId self) {
      t.accumulate(a, t.grad(self));
      Mat<T> neg = t.grad(self);
      for (auto& v : neg.vec()) v = -v;
      t.accumulate(b, std::move(neg));
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    Mat<T> out = hadamard(value(a), value(b));
    return push(std::move(out), false, [a, b](Tape& t, NodeId self) {
      t.accumulate(a, hadamard(t.grad(self), t.value(b)));
      t.accumulate(b, hadamard(t.grad(self), t.value(a)));
    });
  }

  NodeId add_bias(NodeId a, NodeId bias) {
    Mat<T> out = numkit::add_bias(value(a), value(bias));
    return push(std::move(out), false, [a, bias](Tape& t, NodeId self) {
      t.accumulate(a, t.grad(self));
      const Mat<T>& g = t.grad(self);
      Mat<T> gb(g.rows(), 1);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < g.cols(); ++j) acc += g(i, j);
        gb(i, 0) = acc;
      }
      t.accumulate(bias, std::move(gb));
    });
  }

  // ReLU with subgradient 0 at the kink.
  NodeId relu(NodeId a) {
    Mat<T> out = value(a);
    for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
    return push(std::move(out), false, [a](Tape& t, NodeId self) {
      Mat<T> g = t.grad(self);
      const Mat<T>& in = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(in.vec()[i] > T(0))) g.vec()[i] = T(0);
      }
      t.accumulate(a, std::move(g));
    });
  }

  NodeId exp(NodeId a) {
    Mat<T> out = value(a);
    for (auto& v : out.vec()) v = std::exp(v);
    detail::require_finite(out, "exp");
    return push(std::move(out), false, [a](Tape& t, NodeId self) {
      t.accumulate(a, hadamard(t.grad(self), t.value(self)));
    });
  }

  NodeId square(NodeId a) {
    Mat<T> out = value(a);
    for (auto& v : out.vec()) v = v * v;
    return push(std::move(out), false, [a](Tape& t, NodeId self) {
      Mat<T> g = t.grad(self);
      const Mat<T>& in = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        g.vec()[i] *= T(2) * in.vec()[i];
      }
      t.accumulate(a, std::move(g));
    });
  }

  NodeId scale(NodeId a, T factor) {
    Mat<T> out = value(a);
    for (auto& v : out.vec()) v *= factor;
    return push(std::move(out), false, [a, factor](Tape& t, NodeId self) {
      Mat<T> g = t.grad(self);
      for (auto& v : g.vec()) v *= factor;
      t.accumulate(a, std::move(g));
    });
  }

  NodeId add_scalar(NodeId a, T term) {
    Mat<T> out = value(a);
    for (auto& v : out.vec()) v += term;
    return push(std::move(out), false, [a](Tape& t, NodeId self) {
      t.accumulate(a, t.grad(self));
    });
  }

  // Gradient passes through wherever the input lies inside [lo, hi].
  NodeId clamp(NodeId a, T lo, T hi) {
    Mat<T> out = value(a);
    for (auto& v : out.vec()) v = v < lo ? lo : (v > hi ? hi : v);
    return push(std::move(out), false, [a, lo, hi](Tape& t, NodeId self) {
      Mat<T> g = t.grad(self);
      const Mat<T>& in = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = in.vec()[i];
        if (v < lo || v > hi) g.vec()[i] = T(0);
      }
      t.accumulate(a, std::move(g));
    });
  }

  NodeId sum(NodeId a) {
    T acc = T(0);
    for (T v : value(a).vec()) acc += v;
    Mat<T> out(1, 1);
    out(0, 0) = acc;
    return push(std::move(out), false, [a](Tape& t, NodeId self) {
      const T g = t.grad(self)(0, 0);
      Mat<T> ga(t.value(a).rows(), t.value(a).cols(), g);
      t.accumulate(a, std::move(ga));
    });
  }

  NodeId mean(NodeId a) {
    const std::size_t n = value(a).size();
    if (n == 0) raise(ErrorCode::kShape, "mean of empty matrix");
    return scale(sum(a), T(1) / static_cast<T>(n));
  }

  // Stack a on top of b: [a; b]. Column counts must match.
  NodeId concat_rows(NodeId a, NodeId b) {
    const Mat<T>& va = value(a);
    const Mat<T>& vb = value(b);
    if (va.cols() != vb.cols()) {
      raise(ErrorCode::kShape, "concat_rows: column mismatch");
    }
    Mat<T> out(va.rows() + vb.rows(), va.cols());
    std::copy(va.data(), va.data() + va.size(), out.data());
    std::copy(vb.data(), vb.data() + vb.size(), out.data() + va.size());
    return push(std::move(out), false, [a, b](Tape& t, NodeId self) {
      const Mat<T>& g = t.grad(self);
      const std::size_t ra = t.value(a).rows();
      Mat<T> ga(ra, g.cols());
      Mat<T> gb(g.rows() - ra, g.cols());
      std::copy(g.data(), g.data() + ga.size(), ga.data());
      std::copy(g.data() + ga.size(), g.data() + g.size(), gb.data());
      t.accumulate(a, std::move(ga));
      t.accumulate(b, std::move(gb));
    });
  }

  // Rows [r0, r1) of a.
  NodeId slice_rows(NodeId a, std::size_t r0, std::size_t r1) {
    const Mat<T>& va = value(a);
    if (r0 >= r1 || r1 > va.rows()) {
      raise(ErrorCode::kShape, "slice_rows: bad range");
    }
    Mat<T> out(r1 - r0, va.cols());
    std::copy(va.row(r0), va.row(r0) + out.size(), out.data());
    return push(std::move(out), false, [a, r0](Tape& t, NodeId self) {
      const Mat<T>& g = t.grad(self);
      Mat<T> ga(t.value(a).rows(), t.value(a).cols());
      std::copy(g.data(), g.data() + g.size(), ga.row(r0));
      t.accumulate(a, std::move(ga));
    });
  }

  const Mat<T>& value(NodeId id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of a scalar loss w.r.t. every leaf; untouched leaves map to
  // zero matrices. The tape is cleared afterwards.
  GradMap backward(NodeId loss) {
    if (loss >= nodes_.size()) raise(ErrorCode::kContract, "unknown loss node");
    const Mat<T>& lv = nodes_[loss].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      raise(ErrorCode::kContract, "backward requires a scalar (1x1) loss node");
    }
    for (auto& node : nodes_) {
      node.grad = Mat<T>();
      node.touched = false;
    }
    nodes_[loss].grad = Mat<T>(1, 1, T(1));
    nodes_[loss].touched = true;
    for (std::size_t i = loss + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.touched || !node.back) continue;
      node.back(*this, static_cast<NodeId>(i));
    }
    GradMap grads;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].is_leaf) continue;
      if (nodes_[i].touched) {
        grads.emplace(static_cast<NodeId>(i), std::move(nodes_[i].grad));
      } else {
        grads.emplace(static_cast<NodeId>(i),
                      Mat<T>(nodes_[i].value.rows(), nodes_[i].value.cols()));
      }
    }
    clear();
    return grads;
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool is_leaf = false;
    bool touched = false;
    std::function<void(Tape&, NodeId)> back;
  };

  NodeId push(Mat<T> value, bool is_leaf,
              std::function<void(Tape&, NodeId)> back) {
    Node node;
    node.value = std::move(value);
    node.is_leaf = is_leaf;
    node.back = std::move(back);
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  const Mat<T>& grad(NodeId id) const { return nodes_[id].grad; }

  void accumulate(NodeId id, Mat<T> g) {
    Node& node = nodes_[id];
    if (!node.touched) {
      node.grad = std::move(g);
      node.touched = true;
    } else {
      detail::require_same_shape(node.grad, g, "grad accumulate");
      for (std::size_t i = 0; i < g.size(); ++i) {
        node.grad.vec()[i] += g.vec()[i];
      }
    }
  }

  std::vector<Node> nodes_;
};

// --------------------------------------------------------------------------
// MLP forward, value mode and tape mode.

template <typename T>
struct DenseLayer {
  Mat<T> weights;  // out x in
  Mat<T> bias;     // out x 1
  Activation activation = Activation::kIdentity;
};

template <typename T>
struct TapedDense {
  typename Tape<T>::NodeId weights;
  typename Tape<T>::NodeId bias;
  Activation activation = Activation::kIdentity;
};

namespace detail {

template <typename T>
void require_chain(std::size_t layer_index, std::size_t expect,
                   std::size_t got) {
  if (expect != got) {
    raise(ErrorCode::kShape, "mlp_forward: layer " + std::to_string(layer_index) +
                                 " expects input dim " + std::to_string(expect) +
                                 ", got " + std::to_string(got));
  }
}

}  // namespace detail

template <typename T>
Mat<T> mlp_forward(const std::vector<DenseLayer<T>>& layers, const Mat<T>& x) {
  Mat<T> h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    detail::require_chain<T>(l, layers[l].weights.cols(), h.rows());
    h = add_bias(matmul(layers[l].weights, h), layers[l].bias);
    if (layers[l].activation == Activation::kRelu) {
      for (auto& v : h.vec()) v = v > T(0) ? v : T(0);
    }
  }
  return h;
}

template <typename T>
typename Tape<T>::NodeId mlp_forward(Tape<T>& tape,
                                     const std::vector<TapedDense<T>>& layers,
                                     typename Tape<T>::NodeId x) {
  auto h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    detail::require_chain<T>(l, tape.value(layers[l].weights).cols(),
                             tape.value(h).rows());
    h = tape.add_bias(tape.matmul(layers[l].weights, h), layers[l].bias);
    if (layers[l].activation == Activation::kRelu) h = tape.relu(h);
  }
  return h;
}

// --------------------------------------------------------------------------
// Adam with bias correction. Moment math runs in double regardless of T.

template <typename T>
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n, double learning_rate = 1e-3)
      : m(n, 0.0), v(n, 0.0), lr(learning_rate) {}
};

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads,
               AdamState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    raise(ErrorCode::kShape, "adam_step: parameter/gradient/state length mismatch");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) -
                               state.lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

// --------------------------------------------------------------------------
// KL(q || p) between diagonal Gaussians given (mean, logvar) pairs:
//   sum_i 0.5 * (exp(lq_i - lp_i) + (mq_i - mp_i)^2 / exp(lp_i) - 1
//                + lp_i - lq_i)

template <typename T>
double gaussian_kl(std::span<const T> q_mean, std::span<const T> q_logvar,
                   std::span<const T> p_mean, std::span<const T> p_logvar) {
  const std::size_t n = q_mean.size();
  if (q_logvar.size() != n || p_mean.size() != n || p_logvar.size() != n) {
    raise(ErrorCode::kShape, "gaussian_kl: dimension mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lq = static_cast<double>(q_logvar[i]);
    const double lp = static_cast<double>(p_logvar[i]);
    if (!std::isfinite(lq) || !std::isfinite(lp)) {
      raise(ErrorCode::kNonFinite, "gaussian_kl: log-variance must be finite");
    }
    const double dm = static_cast<double>(q_mean[i]) - static_cast<double>(p_mean[i]);
    total += 0.5 * (std::exp(lq - lp) + dm * dm / std::exp(lp) - 1.0 + lp - lq);
  }
  return total;
}

// Seeded Gaussian fill, used for weight init and noise draws.
template <typename T>
Mat<T> random_normal(std::size_t rows, std::size_t cols, Rng& rng,
                     double stddev = 1.0) {
  Mat<T> out(rows, cols);
  for (auto& v : out.vec()) v = static_cast<T>(rng.normal() * stddev);
  return out;
}

}  // namespace sglora::numkit

#endif  // SGLORA_NUMKIT_HPP_
