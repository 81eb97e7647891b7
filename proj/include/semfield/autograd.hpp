#pragma once

// Minimal reverse-mode automatic differentiation over row-major Eigen
// matrices. A Tape records every operation of one forward pass; calling
// backward() on a 1x1 result walks the tape in reverse and accumulates
// gradients into every node that requires them.
//
// Nodes created from constants (or from operations whose inputs are all
// constant) carry no backward closure, so inference through the same code
// path costs only the forward arithmetic.

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "semfield/common.hpp"

namespace semfield::ag {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;

  const Matrix<T>& value() const { return tape_->value(id_); }
  const Matrix<T>& grad() const { return tape_->grad(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  // Receives the gradient of the node being processed.
  using Backward = std::function<void(const Matrix<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }
  Var<T> variable(Matrix<T> value) { return push(std::move(value), true, nullptr); }

  // Records an operation result. The closure is kept only when at least one
  // input participates in differentiation.
  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  template <class Derived>
  void accumulate(const Var<T>& target, const Eigen::MatrixBase<Derived>& g) {
    Node& node = nodes_[target.id()];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  void backward(const Var<T>& root) {
    if (root.rows() != 1 || root.cols() != 1) throw Error("backward: root must be a scalar");
    if (!root.requires_grad()) return;
    nodes_[root.id()].grad = Matrix<T>::Ones(1, 1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.size() == 0) continue;
      node.backward(node.grad);
    }
  }

  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Matrix<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix<T>(), requires_grad, std::move(backward)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()) + ")");
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

template <class T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw Error("matmul: inner dimensions differ");
  Tape<T>& tape = *a.tape();
  return tape.record(a.value() * b.value(), {a, b}, [&tape, a, b](const Matrix<T>& g) {
    if (a.requires_grad()) tape.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) tape.accumulate(b, a.value().transpose() * g);
  });
}

// x * weight + bias, with bias (1 x out) broadcast over rows.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (x.cols() != weight.rows()) throw Error("linear: input width does not match weight rows");
  if (bias.rows() != 1 || bias.cols() != weight.cols()) throw Error("linear: bias shape mismatch");
  Tape<T>& tape = *x.tape();
  Matrix<T> out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return tape.record(std::move(out), {x, weight, bias}, [&tape, x, weight, bias](const Matrix<T>& g) {
    if (x.requires_grad()) tape.accumulate(x, g * weight.value().transpose());
    if (weight.requires_grad()) tape.accumulate(weight, x.value().transpose() * g);
    if (bias.requires_grad()) tape.accumulate(bias, g.colwise().sum());
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tape<T>& tape = *a.tape();
  return tape.record(a.value() + b.value(), {a, b}, [&tape, a, b](const Matrix<T>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tape<T>& tape = *a.tape();
  return tape.record(a.value() - b.value(), {a, b}, [&tape, a, b](const Matrix<T>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, -g);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tape<T>& tape = *a.tape();
  return tape.record(a.value().cwiseProduct(b.value()), {a, b}, [&tape, a, b](const Matrix<T>& g) {
    if (a.requires_grad()) tape.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) tape.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tape<T>& tape = *a.tape();
  return tape.record(a.value() * factor, {a}, [&tape, a, factor](const Matrix<T>& g) {
    tape.accumulate(a, g * factor);
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tape<T>& tape = *a.tape();
  return tape.record(a.value().cwiseMax(T(0)), {a}, [&tape, a](const Matrix<T>& g) {
    tape.accumulate(a, (a.value().array() > T(0)).select(g.array(), T(0)).matrix());
  });
}

template <class T>
Var<T> gelu(const Var<T>& a) {
  Tape<T>& tape = *a.tape();
  return tape.record(a.value().unaryExpr([](T v) { return detail::gelu(v); }), {a},
                     [&tape, a](const Matrix<T>& g) {
                       tape.accumulate(
                           a, g.cwiseProduct(a.value().unaryExpr([](T v) { return detail::gelu_grad(v); })));
                     });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  Tape<T>& tape = *a.tape();
  return tape.record(a.value().unaryExpr([](T v) { return detail::softplus(v); }), {a},
                     [&tape, a](const Matrix<T>& g) {
                       tape.accumulate(
                           a, g.cwiseProduct(a.value().unaryExpr([](T v) { return detail::sigmoid(v); })));
                     });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().unaryExpr([](T v) { return detail::sigmoid(v); });
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g) {
    const Matrix<T> s = a.value().unaryExpr([](T v) { return detail::sigmoid(v); });
    tape.accumulate(a, g.cwiseProduct(s.cwiseProduct((Matrix<T>::Ones(s.rows(), s.cols()) - s))));
  });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows()) throw Error("concat_cols: row counts differ");
  Tape<T>& tape = *a.tape();
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  const Eigen::Index split = a.cols();
  return tape.record(std::move(out), {a, b}, [&tape, a, b, split](const Matrix<T>& g) {
    if (a.requires_grad()) tape.accumulate(a, g.leftCols(split));
    if (b.requires_grad()) tape.accumulate(b, g.rightCols(g.cols() - split));
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw Error("slice_cols: range out of bounds");
  Tape<T>& tape = *a.tape();
  return tape.record(a.value().middleCols(start, count), {a}, [&tape, a, start, count](const Matrix<T>& g) {
    Matrix<T> full = Matrix<T>::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    tape.accumulate(a, full);
  });
}

// Row-wise layer normalisation with learned gain and bias (1 x cols each).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  const Eigen::Index cols = x.cols();
  if (gain.cols() != cols || bias.cols() != cols) throw Error("layer_norm: parameter width mismatch");
  Tape<T>& tape = *x.tape();
  Matrix<T> normalized(x.rows(), cols);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    const T mean = row.mean();
    const T var = (row.array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    normalized.row(r) = (row.array() - mean) * inv_std(r);
  }
  Matrix<T> out = normalized.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return tape.record(std::move(out), {x, gain, bias},
                     [&tape, x, gain, bias, normalized, inv_std, cols](const Matrix<T>& g) {
                       if (gain.requires_grad())
                         tape.accumulate(gain, g.cwiseProduct(normalized).colwise().sum());
                       if (bias.requires_grad()) tape.accumulate(bias, g.colwise().sum());
                       if (!x.requires_grad()) return;
                       const Matrix<T> dn = g.array().rowwise() * gain.value().row(0).array();
                       Matrix<T> dx(g.rows(), cols);
                       const T n = static_cast<T>(cols);
                       for (Eigen::Index r = 0; r < g.rows(); ++r) {
                         const T sum_dn = dn.row(r).sum();
                         const T sum_dn_xhat = dn.row(r).dot(normalized.row(r));
                         dx.row(r) = (inv_std(r) / n) *
                                     (n * dn.row(r).array() - sum_dn - normalized.row(r).array() * sum_dn_xhat);
                       }
                       tape.accumulate(x, dx);
                     });
}

// Grouped multi-head scaled dot-product attention. Rows of `q` form
// `groups` consecutive sequences of equal length; rows of `k`/`v` likewise.
// Attention never crosses group boundaries (one group = one ray).
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Eigen::Index groups, int heads) {
  const Eigen::Index dim = q.cols();
  if (heads <= 0 || dim % heads != 0) throw Error("attention: model width must be divisible by head count");
  if (k.cols() != dim || v.cols() != dim) throw Error("attention: key/value width mismatch");
  if (k.rows() != v.rows()) throw Error("attention: key/value row mismatch");
  if (groups <= 0 || q.rows() % groups != 0 || k.rows() % groups != 0)
    throw Error("attention: rows are not divisible into groups");
  const Eigen::Index nq = q.rows() / groups;
  const Eigen::Index nk = k.rows() / groups;
  const Eigen::Index dh = dim / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  // probabilities[g * heads + h] is nq x nk
  std::vector<Matrix<T>> probabilities(static_cast<std::size_t>(groups * heads));
  Matrix<T> out(q.rows(), dim);
  for (Eigen::Index g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.value().block(g * nq, h * dh, nq, dh);
      const auto kb = k.value().block(g * nk, h * dh, nk, dh);
      const auto vb = v.value().block(g * nk, h * dh, nk, dh);
      Matrix<T> scores = (qb * kb.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < nq; ++r) {
        const T peak = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - peak).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      out.block(g * nq, h * dh, nq, dh) = scores * vb;
      probabilities[static_cast<std::size_t>(g * heads + h)] = std::move(scores);
    }
  }
  Tape<T>& tape = *q.tape();
  return tape.record(
      std::move(out), {q, k, v},
      [&tape, q, k, v, groups, heads, nq, nk, dh, inv_sqrt, probabilities = std::move(probabilities)](
          const Matrix<T>& g_out) {
        Matrix<T> dq = Matrix<T>::Zero(q.rows(), q.cols());
        Matrix<T> dk = Matrix<T>::Zero(k.rows(), k.cols());
        Matrix<T> dv = Matrix<T>::Zero(v.rows(), v.cols());
        for (Eigen::Index g = 0; g < groups; ++g) {
          for (int h = 0; h < heads; ++h) {
            const Matrix<T>& p = probabilities[static_cast<std::size_t>(g * heads + h)];
            const auto go = g_out.block(g * nq, h * dh, nq, dh);
            const auto qb = q.value().block(g * nq, h * dh, nq, dh);
            const auto kb = k.value().block(g * nk, h * dh, nk, dh);
            const auto vb = v.value().block(g * nk, h * dh, nk, dh);
            dv.block(g * nk, h * dh, nk, dh) = p.transpose() * go;
            const Matrix<T> dp = go * vb.transpose();
            Matrix<T> ds = p.cwiseProduct(dp);
            const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
            ds -= p.cwiseProduct(row_dot.replicate(1, nk));
            ds *= inv_sqrt;
            dq.block(g * nq, h * dh, nq, dh) = ds * kb;
            dk.block(g * nk, h * dh, nk, dh) = ds.transpose() * qb;
          }
        }
        tape.accumulate(q, dq);
        tape.accumulate(k, dk);
        tape.accumulate(v, dv);
      });
}

// Sum over rows of squared L2 row differences, divided by the row count.
template <class T>
Var<T> mean_squared_row_error(const Var<T>& prediction, const Matrix<T>& target) {
  if (prediction.rows() != target.rows() || prediction.cols() != target.cols())
    throw Error("mean_squared_row_error: shape mismatch");
  Tape<T>& tape = *prediction.tape();
  const Matrix<T> diff = prediction.value() - target;
  const T rows = static_cast<T>(std::max<Eigen::Index>(1, diff.rows()));
  Matrix<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / rows;
  return tape.record(std::move(out), {prediction}, [&tape, prediction, diff, rows](const Matrix<T>& g) {
    tape.accumulate(prediction, diff * (T(2) * g(0, 0) / rows));
  });
}

// Softmax cross-entropy per row, weighted by `weights[r]` and divided by
// `normalizer`. Rows with weight 0 contribute neither value nor gradient.
template <class T>
Var<T> weighted_softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& targets,
                                      const std::vector<T>& weights, T normalizer, T probability_floor = T(1e-12)) {
  const Eigen::Index rows = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != rows || static_cast<Eigen::Index>(weights.size()) != rows)
    throw Error("cross_entropy: target/weight count does not match batch");
  if (!(normalizer > T(0))) throw Error("cross_entropy: normalizer must be positive");
  Matrix<T> probs(rows, logits.cols());
  T total = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = logits.value().row(r);
    const T peak = row.maxCoeff();
    probs.row(r) = (row.array() - peak).exp();
    probs.row(r) /= probs.row(r).sum();
    if (weights[r] == T(0)) continue;
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw Error("cross_entropy: target class out of range");
    total -= weights[r] * std::log(std::max(probs(r, t), probability_floor));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / normalizer;
  Tape<T>& tape = *logits.tape();
  return tape.record(std::move(out), {logits}, [&tape, logits, probs, targets, weights, normalizer](const Matrix<T>& g) {
    Matrix<T> d = Matrix<T>::Zero(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      if (weights[r] == T(0)) continue;
      d.row(r) = probs.row(r);
      d(r, targets[static_cast<std::size_t>(r)]) -= T(1);
      d.row(r) *= weights[r] / normalizer;
    }
    tape.accumulate(logits, d * g(0, 0));
  });
}

// Frobenius inner product with a constant matrix; handy as a probe loss.
template <class T>
Var<T> dot(const Var<T>& a, const Matrix<T>& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw Error("dot: shape mismatch");
  Tape<T>& tape = *a.tape();
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().cwiseProduct(c).sum();
  return tape.record(std::move(out), {a}, [&tape, a, c](const Matrix<T>& g) { tape.accumulate(a, c * g(0, 0)); });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g) {
    tape.accumulate(a, Matrix<T>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

}  // namespace semfield::ag
