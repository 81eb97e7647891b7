#pragma once

// Named parameter storage, tape binding, initialisation and the Adam
// optimiser shared by the field and the fusion head.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "semfield/autograd.hpp"
#include "semfield/common.hpp"

namespace semfield::nn {

using ag::Matrix;
using ag::Tape;
using ag::Var;

template <class T>
struct Parameter {
  Matrix<T> value;
  bool trainable = true;
};

// Ordered by name so iteration (and therefore serialisation and optimiser
// updates) is deterministic.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Matrix<T> value, bool trainable = true) {
    auto [it, inserted] = params_.emplace(name, Parameter<T>{std::move(value), trainable});
    if (!inserted) throw Error("parameter already defined: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }

  // Marks every parameter whose name starts with `prefix` as non-trainable.
  // Returns the number of tensors affected.
  std::size_t freeze(const std::string& prefix) {
    std::size_t count = 0;
    for (auto& [name, p] : params_) {
      if (name.rfind(prefix, 0) == 0) {
        p.trainable = false;
        ++count;
      }
    }
    return count;
  }

  std::size_t unfreeze(const std::string& prefix) {
    std::size_t count = 0;
    for (auto& [name, p] : params_) {
      if (name.rfind(prefix, 0) == 0) {
        p.trainable = true;
        ++count;
      }
    }
    return count;
  }

  void erase_prefix(const std::string& prefix) {
    for (auto it = params_.begin(); it != params_.end();) {
      it = it->first.rfind(prefix, 0) == 0 ? params_.erase(it) : std::next(it);
    }
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Parameter<T>> params_;
};

// Binds a parameter set into one tape. Trainable parameters become
// differentiable leaves, frozen ones become constants, so gradients can
// never reach a frozen tensor.
template <class T>
class Binding {
 public:
  Binding(Tape<T>& tape, const ParameterSet<T>& params, bool differentiable = true)
      : tape_(tape), params_(params), differentiable_(differentiable) {}

  Var<T> operator[](const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Parameter<T>& p = params_.at(name);
    Var<T> v = (differentiable_ && p.trainable) ? tape_.variable(p.value) : tape_.constant(p.value);
    vars_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }

  // Gradients of the trainable parameters touched by the forward pass.
  std::map<std::string, Matrix<T>> gradients() const {
    std::map<std::string, Matrix<T>> out;
    for (const auto& [name, v] : vars_) {
      if (!v.requires_grad()) continue;
      const Matrix<T>& g = v.grad();
      out.emplace(name, g.size() == 0 ? Matrix<T>::Zero(v.rows(), v.cols()) : g);
    }
    return out;
  }

 private:
  Tape<T>& tape_;
  const ParameterSet<T>& params_;
  bool differentiable_;
  std::map<std::string, Var<T>> vars_;
};

template <class T>
Matrix<T> glorot_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix<T> w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
  return w;
}

template <class T>
void add_linear(ParameterSet<T>& params, const std::string& prefix, Eigen::Index in, Eigen::Index out, Rng& rng) {
  params.add(prefix + ".weight", glorot_uniform<T>(in, out, rng));
  params.add(prefix + ".bias", Matrix<T>::Zero(1, out));
}

template <class T>
void add_layer_norm(ParameterSet<T>& params, const std::string& prefix, Eigen::Index width) {
  params.add(prefix + ".gain", Matrix<T>::Ones(1, width));
  params.add(prefix + ".bias", Matrix<T>::Zero(1, width));
}

template <class T>
Var<T> apply_linear(Binding<T>& bind, const std::string& prefix, const Var<T>& x) {
  return ag::linear(x, bind[prefix + ".weight"], bind[prefix + ".bias"]);
}

template <class T>
Var<T> apply_layer_norm(Binding<T>& bind, const std::string& prefix, const Var<T>& x) {
  return ag::layer_norm(x, bind[prefix + ".gain"], bind[prefix + ".bias"]);
}

// Exponential learning-rate decay from `initial` to `final` over `horizon`
// steps, held at `final` afterwards.
struct ExponentialDecay {
  double initial = 5e-4;
  double final = 5e-5;
  long horizon = 1;

  double at(long step) const {
    if (horizon <= 0 || initial <= 0.0) return initial;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(horizon));
    return initial * std::pow(final / initial, t);
  }
};

template <class T>
class Adam {
 public:
  struct Moments {
    Matrix<T> first;
    Matrix<T> second;
  };

  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // Applies one update. Non-trainable parameters are skipped even when a
  // gradient is supplied for them.
  void step(ParameterSet<T>& params, const std::map<std::string, Matrix<T>>& grads, double learning_rate) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (const auto& [name, g] : grads) {
      Parameter<T>& p = params.at(name);
      if (!p.trainable) continue;
      if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
        throw Error("adam: gradient shape mismatch for " + name);
      auto [it, inserted] = moments_.try_emplace(name);
      Moments& m = it->second;
      if (inserted || m.first.size() == 0) {
        m.first = Matrix<T>::Zero(g.rows(), g.cols());
        m.second = Matrix<T>::Zero(g.rows(), g.cols());
      }
      m.first = T(beta1) * m.first + T(1.0 - beta1) * g;
      m.second = T(beta2) * m.second + T(1.0 - beta2) * g.cwiseProduct(g);
      const T step_size = static_cast<T>(learning_rate / c1);
      const T eps = static_cast<T>(epsilon);
      const T inv_c2 = static_cast<T>(1.0 / c2);
      p.value.array() -= step_size * m.first.array() / ((m.second.array() * inv_c2).sqrt() + eps);
    }
  }

  long steps() const { return steps_; }
  void set_steps(long steps) { steps_ = steps; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  std::map<std::string, Moments>& moments() { return moments_; }

 private:
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace semfield::nn
