#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "qens/autodiff.hpp"
#include "qens/error.hpp"

namespace qens {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moments for a fixed, ordered set of parameters.
template <typename T>
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  /// Applies one bias-corrected update to `params` using their `grad`
  /// buffers. Gradients are validated before any parameter is touched.
  void step(const std::vector<Parameter<T>*>& params) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw ValueError("adam: parameter set changed between steps");
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto* p = params[k];
      if (p->grad.shape() != p->value.shape())
        throw ShapeError("adam: gradient shape " + shape_str(p->grad.shape()) + " does not match parameter '" +
                         p->name + "' " + shape_str(p->value.shape()));
      if (m_[k].shape() != p->value.shape()) throw ShapeError("adam: moment shape mismatch for '" + p->name + "'");
      if (!p->grad.all_finite()) throw NumericError("adam: non-finite gradient in parameter '" + p->name + "'");
    }
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T eps = static_cast<T>(cfg_.epsilon);
    const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
    const T tc1 = static_cast<T>(c1), tc2 = static_cast<T>(c2);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto* p = params[k];
      T* w = p->value.data();
      const T* g = p->grad.data();
      T* m = m_[k].data();
      T* v = v_[k].data();
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        m[i] = tb1 * m[i] + (T{1} - tb1) * g[i];
        v[i] = tb2 * v[i] + (T{1} - tb2) * g[i] * g[i];
        const T mhat = m[i] / tc1;
        const T vhat = v[i] / tc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace qens
