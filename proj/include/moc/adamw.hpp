#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moc/error.hpp"
#include "moc/nn.hpp"

namespace moc {

struct AdamWOptions {
  double lr = 5e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW update of a single parameter buffer. `step` is the already
/// incremented step count used for bias correction. Weight decay is applied
/// to the parameter directly, outside the moment estimates.
template <class T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::int64_t step, const AdamWOptions& opt) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw_update: buffer sizes differ");
  }
  if (step < 1) throw StateError("adamw_update: step counter must be incremented first");
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(opt.beta1);
  const T b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.lr);
  const T decay = static_cast<T>(opt.lr * opt.weight_decay);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T m_hat = m[i] / static_cast<T>(bc1);
    const T v_hat = v[i] / static_cast<T>(bc2);
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + static_cast<T>(opt.eps)) + decay * param[i];
  }
}

template <class T>
class AdamW {
 public:
  AdamW(NamedParams<T> params, AdamWOptions options = {})
      : params_(std::move(params)), options_(options) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.size(), T(0));
      v_.emplace_back(p.size(), T(0));
    }
  }

  void zero_grad() { zero_grads(params_); }

  void step() {
    ++step_;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      BasicVar<T> p = params_[k].second;
      const auto& g = p.grad();
      adamw_update<T>(p.mutable_value().values(), g.values(), m_[k], v_[k], step_, options_);
    }
  }

  std::int64_t step_count() const noexcept { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }
  const AdamWOptions& options() const noexcept { return options_; }
  void set_options(const AdamWOptions& o) { options_ = o; }
  const NamedParams<T>& params() const noexcept { return params_; }
  std::vector<std::vector<T>>& first_moments() noexcept { return m_; }
  std::vector<std::vector<T>>& second_moments() noexcept { return v_; }

 private:
  NamedParams<T> params_;
  AdamWOptions options_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::int64_t step_ = 0;
};

}  // namespace moc
