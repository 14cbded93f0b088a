#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "phonelm/errors.hpp"
#include "phonelm/tensor.hpp"

namespace phonelm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by parameter name;
// one shared step counter (all parameters are updated every step).
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  uint64_t step_count() const { return step_; }

  void begin_step() { ++step_; }

  // In-place parameter update; lr_scale multiplies the base learning rate
  // (warmup/decay schedules).
  void update(const std::string& name, TensorT<T>& param,
              const TensorT<T>& grad, double lr_scale = 1.0) {
    if (!grad.all_finite()) {
      throw NumericError("non-finite gradient for parameter '" + name + "'");
    }
    auto& mom = moments_[name];
    if (mom.m.empty()) {
      mom.m = TensorT<T>(param.shape());
      mom.v = TensorT<T>(param.shape());
    }
    if (!mom.m.same_shape(param) || !grad.same_shape(param)) {
      throw ConfigError("adam: shape mismatch for parameter '" + name + "'");
    }
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.lr * lr_scale);
    const T eps = static_cast<T>(cfg_.eps);
    const T bc1 = static_cast<T>(
        1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
    const T bc2 = static_cast<T>(
        1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
    for (size_t i = 0; i < param.size(); ++i) {
      mom.m[i] = b1 * mom.m[i] + (T{1} - b1) * grad[i];
      mom.v[i] = b2 * mom.v[i] + (T{1} - b2) * grad[i] * grad[i];
      const T mhat = mom.m[i] / bc1;
      const T vhat = mom.v[i] / bc2;
      param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }

  struct Moments {
    TensorT<T> m, v;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  void set_step_count(uint64_t s) { step_ = s; }

 private:
  AdamConfig cfg_;
  uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

// Linear warmup over the first warmup_frac of total steps, then linear
// decay towards zero. Returns the multiplier for the base learning rate.
inline double warmup_decay_scale(size_t step, size_t total_steps,
                                 double warmup_frac) {
  if (total_steps == 0) return 1.0;
  const auto warmup =
      std::max<size_t>(1, static_cast<size_t>(warmup_frac * total_steps));
  if (step < warmup) {
    return static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (total_steps <= warmup) return 1.0;
  return static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

}  // namespace phonelm
