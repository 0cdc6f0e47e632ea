#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "udic/autodiff.hpp"

namespace udic {

/// Thrown when a gradient contains NaN or infinity.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of `params` in place.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr);

/// Adam over a list of leaf tensors, one state per tensor.
template <class T>
class Adam {
 public:
  explicit Adam(std::vector<ad::Tensor<T>> params);

  /// Applies one update using the accumulated grads, then zeroes them.
  void step(double lr);
  void zero_grad();
  const std::vector<ad::Tensor<T>>& params() const { return params_; }

 private:
  std::vector<ad::Tensor<T>> params_;
  std::vector<AdamState> states_;
};

/// Piecewise-constant learning-rate schedule: (iterations, lr) stages.
struct LrStage {
  int iterations = 0;
  double lr = 0;

  bool operator==(const LrStage&) const = default;
};

/// Learning rate at iteration `it`; the last stage extends indefinitely.
double lr_at(std::span<const LrStage> stages, int it);

}  // namespace udic
