#include "udic/adam.hpp"

#include <cmath>
#include <string>

namespace udic {

template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " params but " +
                                std::to_string(grads.size()) + " grads");
  if (!(lr > 0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  for (T g : grads) {
    if (!std::isfinite(static_cast<double>(g))) throw DivergenceError("adam_step: non-finite gradient");
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] = static_cast<T>(params[i] - lr * m_hat / (std::sqrt(v_hat) + state.eps));
  }
}

template <class T>
Adam<T>::Adam(std::vector<ad::Tensor<T>> params) : params_(std::move(params)), states_(params_.size()) {}

template <class T>
void Adam<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    adam_step<T>(params_[i].mutable_data(), params_[i].grad(), states_[i], lr);
  }
  zero_grad();
}

template <class T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double lr_at(std::span<const LrStage> stages, int it) {
  if (stages.empty()) throw std::invalid_argument("lr_at: empty schedule");
  int end = 0;
  for (const auto& s : stages) {
    end += s.iterations;
    if (it < end) return s.lr;
  }
  return stages.back().lr;
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState&, double);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState&, double);
template class Adam<float>;
template class Adam<double>;

}  // namespace udic
