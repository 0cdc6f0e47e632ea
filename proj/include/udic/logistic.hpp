// Numerically stable scalar helpers for logistic distributions.
//
// The entropy model of the latents (a per-channel mixture of logistics) and
// the prior of the adapter parameters (a zero-mean logistic) both reduce to
// differences of sigmoids. All functions work in double precision.
#pragma once

#include <cmath>
#include <span>

namespace udic::logistic {

inline constexpr double kLn2 = 0.69314718055994530942;

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 30) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double log_sigmoid(double x) { return -softplus(-x); }

/// log(sigma(upper) - sigma(lower)) for upper > lower, using
/// sigma(a) - sigma(b) = sigma(a) * sigma(-b) * (1 - exp(b - a)).
inline double log_sigmoid_diff(double upper, double lower) {
  return log_sigmoid(upper) + log_sigmoid(-lower) + std::log(-std::expm1(lower - upper));
}

/// Probability of the bin [center - width/2, center + width/2] under a
/// logistic(loc, scale).
inline double bin_mass(double center, double width, double loc, double scale) {
  const double upper = (center + 0.5 * width - loc) / scale;
  const double lower = (center - 0.5 * width - loc) / scale;
  return std::exp(log_sigmoid_diff(upper, lower));
}

inline double cdf(double x, double loc, double scale) { return sigmoid((x - loc) / scale); }

/// Logistic log-density.
inline double log_density(double x, double loc, double scale) {
  const double z = (x - loc) / scale;
  return -z - 2.0 * softplus(-z) - std::log(scale);
}

/// Parameters of one channel of a logistic mixture, already transformed to
/// mixture weights (sum to one), locations and positive scales.
struct Mixture {
  std::span<const double> weights;
  std::span<const double> locs;
  std::span<const double> scales;

  double cdf(double x) const {
    double acc = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) acc += weights[k] * logistic::cdf(x, locs[k], scales[k]);
    return acc;
  }

  /// Mass of the unit-width bin centred on `x`.
  double unit_bin_mass(double x) const {
    double acc = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) acc += weights[k] * bin_mass(x, 1.0, locs[k], scales[k]);
    return acc;
  }

  /// Mass of the upper tail (x, inf).
  double upper_tail(double x) const {
    double acc = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) acc += weights[k] * sigmoid(-(x - locs[k]) / scales[k]);
    return acc;
  }
};

}  // namespace udic::logistic
