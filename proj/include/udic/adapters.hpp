// Low-rank residual adapters inserted into the synthesis transform.
//
// An adapter with rank M over C channels holds A, B in R^{C x M} and maps an
// activation h to h + (A B^T) h, mixing channels at every spatial position.
// With A = B = 0 it is the identity.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "udic/autodiff.hpp"

namespace udic {

struct AdapterConfig {
  int rank = 2;
  int channels = 32;
  int insertion_index = 2;

  void validate() const;
  bool operator==(const AdapterConfig&) const = default;
};

struct AdapterParams {
  AdapterConfig config;
  std::vector<float> a;  // C x M, row-major
  std::vector<float> b;  // C x M, row-major

  static AdapterParams zeros(const AdapterConfig& cfg);
  bool is_zero() const;
  bool operator==(const AdapterParams&) const = default;
};

/// 2 * M * C.
std::int64_t param_count(const AdapterConfig& cfg);

/// Entries of A and B drawn i.i.d. from N(0, 0.02^2).
AdapterParams init_adapter(const AdapterConfig& cfg, std::uint64_t seed);
inline constexpr double kAdapterInitStddev = 0.02;

/// A (row-major) followed by B (row-major).
std::vector<float> flatten_params(const AdapterParams& theta);
AdapterParams unflatten_params(std::span<const float> flat, const AdapterConfig& cfg);

/// C x C channel-mixing matrix A B^T, row-major, in double.
std::vector<double> mixing_matrix(const AdapterParams& theta);

/// Graph form: h is [1, C, H, W]; a and b are [C, M].
template <class T>
ad::Tensor<T> apply_adapter(const ad::Tensor<T>& h, const ad::Tensor<T>& a, const ad::Tensor<T>& b);

/// Value form over constant tensors.
template <class T>
ad::Tensor<T> apply_adapter(const ad::Tensor<T>& h, const AdapterParams& theta);

}  // namespace udic
