#include "udic/adapters.hpp"

#include <algorithm>
#include <random>
#include <string>

namespace udic {

void AdapterConfig::validate() const {
  if (rank < 1) throw std::invalid_argument("adapter rank must be >= 1");
  if (channels < 1) throw std::invalid_argument("adapter channel count must be >= 1");
  if (insertion_index < 0) throw std::invalid_argument("adapter insertion index must be >= 0");
}

AdapterParams AdapterParams::zeros(const AdapterConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(cfg.rank) * cfg.channels;
  return {cfg, std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)};
}

bool AdapterParams::is_zero() const {
  auto zero = [](float v) { return v == 0.0f; };
  return std::all_of(a.begin(), a.end(), zero) && std::all_of(b.begin(), b.end(), zero);
}

std::int64_t param_count(const AdapterConfig& cfg) {
  cfg.validate();
  return 2LL * cfg.rank * cfg.channels;
}

AdapterParams init_adapter(const AdapterConfig& cfg, std::uint64_t seed) {
  AdapterParams theta = AdapterParams::zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kAdapterInitStddev);
  for (auto& v : theta.a) v = static_cast<float>(normal(rng));
  for (auto& v : theta.b) v = static_cast<float>(normal(rng));
  return theta;
}

std::vector<float> flatten_params(const AdapterParams& theta) {
  std::vector<float> flat(theta.a);
  flat.insert(flat.end(), theta.b.begin(), theta.b.end());
  return flat;
}

AdapterParams unflatten_params(std::span<const float> flat, const AdapterConfig& cfg) {
  const auto n = static_cast<std::size_t>(param_count(cfg));
  if (flat.size() != n)
    throw std::invalid_argument("unflatten_params: expected " + std::to_string(n) + " values, got " +
                                std::to_string(flat.size()));
  AdapterParams theta{cfg, {}, {}};
  theta.a.assign(flat.begin(), flat.begin() + n / 2);
  theta.b.assign(flat.begin() + n / 2, flat.end());
  return theta;
}

std::vector<double> mixing_matrix(const AdapterParams& theta) {
  const int c = theta.config.channels, m = theta.config.rank;
  std::vector<double> w(static_cast<std::size_t>(c) * c, 0.0);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      double acc = 0;
      for (int r = 0; r < m; ++r) acc += double(theta.a[i * m + r]) * theta.b[j * m + r];
      w[i * c + j] = acc;
    }
  return w;
}

template <class T>
ad::Tensor<T> apply_adapter(const ad::Tensor<T>& h, const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
  if (h.shape().size() != 4 || h.dim(0) != 1)
    throw ad::ShapeError("apply_adapter: expected activation [1, C, H, W], got " + ad::to_string(h.shape()));
  const auto c = h.dim(1);
  if (a.shape().size() != 2 || a.dim(0) != c || a.shape() != b.shape())
    throw ad::ShapeError("apply_adapter: adapter matrices " + ad::to_string(a.shape()) + " / " +
                         ad::to_string(b.shape()) + " do not match " + std::to_string(c) + " channels");
  const auto plane = h.dim(2) * h.dim(3);
  const auto mixing = ad::matmul(a, ad::transpose(b));
  const auto flat = ad::reshape(h, {c, plane});
  const auto residual = ad::reshape(ad::matmul(mixing, flat), h.shape());
  return ad::add(h, residual);
}

template <class T>
ad::Tensor<T> apply_adapter(const ad::Tensor<T>& h, const AdapterParams& theta) {
  const ad::Shape s{theta.config.channels, theta.config.rank};
  auto a = ad::Tensor<T>::constant(s, std::vector<T>(theta.a.begin(), theta.a.end()));
  auto b = ad::Tensor<T>::constant(s, std::vector<T>(theta.b.begin(), theta.b.end()));
  return apply_adapter(h, a, b);
}

template ad::Tensor<float> apply_adapter<float>(const ad::Tensor<float>&, const ad::Tensor<float>&,
                                                const ad::Tensor<float>&);
template ad::Tensor<double> apply_adapter<double>(const ad::Tensor<double>&, const ad::Tensor<double>&,
                                                  const ad::Tensor<double>&);
template ad::Tensor<float> apply_adapter<float>(const ad::Tensor<float>&, const AdapterParams&);
template ad::Tensor<double> apply_adapter<double>(const ad::Tensor<double>&, const AdapterParams&);

}  // namespace udic
