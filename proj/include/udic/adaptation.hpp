// Per-image adaptation of a pretrained codec.
//
// Stage 1 refines the latent y by gradient descent on
//   bits(sga(y)) / pixels + lambda * MSE(decode(sga(y)), x)
// with stochastic Gumbel annealing standing in for rounding. Stage 2 freezes
// the quantized latent and trains a low-rank adapter in the decoder on
//   -log2(w * p(theta + u)) / pixels + lambda * MSE(decode(y, q_w(theta)), x)
// where p is a zero-mean logistic prior, u ~ U(-w/2, w/2) and q_w is the
// uniform quantizer of step w passed straight through in the backward pass.
// Both stages keep the best iterate under the hard-quantized objective.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "udic/adam.hpp"
#include "udic/adapters.hpp"
#include "udic/codec.hpp"

namespace udic {

struct TemperatureSchedule {
  double tau0 = 0.5;
  double decay = 1e-3;
  double tau_min = 0.05;

  /// max(tau0 * exp(-decay * t), tau_min).
  double at(int iteration) const;
  bool operator==(const TemperatureSchedule&) const = default;
};

struct RefineConfig {
  double lambda = 0.0;  // 0: use the model's training lambda
  int iterations = 2000;
  std::vector<LrStage> lr_stages{{1600, 1e-3}, {400, 1e-4}};
  TemperatureSchedule temperature;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const RefineConfig&) const = default;
};

struct AdapterTrainConfig {
  double lambda = 0.0;  // 0: use the model's training lambda
  int iterations = 500;
  std::vector<LrStage> lr_stages{{400, 1e-3}, {100, 1e-4}};
  double interval = 0.06;     // quantization step w
  double prior_scale = 0.05;  // logistic prior scale s
  int rank = 2;
  std::uint64_t seed = 0;
  /// Always transmit theta = 0 (no side information).
  bool force_skip = false;

  void validate() const;
  bool operator==(const AdapterTrainConfig&) const = default;
};

struct AdaptationConfig {
  RefineConfig refine;
  AdapterTrainConfig adapter;

  bool operator==(const AdaptationConfig&) const = default;
};

/// Zero-mean logistic distribution with scale s.
struct LogisticPrior {
  double scale = 0.05;

  double cdf(double t) const;
  double log_density(double t) const;
  /// Mass of the bin [k w - w/2, k w + w/2].
  double bin_mass(std::int32_t k, double w) const;
};

// ------------------------------------------------------------- quantizers

/// Logistic(0, 1) samples, one per element. The difference of the two
/// Gumbel variables of a two-way Gumbel-softmax has this distribution.
std::vector<double> sga_noise(std::size_t n, std::mt19937_64& rng);

inline constexpr double kSgaEpsilon = 1e-6;

/// floor(y) + w_c (ceil(y) - floor(y)) with
/// w_c = sigmoid((log(f + eps) - log(1 - f + eps) + noise) / tau), f = y - floor(y).
template <class T>
ad::Tensor<T> sga_quantize(const ad::Tensor<T>& y, double tau, std::span<const double> noise);
template <class T>
ad::Tensor<T> sga_quantize(const ad::Tensor<T>& y, double tau, std::mt19937_64& rng);

struct QuantizedParams {
  std::vector<std::int32_t> indices;  // k = round(theta / w)
  std::vector<float> values;          // w * k
};

/// theta_hat = w * round(theta / w), ties away from zero.
QuantizedParams quantize_params(std::span<const float> theta, double w);

/// Sum over k of -log2 of the prior's bin mass.
double param_rate(std::span<const std::int32_t> k, const LogisticPrior& prior, double w);

// ------------------------------------------------------------------ losses

/// Inputs shared by the per-image losses: the model as constant tensors and
/// the target image reflect-padded to the model's stride, with a mask that
/// keeps only the original pixels in the distortion.
template <class T>
struct LossContext {
  const CodecModel* model = nullptr;
  std::vector<ad::Tensor<T>> params;
  ad::Tensor<T> target;  // [1, 3, Hp, Wp]
  ad::Tensor<T> mask;    // 1 on original pixels, 0 on padding
  int height = 0;
  int width = 0;

  static LossContext make(const CodecModel& model, const Image& x);
  double pixels() const { return static_cast<double>(height) * width; }
};

/// lambda * MSE on the 0..255 scale between clamp(x_hat) and the target over
/// the original pixels. The clamp passes gradients straight through.
template <class T>
ad::Tensor<T> masked_distortion(const LossContext<T>& ctx, const ad::Tensor<T>& x_hat, double lambda);

/// Stage-1 loss at fixed noise. `adapter` (optional, held fixed) is applied
/// at the insertion point.
template <class T>
ad::Tensor<T> latent_loss(const LossContext<T>& ctx, const ad::Tensor<T>& y, double lambda, double tau,
                          std::span<const double> noise, const AdapterParams* adapter = nullptr);

/// Stage-2 loss at fixed noise u (in units of parameters, |u| <= w/2).
/// `h` is the decoder activation at the insertion point, a and b are [C, M].
template <class T>
ad::Tensor<T> adapter_loss(const LossContext<T>& ctx, const ad::Tensor<T>& h, const ad::Tensor<T>& a,
                           const ad::Tensor<T>& b, const AdapterTrainConfig& cfg, double lambda,
                           std::span<const double> noise);

/// Noisy-density rate term: sum of -log2(w * p(theta + u)) in bits.
template <class T>
ad::Tensor<T> noisy_param_bits(const ad::Tensor<T>& theta, std::span<const double> noise, const LogisticPrior& prior,
                               double w);

// ------------------------------------------------------------------ stages

/// Header bytes sent only with adapters: rank and insertion index.
inline constexpr double kAdapterHeaderBits = 16.0;

struct HardScore {
  double latent_bits = 0;
  double side_bits = 0;
  double mse = 0;
  double objective = 0;  // (latent_bits + side_bits) / pixels + lambda * mse
};

struct RefineResult {
  Latent y_star;  // best continuous iterate; q(y_star) is transmitted
  HardScore initial;
  HardScore best;
  int best_iteration = -1;  // -1: the initial latent
  std::vector<double> loss_trace;
  bool diverged = false;
};

RefineResult refine_latent(const CodecModel& model, const Image& x, const RefineConfig& cfg,
                           const AdapterParams* adapter = nullptr, const std::optional<Latent>& init = {});

struct AdapterResult {
  AdapterParams theta;  // quantized values of the best iterate
  std::vector<std::int32_t> indices;
  bool send = false;
  HardScore with_adapter;  // best iterate, side bits include the header
  HardScore skip;          // theta = 0
  int best_iteration = -1;
  std::vector<double> loss_trace;
  bool diverged = false;
};

AdapterResult train_adapters(const CodecModel& model, const Latent& y_hat, const Image& x,
                             const AdapterTrainConfig& cfg);

// ------------------------------------------------------------------- modes

enum class Mode { kNone, kLatentOnly, kOurs, kBiases, kOmps, kFullDecoder, kAdaptersFirst };

std::string_view mode_name(Mode m);
/// Throws std::invalid_argument for an unknown name.
Mode parse_mode(std::string_view name);
std::span<const Mode> all_modes();

enum class SideInfoKind : std::uint8_t { kNone = 0, kAdapter = 1, kBiases = 2, kOmps = 3, kFullDecoder = 4 };

/// Everything the decoder receives besides the latent.
struct SideInfo {
  SideInfoKind kind = SideInfoKind::kNone;
  AdapterConfig adapter_config;              // kAdapter
  std::vector<std::int32_t> indices;         // kAdapter, kFullDecoder: k per parameter
  std::vector<double> biases;                // kBiases: all decoder biases
  std::vector<std::uint8_t> omp_codes;       // kOmps: 8-bit codes
  float omp_min = 0.0f;                      // kOmps
  float omp_step = 0.0f;                     // kOmps
  double interval = 0.06;                    // kAdapter, kFullDecoder: w (not transmitted)
  double prior_scale = 0.05;                 // kAdapter, kFullDecoder: s (not transmitted)

  bool operator==(const SideInfo&) const = default;
};

/// Model with the side information folded into its parameters (biases and
/// full-decoder deltas) and the synthesis options it needs (adapter, scales).
struct PatchedDecoder {
  CodecModel model;
  std::optional<AdapterParams> adapter;
  std::vector<float> channel_scales;

  SynthesisOptions options(int height = 0, int width = 0) const;
};

PatchedDecoder apply_side_info(const CodecModel& model, const SideInfo& side);

/// Decoder parameters touched by full-decoder adaptation, in declared order:
/// every decoder tensor, then the entropy-model tensors.
std::vector<std::size_t> full_decoder_param_indices(const CodecModel& model);

std::vector<double> dequantize_omps(const SideInfo& side);

struct AdaptationResult {
  Mode mode = Mode::kNone;
  Latent y_hat;
  SideInfo side;
  HardScore score;  // estimated bits under the (patched) model
  std::optional<RefineResult> stage1;
  std::optional<AdapterResult> stage2;
  std::vector<double> loss_trace;
  bool diverged = false;
};

/// Runs one mode. `stage1`, when given, must come from refine_latent on the
/// same (model, x, cfg.refine) and is reused instead of refining again.
AdaptationResult adapt_image(const CodecModel& model, const Image& x, Mode mode, const AdaptationConfig& cfg,
                             const RefineResult* stage1 = nullptr);

/// Hard objective of a latent and side information under the model.
HardScore score(const CodecModel& model, const Image& x, const Latent& y_hat, const SideInfo& side, double lambda);

/// Bits of the side information as it is coded on the wire (estimate).
double side_info_bits(const SideInfo& side, const CodecModel& model);

// ------------------------------------------------------------------ config

inline constexpr int kConfigVersion = 1;

/// key = value lines; '#' starts a comment. `version` must be present.
AdaptationConfig parse_config(std::string_view text);
AdaptationConfig load_config(const std::filesystem::path& path);
std::string format_config(const AdaptationConfig& cfg);

/// "1600@1e-3,400@1e-4"
std::vector<LrStage> parse_lr_stages(std::string_view text);
std::string format_lr_stages(std::span<const LrStage> stages);

}  // namespace udic
