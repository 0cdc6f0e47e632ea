// Base transform codec: convolutional analysis/synthesis transforms, uniform
// scalar quantizer and a factorized entropy model over the latent channels.
//
// Each latent channel is modelled by a mixture of K logistics; the mass of
// integer bin k is CDF(k + 1/2) - CDF(k - 1/2). Training minimizes
// bits / pixel + lambda * MSE with MSE on the 0..255 scale.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "udic/adam.hpp"
#include "udic/adapters.hpp"
#include "udic/autodiff.hpp"
#include "udic/coder.hpp"
#include "udic/image.hpp"
#include "udic/logistic.hpp"

namespace udic {

/// One convolution. Encoder layers downsample by `stride`, decoder layers
/// (transposed convolutions) upsample by it. Padding is kernel / 2.
struct LayerSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 5;
  int stride = 2;

  bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
  std::vector<LayerSpec> encoder;
  std::vector<LayerSpec> decoder;
  int latent_channels = 32;
  int mixture_components = 3;

  /// Four stride-2 5x5 layers each way with `channels` hidden and latent width.
  static Architecture desk(int channels = 32, int kernel = 5);

  int stride_product() const;
  /// Throws std::invalid_argument when layers do not chain or the decoder
  /// does not undo the encoder's downsampling.
  void validate() const;

  bool operator==(const Architecture&) const = default;
};

struct ParamTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;

  bool operator==(const ParamTensor&) const = default;
};

inline constexpr double kMinScale = 0.11;
inline constexpr int kDefaultInsertionIndex = 2;

struct CodecModel {
  Architecture arch;
  int adapter_insertion_index = kDefaultInsertionIndex;
  double lambda_train = 0.0;
  /// enc{i}.weight, enc{i}.bias, dec{i}.weight, dec{i}.bias, then
  /// entropy.logits, entropy.locs, entropy.raw_scales.
  std::vector<ParamTensor> params;

  static CodecModel init(const Architecture& arch, std::uint64_t seed, int insertion_index = kDefaultInsertionIndex);
  /// All weights and biases zero; entropy model at its default shape.
  static CodecModel zeros(const Architecture& arch, int insertion_index = kDefaultInsertionIndex);

  void validate() const;
  int latent_channels() const { return arch.latent_channels; }
  std::int64_t parameter_count() const;

  std::size_t enc_weight(int layer) const { return 2 * static_cast<std::size_t>(layer); }
  std::size_t enc_bias(int layer) const { return enc_weight(layer) + 1; }
  std::size_t dec_weight(int layer) const { return 2 * (arch.encoder.size() + layer); }
  std::size_t dec_bias(int layer) const { return dec_weight(layer) + 1; }
  std::size_t entropy_logits() const { return 2 * (arch.encoder.size() + arch.decoder.size()); }
  std::size_t entropy_locs() const { return entropy_logits() + 1; }
  std::size_t entropy_raw_scales() const { return entropy_logits() + 2; }

  bool operator==(const CodecModel&) const = default;
};

/// Adapter config matching a model's insertion point.
AdapterConfig adapter_config(const CodecModel& model, int rank = 2);

/// Latent tensor of one image, shape C x h x w.
struct Latent {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  Latent() = default;
  Latent(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

  ad::Shape shape4() const { return {1, channels, height, width}; }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const Latent&) const = default;
};

Latent latent_from(const ad::Shape& shape, std::span<const float> values);

// ------------------------------------------------------------ graph builders

/// Parameters of a model as tensors on a tape, in declared order.
template <class T>
std::vector<ad::Tensor<T>> model_tensors(const CodecModel& model, bool trainable);

template <class T>
using ActivationHook = std::function<ad::Tensor<T>(const ad::Tensor<T>&)>;

/// x: [N, 3, H, W] -> y: [N, C, H / s, W / s].
template <class T>
ad::Tensor<T> analysis(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& x);

/// y: [N, C, h, w] -> unclamped reconstruction. `hook`, when set, rewrites
/// the activation entering decoder layer `model.adapter_insertion_index`.
template <class T>
ad::Tensor<T> synthesis(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& y,
                        const ActivationHook<T>& hook = {});

/// Decoder layers [begin, end) applied to h. The activation follows every
/// layer but the last one of the decoder.
template <class T>
ad::Tensor<T> synthesis_range(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& h,
                              int begin, int end);

/// Per-element -log2 of the unit bin mass around y.
template <class T>
ad::Tensor<T> latent_bits(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& y);

// ----------------------------------------------------------- entropy model

/// Double-precision view of the learned per-channel distributions, plus the
/// 16-bit coding tables derived from them.
class EntropyModel {
 public:
  explicit EntropyModel(const CodecModel& model);

  int channels() const { return channels_; }
  double cdf(int c, double x) const;
  /// Mass of the integer bin k.
  double bin_mass(int c, std::int32_t k) const;
  /// Supported symbols [lo, hi]; everything else falls into the tail bin.
  std::int32_t lo(int c) const { return lo_[c]; }
  std::int32_t hi(int c) const { return hi_[c]; }
  /// CDF(lo - 1/2) + (1 - CDF(hi + 1/2)).
  double tail_mass(int c) const;
  /// -log2 of the symbol's bin mass, or of the tail mass plus the escape
  /// payload when outside [lo, hi].
  double symbol_bits(int c, std::int32_t k) const;
  const coder::CdfTable& table(int c) const { return tables_[c]; }

  static constexpr double kTailProbability = 1e-6;
  static constexpr int kMaxSupport = 255;

 private:
  logistic::Mixture mixture(int c) const;

  int channels_ = 0;
  int components_ = 0;
  std::vector<double> weights_, locs_, scales_;
  std::vector<std::int32_t> lo_, hi_;
  std::vector<coder::CdfTable> tables_;
};

// ------------------------------------------------------------------ codec

/// Reflect-pads to the stride product and runs the analysis transform.
Latent encode_latent(const CodecModel& model, const Image& x);

/// Nearest integer, ties away from zero.
Latent quantize(const Latent& y);
float quantize_value(float v);

struct SynthesisOptions {
  const AdapterParams* adapter = nullptr;
  /// Per-channel multipliers at the insertion point (empty: none).
  std::span<const float> channel_scales;
  /// Crop to these dims when positive.
  int height = 0;
  int width = 0;
};

/// Reconstruction clamped to [0, 1]. Without crop dims the output has the
/// padded size.
Image decode(const CodecModel& model, const Latent& y_hat, const AdapterParams* adapter = nullptr);
Image decode(const CodecModel& model, const Latent& y_hat, const SynthesisOptions& options);

/// Estimated bits of an integer latent.
double rate_latent(const EntropyModel& em, const Latent& y_hat);
/// Bits of a real-valued (relaxed) latent under the unit-bin form.
double rate_latent_relaxed(const CodecModel& model, const Latent& y);

/// MSE over pixels and channels on the 0..255 scale.
double distortion(const Image& x, const Image& x_hat);

// --------------------------------------------------------------- training

struct PretrainSchedule {
  int epochs = 1;
  std::vector<LrStage> lr_stages{{1, 1e-4}};  // iteration counts in epochs
  int batch_size = 8;
  std::uint64_t seed = 0;
  /// Called after every epoch with (epoch index, mean training loss).
  std::function<void(int, double)> on_epoch;
};

/// Thrown when the training loss becomes non-finite. Holds the model as of
/// the last step whose loss was finite.
class PretrainDivergence : public DivergenceError {
 public:
  PretrainDivergence(const std::string& what, CodecModel last_good)
      : DivergenceError(what), last_good_(std::move(last_good)) {}
  const CodecModel& last_good() const { return last_good_; }

 private:
  CodecModel last_good_;
};

/// Mini-batch Adam on bits/pixel + lambda * MSE. The rate sees y plus
/// uniform noise; the decoder sees round(y) through a straight-through
/// estimator. All patches must share one size (a multiple of the stride).
CodecModel pretrain(CodecModel model, std::span<const Image> dataset, double lambda, const PretrainSchedule& schedule);

/// Loss of the hard-quantized pipeline on one image, bits/pixel + lambda*MSE.
double hard_objective(const CodecModel& model, const Image& x, double lambda);

// ------------------------------------------------------------- checkpoint

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_model(const CodecModel& model);
CodecModel parse_model(std::span<const std::uint8_t> bytes);
void save_model(const CodecModel& model, const std::filesystem::path& path);
CodecModel load_model(const std::filesystem::path& path);

}  // namespace udic
