#include "udic/codec.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "udic/bytes.hpp"

namespace udic {

namespace {

constexpr std::string_view kCheckpointMagic = "UDCM";

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

ParamTensor make_param(std::string name, ad::Shape shape, float fill = 0.0f) {
  const auto n = static_cast<std::size_t>(ad::numel(shape));
  return {std::move(name), std::move(shape), std::vector<float>(n, fill)};
}

std::vector<ParamTensor> param_layout(const Architecture& arch) {
  std::vector<ParamTensor> p;
  for (std::size_t i = 0; i < arch.encoder.size(); ++i) {
    const auto& l = arch.encoder[i];
    p.push_back(make_param("enc" + std::to_string(i) + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel}));
    p.push_back(make_param("enc" + std::to_string(i) + ".bias", {l.out_channels}));
  }
  for (std::size_t i = 0; i < arch.decoder.size(); ++i) {
    const auto& l = arch.decoder[i];
    p.push_back(make_param("dec" + std::to_string(i) + ".weight", {l.in_channels, l.out_channels, l.kernel, l.kernel}));
    p.push_back(make_param("dec" + std::to_string(i) + ".bias", {l.out_channels}));
  }
  const ad::Shape em{arch.latent_channels, arch.mixture_components};
  p.push_back(make_param("entropy.logits", em));
  p.push_back(make_param("entropy.locs", em));
  p.push_back(make_param("entropy.raw_scales", em));
  return p;
}

void init_entropy(CodecModel& m) {
  const int k = m.arch.mixture_components;
  // Components start spread over [-1, 1] with unit scale.
  const float raw = static_cast<float>(std::log(std::expm1(1.0 - kMinScale)));
  auto& locs = m.params[m.entropy_locs()].values;
  for (int c = 0; c < m.arch.latent_channels; ++c)
    for (int j = 0; j < k; ++j) locs[c * k + j] = k == 1 ? 0.0f : -1.0f + 2.0f * j / (k - 1);
  std::fill(m.params[m.entropy_raw_scales()].values.begin(), m.params[m.entropy_raw_scales()].values.end(), raw);
}

ad::ConvOptions conv_options(const LayerSpec& l, bool transposed) {
  return {l.stride, l.kernel / 2, transposed ? l.stride - 1 : 0};
}

template <class T>
ad::Tensor<T> image_tensor(const Image& img) {
  return ad::Tensor<T>::constant({1, 3, img.height, img.width}, std::vector<T>(img.data.begin(), img.data.end()));
}

template <class T>
ad::Tensor<T> latent_tensor(const Latent& y) {
  return ad::Tensor<T>::constant(y.shape4(), std::vector<T>(y.values.begin(), y.values.end()));
}

}  // namespace

// ---------------------------------------------------------------- structure

Architecture Architecture::desk(int channels, int kernel) {
  Architecture a;
  a.latent_channels = channels;
  a.encoder = {{3, channels, kernel, 2}, {channels, channels, kernel, 2}, {channels, channels, kernel, 2},
               {channels, channels, kernel, 2}};
  a.decoder = {{channels, channels, kernel, 2}, {channels, channels, kernel, 2}, {channels, channels, kernel, 2},
               {channels, 3, kernel, 2}};
  return a;
}

int Architecture::stride_product() const {
  int s = 1;
  for (const auto& l : encoder) s *= l.stride;
  return s;
}

void Architecture::validate() const {
  require(!encoder.empty() && !decoder.empty(), "architecture needs encoder and decoder layers");
  require(latent_channels >= 1, "latent channel count must be positive");
  require(mixture_components >= 1 && mixture_components <= 16, "mixture component count must be in [1, 16]");
  auto check = [](const std::vector<LayerSpec>& layers, int first_in, int last_out, const char* what) {
    int in = first_in;
    for (const auto& l : layers) {
      require(l.in_channels == in, std::string(what) + " layers do not chain");
      require(l.out_channels >= 1 && l.out_channels <= 4096, std::string(what) + " channel count out of range");
      require(l.kernel >= 1 && l.kernel % 2 == 1 && l.kernel <= 15, std::string(what) + " kernel must be odd, <= 15");
      require(l.stride >= 1 && l.stride <= 4, std::string(what) + " stride must be in [1, 4]");
      in = l.out_channels;
    }
    require(in == last_out, std::string(what) + " output width mismatch");
  };
  check(encoder, 3, latent_channels, "encoder");
  check(decoder, latent_channels, 3, "decoder");
  int up = 1;
  for (const auto& l : decoder) up *= l.stride;
  require(up == stride_product(), "decoder upsampling does not match encoder downsampling");
}

CodecModel CodecModel::zeros(const Architecture& arch, int insertion_index) {
  arch.validate();
  CodecModel m;
  m.arch = arch;
  m.adapter_insertion_index = insertion_index;
  m.params = param_layout(arch);
  init_entropy(m);
  m.validate();
  return m;
}

CodecModel CodecModel::init(const Architecture& arch, std::uint64_t seed, int insertion_index) {
  CodecModel m = zeros(arch, insertion_index);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::vector<float>& w, double stddev) {
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& v : w) v = static_cast<float>(normal(rng));
  };
  for (std::size_t i = 0; i < arch.encoder.size(); ++i) {
    const auto& l = arch.encoder[i];
    fill(m.params[m.enc_weight(static_cast<int>(i))].values, std::sqrt(2.0 / (l.in_channels * l.kernel * l.kernel)));
  }
  for (std::size_t i = 0; i < arch.decoder.size(); ++i) {
    const auto& l = arch.decoder[i];
    // Each output of a strided transposed conv sees about K^2 / s^2 taps per input channel.
    const double fan_in = static_cast<double>(l.in_channels) * l.kernel * l.kernel / (l.stride * l.stride);
    const bool last = i + 1 == arch.decoder.size();
    fill(m.params[m.dec_weight(static_cast<int>(i))].values, (last ? 0.5 : 1.0) * std::sqrt(2.0 / fan_in));
  }
  auto& out_bias = m.params[m.dec_bias(static_cast<int>(arch.decoder.size()) - 1)].values;
  std::fill(out_bias.begin(), out_bias.end(), 0.5f);
  return m;
}

void CodecModel::validate() const {
  arch.validate();
  require(adapter_insertion_index >= 0 && adapter_insertion_index < static_cast<int>(arch.decoder.size()),
          "adapter insertion index " + std::to_string(adapter_insertion_index) + " outside the decoder");
  require(arch.decoder[adapter_insertion_index].in_channels == arch.latent_channels,
          "adapter insertion index must address an activation of " + std::to_string(arch.latent_channels) +
              " channels");
  const auto layout = param_layout(arch);
  require(params.size() == layout.size(), "parameter list does not match the architecture");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    require(params[i].name == layout[i].name && params[i].shape == layout[i].shape,
            "parameter " + layout[i].name + " has unexpected name or shape");
    require(params[i].values.size() == layout[i].values.size(), "parameter " + layout[i].name + " has wrong size");
  }
}

std::int64_t CodecModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params) n += static_cast<std::int64_t>(p.values.size());
  return n;
}

AdapterConfig adapter_config(const CodecModel& model, int rank) {
  AdapterConfig cfg{rank, model.arch.decoder.at(model.adapter_insertion_index).in_channels,
                    model.adapter_insertion_index};
  cfg.validate();
  return cfg;
}

Latent latent_from(const ad::Shape& shape, std::span<const float> values) {
  if (shape.size() != 4 || shape[0] != 1) throw ad::ShapeError("latent tensor must be [1, C, h, w]");
  Latent y(static_cast<int>(shape[1]), static_cast<int>(shape[2]), static_cast<int>(shape[3]));
  if (values.size() != y.values.size()) throw ad::ShapeError("latent value count mismatch");
  std::copy(values.begin(), values.end(), y.values.begin());
  return y;
}

// ---------------------------------------------------------------- graphs

template <class T>
std::vector<ad::Tensor<T>> model_tensors(const CodecModel& model, bool trainable) {
  std::vector<ad::Tensor<T>> out;
  out.reserve(model.params.size());
  for (const auto& p : model.params) {
    std::vector<T> v(p.values.begin(), p.values.end());
    out.push_back(trainable ? ad::Tensor<T>::parameter(p.shape, std::move(v))
                            : ad::Tensor<T>::constant(p.shape, std::move(v)));
  }
  return out;
}

template <class T>
ad::Tensor<T> analysis(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& x) {
  const auto& layers = model.arch.encoder;
  ad::Tensor<T> h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const int l = static_cast<int>(i);
    h = ad::conv2d(h, p[model.enc_weight(l)], p[model.enc_bias(l)], conv_options(layers[i], false));
    if (i + 1 < layers.size()) h = ad::leaky_relu(h);
  }
  return h;
}

template <class T>
ad::Tensor<T> synthesis_range(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& h,
                              int begin, int end) {
  const auto& layers = model.arch.decoder;
  const int n = static_cast<int>(layers.size());
  if (begin < 0 || end > n || begin > end) throw std::out_of_range("synthesis_range: bad layer range");
  ad::Tensor<T> out = h;
  for (int l = begin; l < end; ++l) {
    out = ad::conv_transpose2d(out, p[model.dec_weight(l)], p[model.dec_bias(l)], conv_options(layers[l], true));
    if (l + 1 < n) out = ad::leaky_relu(out);
  }
  return out;
}

template <class T>
ad::Tensor<T> synthesis(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& y,
                        const ActivationHook<T>& hook) {
  const int n = static_cast<int>(model.arch.decoder.size());
  if (!hook) return synthesis_range(model, p, y, 0, n);
  const int at = model.adapter_insertion_index;
  return synthesis_range(model, p, hook(synthesis_range(model, p, y, 0, at)), at, n);
}

template <class T>
ad::Tensor<T> latent_bits(const CodecModel& model, const std::vector<ad::Tensor<T>>& p, const ad::Tensor<T>& y) {
  return ad::logistic_mixture_bits(y, p[model.entropy_logits()], p[model.entropy_locs()],
                                   p[model.entropy_raw_scales()], kMinScale);
}

#define UDIC_INSTANTIATE(T)                                                                                       \
  template std::vector<ad::Tensor<T>> model_tensors<T>(const CodecModel&, bool);                                  \
  template ad::Tensor<T> analysis<T>(const CodecModel&, const std::vector<ad::Tensor<T>>&, const ad::Tensor<T>&); \
  template ad::Tensor<T> synthesis<T>(const CodecModel&, const std::vector<ad::Tensor<T>>&, const ad::Tensor<T>&, \
                                      const ActivationHook<T>&);                                                  \
  template ad::Tensor<T> synthesis_range<T>(const CodecModel&, const std::vector<ad::Tensor<T>>&,                 \
                                            const ad::Tensor<T>&, int, int);                                      \
  template ad::Tensor<T> latent_bits<T>(const CodecModel&, const std::vector<ad::Tensor<T>>&, const ad::Tensor<T>&);
UDIC_INSTANTIATE(float)
UDIC_INSTANTIATE(double)
#undef UDIC_INSTANTIATE

// ---------------------------------------------------------- entropy model

EntropyModel::EntropyModel(const CodecModel& model)
    : channels_(model.arch.latent_channels), components_(model.arch.mixture_components) {
  const auto& logits = model.params[model.entropy_logits()].values;
  const auto& locs = model.params[model.entropy_locs()].values;
  const auto& raw = model.params[model.entropy_raw_scales()].values;
  const int k = components_;
  weights_.resize(logits.size());
  locs_.assign(locs.begin(), locs.end());
  scales_.resize(raw.size());
  for (int c = 0; c < channels_; ++c) {
    double mx = -DBL_MAX;
    for (int j = 0; j < k; ++j) mx = std::max(mx, double(logits[c * k + j]));
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(logits[c * k + j] - mx);
    for (int j = 0; j < k; ++j) {
      weights_[c * k + j] = std::exp(logits[c * k + j] - mx) / z;
      scales_[c * k + j] = logistic::softplus(raw[c * k + j]) + kMinScale;
    }
  }
  for (double v : locs_)
    if (!std::isfinite(v)) throw std::invalid_argument("entropy model has non-finite parameters");

  lo_.resize(channels_);
  hi_.resize(channels_);
  tables_.reserve(channels_);
  for (int c = 0; c < channels_; ++c) {
    const auto mix = mixture(c);
    auto quantile = [&](double p) {
      const double smax = *std::max_element(mix.scales.begin(), mix.scales.end());
      double a = *std::min_element(mix.locs.begin(), mix.locs.end()) - 40.0 * smax - 1.0;
      double b = *std::max_element(mix.locs.begin(), mix.locs.end()) + 40.0 * smax + 1.0;
      for (int it = 0; it < 200 && b - a > 1e-9; ++it) {
        const double m = 0.5 * (a + b);
        (mix.cdf(m) < p ? a : b) = m;
      }
      return 0.5 * (a + b);
    };
    auto lo = static_cast<std::int32_t>(std::floor(quantile(kTailProbability / 2)));
    auto hi = static_cast<std::int32_t>(std::ceil(quantile(1.0 - kTailProbability / 2)));
    if (hi - lo + 1 > kMaxSupport) {
      lo = static_cast<std::int32_t>(std::lround(quantile(0.5))) - kMaxSupport / 2;
      hi = lo + kMaxSupport - 1;
    }
    lo_[c] = lo;
    hi_[c] = hi;
    std::vector<double> masses;
    masses.reserve(hi - lo + 1);
    for (std::int32_t s = lo; s <= hi; ++s) masses.push_back(bin_mass(c, s));
    tables_.push_back(coder::build_cdf(masses, lo, std::max(tail_mass(c), DBL_MIN)));
  }
}

logistic::Mixture EntropyModel::mixture(int c) const {
  const auto k = static_cast<std::size_t>(components_);
  const auto off = static_cast<std::size_t>(c) * k;
  return {std::span(weights_).subspan(off, k), std::span(locs_).subspan(off, k), std::span(scales_).subspan(off, k)};
}

double EntropyModel::cdf(int c, double x) const { return mixture(c).cdf(x); }

double EntropyModel::bin_mass(int c, std::int32_t k) const { return mixture(c).unit_bin_mass(k); }

double EntropyModel::tail_mass(int c) const {
  const auto mix = mixture(c);
  return mix.cdf(lo_[c] - 0.5) + mix.upper_tail(hi_[c] + 0.5);
}

double EntropyModel::symbol_bits(int c, std::int32_t k) const {
  if (k >= lo_[c] && k <= hi_[c]) return -std::log2(bin_mass(c, k));
  const std::int64_t d = k < lo_[c] ? std::int64_t{lo_[c]} - k : std::int64_t{k} - hi_[c];
  return -std::log2(std::max(tail_mass(c), DBL_MIN)) + coder::escape_payload_bits(static_cast<std::uint64_t>(d));
}

// ------------------------------------------------------------------ codec

Latent encode_latent(const CodecModel& model, const Image& x) {
  const int s = model.arch.stride_product();
  if (x.height < s || x.width < s)
    throw std::invalid_argument("image " + std::to_string(x.width) + "x" + std::to_string(x.height) +
                                " is smaller than one " + std::to_string(s) + "x" + std::to_string(s) + " block");
  const Image padded = pad_reflect(x, s);
  const auto p = model_tensors<float>(model, false);
  const auto y = analysis(model, p, image_tensor<float>(padded));
  return latent_from(y.shape(), y.data());
}

float quantize_value(float v) { return std::round(v); }

Latent quantize(const Latent& y) {
  Latent q = y;
  for (auto& v : q.values) v = quantize_value(v);
  return q;
}

Image decode(const CodecModel& model, const Latent& y_hat, const AdapterParams* adapter) {
  SynthesisOptions opt;
  opt.adapter = adapter;
  return decode(model, y_hat, opt);
}

Image decode(const CodecModel& model, const Latent& y_hat, const SynthesisOptions& options) {
  const int c = model.arch.latent_channels;
  if (y_hat.channels != c)
    throw ad::ShapeError("latent has " + std::to_string(y_hat.channels) + " channels, model expects " +
                         std::to_string(c));
  if (y_hat.height < 1 || y_hat.width < 1) throw ad::ShapeError("empty latent");
  const int width_at = model.arch.decoder[model.adapter_insertion_index].in_channels;
  if (options.adapter) {
    const auto& cfg = options.adapter->config;
    if (cfg.channels != width_at)
      throw ad::ShapeError("adapter channel width " + std::to_string(cfg.channels) + " != " + std::to_string(width_at));
    if (cfg.insertion_index != model.adapter_insertion_index)
      throw std::invalid_argument("adapter insertion index does not match the model");
  }
  if (!options.channel_scales.empty() && static_cast<int>(options.channel_scales.size()) != width_at)
    throw ad::ShapeError("channel scale count does not match the insertion point");

  ActivationHook<float> hook;
  if (options.adapter || !options.channel_scales.empty()) {
    hook = [&](const ad::Tensor<float>& h) {
      ad::Tensor<float> out = h;
      if (options.adapter) out = apply_adapter(out, *options.adapter);
      if (!options.channel_scales.empty())
        out = ad::scale_channels(
            out, ad::Tensor<float>::constant({width_at}, {options.channel_scales.begin(), options.channel_scales.end()}));
      return out;
    };
  }
  const auto p = model_tensors<float>(model, false);
  const auto out = synthesis(model, p, latent_tensor<float>(y_hat), hook);
  Image img(static_cast<int>(out.dim(2)), static_cast<int>(out.dim(3)));
  std::transform(out.data().begin(), out.data().end(), img.data.begin(),
                 [](float v) { return std::clamp(v, 0.0f, 1.0f); });
  if (options.height > 0 && options.width > 0) return crop(img, options.height, options.width);
  return img;
}

double rate_latent(const EntropyModel& em, const Latent& y_hat) {
  if (y_hat.channels != em.channels()) throw ad::ShapeError("latent channel count does not match the entropy model");
  double bits = 0;
  const auto plane = y_hat.plane();
  for (int c = 0; c < y_hat.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      bits += em.symbol_bits(c, static_cast<std::int32_t>(y_hat.values[c * plane + i]));
  return bits;
}

double rate_latent_relaxed(const CodecModel& model, const Latent& y) {
  const auto p = model_tensors<double>(model, false);
  return ad::sum(latent_bits(model, p, latent_tensor<double>(y))).item();
}

double distortion(const Image& x, const Image& x_hat) {
  if (x.height != x_hat.height || x.width != x_hat.width || x.data.size() != x_hat.data.size())
    throw std::invalid_argument("distortion: image shapes differ");
  if (x.data.empty()) throw std::invalid_argument("distortion: empty image");
  double acc = 0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = (double(x.data[i]) - double(x_hat.data[i])) * 255.0;
    acc += d * d;
  }
  return acc / static_cast<double>(x.data.size());
}

double hard_objective(const CodecModel& model, const Image& x, double lambda) {
  const Latent y_hat = quantize(encode_latent(model, x));
  const double bits = rate_latent(EntropyModel(model), y_hat);
  SynthesisOptions opt;
  opt.height = x.height;
  opt.width = x.width;
  return bits / static_cast<double>(x.pixels()) + lambda * distortion(x, decode(model, y_hat, opt));
}

// --------------------------------------------------------------- training

CodecModel pretrain(CodecModel model, std::span<const Image> dataset, double lambda, const PretrainSchedule& schedule) {
  model.validate();
  if (!(lambda > 0)) throw std::invalid_argument("pretrain: lambda must be positive");
  if (schedule.epochs < 0 || schedule.batch_size < 1) throw std::invalid_argument("pretrain: invalid schedule");
  model.lambda_train = lambda;
  if (schedule.epochs == 0) return model;
  if (dataset.empty()) throw std::invalid_argument("pretrain: empty dataset");
  const int h = dataset.front().height, w = dataset.front().width;
  const int s = model.arch.stride_product();
  for (const auto& img : dataset)
    if (img.height != h || img.width != w) throw std::invalid_argument("pretrain: patches must share one size");
  if (h % s != 0 || w % s != 0) throw std::invalid_argument("pretrain: patch size must be a multiple of the stride");

  auto params = model_tensors<float>(model, true);
  Adam<float> opt(params);
  std::mt19937_64 rng(schedule.seed);
  std::uniform_real_distribution<float> noise(-0.5f, 0.5f);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_image = static_cast<std::size_t>(3) * h * w;

  auto snapshot = [&] {
    CodecModel m = model;
    for (std::size_t i = 0; i < params.size(); ++i)
      std::copy(params[i].data().begin(), params[i].data().end(), m.params[i].values.begin());
    return m;
  };
  CodecModel last_good = model;

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = lr_at(schedule.lr_stages, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t b = std::min<std::size_t>(schedule.batch_size, order.size() - start);
      std::vector<float> batch(b * per_image);
      for (std::size_t i = 0; i < b; ++i)
        std::copy(dataset[order[start + i]].data.begin(), dataset[order[start + i]].data.end(),
                  batch.begin() + i * per_image);
      const auto x = ad::Tensor<float>::constant({static_cast<std::int64_t>(b), 3, h, w}, std::move(batch));
      const auto y = analysis(model, params, x);
      std::vector<float> u(y.numel()), rounded(y.numel());
      for (auto& v : u) v = noise(rng);
      std::transform(y.data().begin(), y.data().end(), rounded.begin(), quantize_value);
      const auto bits = ad::sum(latent_bits(model, params, ad::add(y, ad::Tensor<float>::constant(y.shape(), u))));
      const auto x_hat = synthesis(model, params, ad::straight_through(y, std::move(rounded)));
      const auto loss = ad::add(ad::scale(bits, 1.0 / (static_cast<double>(b) * h * w)),
                                ad::scale(ad::mse(x_hat, x), lambda * 255.0 * 255.0));
      const double value = loss.item();
      if (!std::isfinite(value))
        throw PretrainDivergence("pretrain: non-finite loss at epoch " + std::to_string(epoch), std::move(last_good));
      last_good = snapshot();
      ad::backward(loss);
      try {
        opt.step(lr);
      } catch (const DivergenceError& e) {
        throw PretrainDivergence(std::string("pretrain: ") + e.what(), std::move(last_good));
      }
      loss_sum += value;
      ++steps;
    }
    if (schedule.on_epoch) schedule.on_epoch(epoch, loss_sum / steps);
  }
  return snapshot();
}

// ------------------------------------------------------------- checkpoint

std::vector<std::uint8_t> serialize_model(const CodecModel& model) {
  model.validate();
  ByteWriter out;
  out.tag(kCheckpointMagic);
  out.u16(kCheckpointVersion);
  auto layers = [&](const std::vector<LayerSpec>& ls) {
    out.u8(static_cast<std::uint8_t>(ls.size()));
    for (const auto& l : ls) {
      out.u16(static_cast<std::uint16_t>(l.in_channels));
      out.u16(static_cast<std::uint16_t>(l.out_channels));
      out.u8(static_cast<std::uint8_t>(l.kernel));
      out.u8(static_cast<std::uint8_t>(l.stride));
    }
  };
  layers(model.arch.encoder);
  layers(model.arch.decoder);
  out.u16(static_cast<std::uint16_t>(model.arch.latent_channels));
  out.u8(static_cast<std::uint8_t>(model.arch.mixture_components));
  out.u8(static_cast<std::uint8_t>(model.adapter_insertion_index));
  out.f64(model.lambda_train);
  for (const auto& p : model.params)
    for (float v : p.values) out.f32(v);
  return out.take();
}

CodecModel parse_model(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_tag(kCheckpointMagic);
  const auto version = in.u16();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  auto layers = [&] {
    const int n = in.u8();
    if (n == 0 || n > 32) throw FormatError("checkpoint layer count out of range");
    std::vector<LayerSpec> ls(n);
    for (auto& l : ls) {
      l.in_channels = in.u16();
      l.out_channels = in.u16();
      l.kernel = in.u8();
      l.stride = in.u8();
    }
    return ls;
  };
  CodecModel m;
  m.arch.encoder = layers();
  m.arch.decoder = layers();
  m.arch.latent_channels = in.u16();
  m.arch.mixture_components = in.u8();
  m.adapter_insertion_index = in.u8();
  m.lambda_train = in.f64();
  try {
    m.arch.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint architecture: ") + e.what());
  }
  std::size_t total = static_cast<std::size_t>(3) * m.arch.latent_channels * m.arch.mixture_components;
  for (const auto* ls : {&m.arch.encoder, &m.arch.decoder})
    for (const auto& l : *ls)
      total += static_cast<std::size_t>(l.in_channels) * l.out_channels * l.kernel * l.kernel + l.out_channels;
  if (in.remaining() != total * 4)
    throw FormatError("checkpoint holds " + std::to_string(in.remaining()) + " parameter bytes, expected " +
                      std::to_string(total * 4));
  m.params = param_layout(m.arch);
  for (auto& p : m.params)
    for (auto& v : p.values) v = in.f32();
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return m;
}

void save_model(const CodecModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

CodecModel load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_model(bytes);
}

}  // namespace udic
