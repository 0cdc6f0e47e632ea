#include "udic/adaptation.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "udic/logistic.hpp"

namespace udic {

namespace {

double resolve_lambda(double configured, const CodecModel& model) {
  const double lambda = configured > 0 ? configured : model.lambda_train;
  if (!(lambda > 0) || !std::isfinite(lambda))
    throw std::invalid_argument("adaptation lambda must be positive (model has no training lambda)");
  return lambda;
}

template <class T>
ad::Tensor<T> constant_like(const ad::Shape& shape, std::span<const float> v) {
  return ad::Tensor<T>::constant(shape, std::vector<T>(v.begin(), v.end()));
}

float dequantize_index(std::int32_t k, double w) { return static_cast<float>(w * k); }

void check_lr_stages(const std::vector<LrStage>& stages, const char* what) {
  if (stages.empty()) throw std::invalid_argument(std::string(what) + ": empty learning-rate schedule");
  for (const auto& s : stages)
    if (s.iterations <= 0 || !(s.lr > 0)) throw std::invalid_argument(std::string(what) + ": invalid lr stage");
}

// Hard objective of a latent under a patched decoder, with the entropy model
// precomputed.
HardScore score_with(const PatchedDecoder& dec, const EntropyModel& em, const Image& x, const Latent& y_hat,
                     double side_bits, double lambda) {
  HardScore s;
  s.latent_bits = rate_latent(em, y_hat);
  s.side_bits = side_bits;
  s.mse = distortion(x, decode(dec.model, y_hat, dec.options(x.height, x.width)));
  s.objective = (s.latent_bits + s.side_bits) / static_cast<double>(x.pixels()) + lambda * s.mse;
  return s;
}

// Distortion of the decoder tail from the insertion point, clamped and
// cropped exactly as decode() does it.
double tail_mse(const CodecModel& model, const std::vector<ad::Tensor<float>>& p, const ad::Tensor<float>& h,
                const Image& x, const AdapterParams* adapter, std::span<const float> scales = {}) {
  ad::Tensor<float> a = h;
  if (adapter) a = apply_adapter(a, *adapter);
  if (!scales.empty()) a = ad::scale_channels(a, constant_like<float>({static_cast<std::int64_t>(scales.size())}, scales));
  const int n = static_cast<int>(model.arch.decoder.size());
  const auto out = synthesis_range(model, p, a, model.adapter_insertion_index, n);
  Image img(static_cast<int>(out.dim(2)), static_cast<int>(out.dim(3)));
  std::transform(out.data().begin(), out.data().end(), img.data.begin(),
                 [](float v) { return std::clamp(v, 0.0f, 1.0f); });
  return distortion(x, crop(img, x.height, x.width));
}

std::vector<double> uniform_noise(std::size_t n, double half_width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-half_width, half_width);
  std::vector<double> out(n);
  for (auto& v : out) v = u(rng);
  return out;
}

}  // namespace

// ------------------------------------------------------------------ configs

double TemperatureSchedule::at(int iteration) const {
  return std::max(tau0 * std::exp(-decay * iteration), tau_min);
}

void RefineConfig::validate() const {
  if (lambda < 0 || !std::isfinite(lambda)) throw std::invalid_argument("refine: lambda must be >= 0");
  if (iterations < 0) throw std::invalid_argument("refine: iterations must be >= 0");
  check_lr_stages(lr_stages, "refine");
  if (!(temperature.tau0 > 0) || !(temperature.tau_min > 0) || temperature.decay < 0)
    throw std::invalid_argument("refine: invalid temperature schedule");
}

void AdapterTrainConfig::validate() const {
  if (lambda < 0 || !std::isfinite(lambda)) throw std::invalid_argument("adapter: lambda must be >= 0");
  if (iterations < 0) throw std::invalid_argument("adapter: iterations must be >= 0");
  check_lr_stages(lr_stages, "adapter");
  if (!(interval > 0)) throw std::invalid_argument("adapter: quantization interval must be positive");
  if (!(prior_scale > 0)) throw std::invalid_argument("adapter: prior scale must be positive");
  if (rank < 1) throw std::invalid_argument("adapter: rank must be >= 1");
}

double LogisticPrior::cdf(double t) const { return logistic::cdf(t, 0.0, scale); }

double LogisticPrior::log_density(double t) const { return logistic::log_density(t, 0.0, scale); }

double LogisticPrior::bin_mass(std::int32_t k, double w) const { return logistic::bin_mass(k * w, w, 0.0, scale); }

// --------------------------------------------------------------- quantizers

std::vector<double> sga_noise(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) {
    double p = u(rng);
    while (p <= 0.0) p = u(rng);
    v = std::log(p) - std::log1p(-p);
  }
  return out;
}

template <class T>
ad::Tensor<T> sga_quantize(const ad::Tensor<T>& y, double tau, std::span<const double> noise) {
  if (!(tau > 0)) throw std::invalid_argument("sga_quantize: temperature must be positive");
  if (static_cast<std::int64_t>(noise.size()) != y.numel())
    throw std::invalid_argument("sga_quantize: noise size does not match the tensor");
  const auto n = static_cast<std::size_t>(y.numel());
  std::vector<T> lo(n), gap(n), d(noise.begin(), noise.end());
  for (std::size_t i = 0; i < n; ++i) {
    const T v = y.data()[i];
    lo[i] = std::floor(v);
    gap[i] = std::ceil(v) - lo[i];
  }
  const auto floor_t = ad::Tensor<T>::constant(y.shape(), lo);
  const auto f = ad::sub(y, floor_t);
  const auto log_up = ad::log(ad::add_scalar(f, kSgaEpsilon));
  const auto log_down = ad::log(ad::add_scalar(ad::scale(f, -1.0), 1.0 + kSgaEpsilon));
  const auto logit = ad::scale(ad::add(ad::sub(log_up, log_down), ad::Tensor<T>::constant(y.shape(), d)), 1.0 / tau);
  const auto w_up = ad::sigmoid(logit);
  return ad::add(floor_t, ad::mul(w_up, ad::Tensor<T>::constant(y.shape(), gap)));
}

template <class T>
ad::Tensor<T> sga_quantize(const ad::Tensor<T>& y, double tau, std::mt19937_64& rng) {
  const auto noise = sga_noise(static_cast<std::size_t>(y.numel()), rng);
  return sga_quantize(y, tau, noise);
}

QuantizedParams quantize_params(std::span<const float> theta, double w) {
  if (!(w > 0)) throw std::invalid_argument("quantize_params: interval must be positive");
  QuantizedParams q;
  q.indices.reserve(theta.size());
  q.values.reserve(theta.size());
  for (float t : theta) {
    const double k = std::round(static_cast<double>(t) / w);
    if (!(std::abs(k) < 2e9)) throw std::invalid_argument("quantize_params: parameter out of range");
    q.indices.push_back(static_cast<std::int32_t>(k));
    q.values.push_back(dequantize_index(q.indices.back(), w));
  }
  return q;
}

double param_rate(std::span<const std::int32_t> k, const LogisticPrior& prior, double w) {
  if (!(w > 0) || !(prior.scale > 0)) throw std::invalid_argument("param_rate: w and s must be positive");
  double bits = 0;
  for (std::int32_t v : k) bits -= std::log2(prior.bin_mass(v, w));
  return bits;
}

// ------------------------------------------------------------------ losses

template <class T>
LossContext<T> LossContext<T>::make(const CodecModel& model, const Image& x) {
  LossContext ctx;
  ctx.model = &model;
  ctx.params = model_tensors<T>(model, false);
  ctx.height = x.height;
  ctx.width = x.width;
  const Image padded = pad_reflect(x, model.arch.stride_product());
  ctx.target = ad::Tensor<T>::constant({1, 3, padded.height, padded.width},
                                       std::vector<T>(padded.data.begin(), padded.data.end()));
  std::vector<T> mask(padded.data.size(), T(0));
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < x.height; ++r)
      for (int col = 0; col < x.width; ++col)
        mask[(static_cast<std::size_t>(c) * padded.height + r) * padded.width + col] = T(1);
  ctx.mask = ad::Tensor<T>::constant(ctx.target.shape(), std::move(mask));
  return ctx;
}

template <class T>
ad::Tensor<T> masked_distortion(const LossContext<T>& ctx, const ad::Tensor<T>& x_hat, double lambda) {
  std::vector<T> clamped(x_hat.data().begin(), x_hat.data().end());
  for (auto& v : clamped) v = std::clamp(v, T(0), T(1));
  const auto diff = ad::mul(ad::sub(ad::straight_through(x_hat, std::move(clamped)), ctx.target), ctx.mask);
  return ad::scale(ad::sum(ad::mul(diff, diff)), lambda * 255.0 * 255.0 / (3.0 * ctx.pixels()));
}

template <class T>
ad::Tensor<T> latent_loss(const LossContext<T>& ctx, const ad::Tensor<T>& y, double lambda, double tau,
                          std::span<const double> noise, const AdapterParams* adapter) {
  const auto& model = *ctx.model;
  const auto y_tilde = sga_quantize(y, tau, noise);
  const auto bits = ad::sum(latent_bits(model, ctx.params, y_tilde));
  ActivationHook<T> hook;
  if (adapter) hook = [adapter](const ad::Tensor<T>& h) { return apply_adapter(h, *adapter); };
  const auto x_hat = synthesis(model, ctx.params, y_tilde, hook);
  const auto loss = ad::add(ad::scale(bits, 1.0 / ctx.pixels()), masked_distortion(ctx, x_hat, lambda));
  if (!std::isfinite(static_cast<double>(loss.item()))) throw DivergenceError("latent_loss: non-finite loss");
  return loss;
}

template <class T>
ad::Tensor<T> noisy_param_bits(const ad::Tensor<T>& theta, std::span<const double> noise, const LogisticPrior& prior,
                               double w) {
  if (static_cast<std::int64_t>(noise.size()) != theta.numel())
    throw std::invalid_argument("noisy_param_bits: noise size does not match the parameters");
  const auto t = ad::add(theta, ad::Tensor<T>::constant(theta.shape(), std::vector<T>(noise.begin(), noise.end())));
  const auto neg_z = ad::scale(t, -1.0 / prior.scale);
  // log p(t) = -z - 2 softplus(-z) - log s
  const auto log_p = ad::add_scalar(ad::sub(neg_z, ad::scale(ad::softplus(neg_z), 2.0)), -std::log(prior.scale));
  return ad::scale(ad::sum(ad::add_scalar(log_p, std::log(w))), -1.0 / logistic::kLn2);
}

template <class T>
ad::Tensor<T> adapter_loss(const LossContext<T>& ctx, const ad::Tensor<T>& h, const ad::Tensor<T>& a,
                           const ad::Tensor<T>& b, const AdapterTrainConfig& cfg, double lambda,
                           std::span<const double> noise) {
  const auto& model = *ctx.model;
  const auto n = static_cast<std::size_t>(a.numel());
  if (noise.size() != 2 * n) throw std::invalid_argument("adapter_loss: noise size must be 2MC");
  auto ste = [&](const ad::Tensor<T>& t) {
    std::vector<T> q(t.data().size());
    for (std::size_t i = 0; i < q.size(); ++i)
      q[i] = static_cast<T>(cfg.interval * std::round(static_cast<double>(t.data()[i]) / cfg.interval));
    return ad::straight_through(t, std::move(q));
  };
  const LogisticPrior prior{cfg.prior_scale};
  const auto bits = ad::add(noisy_param_bits(a, noise.first(n), prior, cfg.interval),
                            noisy_param_bits(b, noise.subspan(n), prior, cfg.interval));
  const int layers = static_cast<int>(model.arch.decoder.size());
  const auto x_hat =
      synthesis_range(model, ctx.params, apply_adapter(h, ste(a), ste(b)), model.adapter_insertion_index, layers);
  const auto loss = ad::add(ad::scale(bits, 1.0 / ctx.pixels()), masked_distortion(ctx, x_hat, lambda));
  if (!std::isfinite(static_cast<double>(loss.item()))) throw DivergenceError("adapter_loss: non-finite loss");
  return loss;
}

#define UDIC_INSTANTIATE(T)                                                                                          \
  template ad::Tensor<T> sga_quantize<T>(const ad::Tensor<T>&, double, std::span<const double>);                    \
  template ad::Tensor<T> sga_quantize<T>(const ad::Tensor<T>&, double, std::mt19937_64&);                           \
  template struct LossContext<T>;                                                                                    \
  template ad::Tensor<T> masked_distortion<T>(const LossContext<T>&, const ad::Tensor<T>&, double);                 \
  template ad::Tensor<T> latent_loss<T>(const LossContext<T>&, const ad::Tensor<T>&, double, double,                \
                                        std::span<const double>, const AdapterParams*);                              \
  template ad::Tensor<T> noisy_param_bits<T>(const ad::Tensor<T>&, std::span<const double>, const LogisticPrior&,   \
                                             double);                                                                \
  template ad::Tensor<T> adapter_loss<T>(const LossContext<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,         \
                                         const ad::Tensor<T>&, const AdapterTrainConfig&, double,                    \
                                         std::span<const double>);
UDIC_INSTANTIATE(float)
UDIC_INSTANTIATE(double)
#undef UDIC_INSTANTIATE

// ------------------------------------------------------------------ stage 1

RefineResult refine_latent(const CodecModel& model, const Image& x, const RefineConfig& cfg,
                           const AdapterParams* adapter, const std::optional<Latent>& init) {
  cfg.validate();
  const double lambda = resolve_lambda(cfg.lambda, model);
  const Latent y0 = init ? *init : encode_latent(model, x);
  const EntropyModel em(model);
  PatchedDecoder dec{model, {}, {}};
  double side_bits = 0;
  if (adapter) {
    dec.adapter = *adapter;
    side_bits = 0;  // held fixed; the caller accounts for it
  }

  RefineResult result;
  result.y_star = y0;
  Latent last_q = quantize(y0);
  result.initial = score_with(dec, em, x, last_q, side_bits, lambda);
  result.best = result.initial;
  if (cfg.iterations == 0) return result;

  const auto ctx = LossContext<float>::make(model, x);
  auto y = ad::Tensor<float>::parameter(y0.shape4(), y0.values);
  Adam<float> opt({y});
  std::mt19937_64 rng(cfg.seed);
  result.loss_trace.reserve(cfg.iterations);
  for (int t = 0; t < cfg.iterations; ++t) {
    const auto noise = sga_noise(static_cast<std::size_t>(y.numel()), rng);
    try {
      const auto loss = latent_loss(ctx, y, lambda, cfg.temperature.at(t), noise, adapter);
      result.loss_trace.push_back(loss.item());
      ad::backward(loss);
      opt.step(lr_at(cfg.lr_stages, t));
    } catch (const DivergenceError&) {
      result.diverged = true;
      break;
    }
    Latent q = quantize(latent_from(y.shape(), y.data()));
    if (q == last_q) continue;
    const HardScore s = score_with(dec, em, x, q, side_bits, lambda);
    if (s.objective < result.best.objective) {
      result.best = s;
      result.best_iteration = t;
      result.y_star = latent_from(y.shape(), y.data());
    }
    last_q = std::move(q);
  }
  return result;
}

// ------------------------------------------------------------------ stage 2

AdapterResult train_adapters(const CodecModel& model, const Latent& y_hat, const Image& x,
                             const AdapterTrainConfig& cfg) {
  cfg.validate();
  const double lambda = resolve_lambda(cfg.lambda, model);
  const AdapterConfig acfg = adapter_config(model, cfg.rank);
  const LogisticPrior prior{cfg.prior_scale};
  const double pixels = static_cast<double>(x.pixels());

  const auto ctx = LossContext<float>::make(model, x);
  const auto y_t = constant_like<float>(y_hat.shape4(), y_hat.values);
  const auto h = synthesis_range(model, ctx.params, y_t, 0, model.adapter_insertion_index);
  const double latent_bits = rate_latent(EntropyModel(model), y_hat);

  AdapterResult result;
  result.skip.latent_bits = latent_bits;
  result.skip.mse = tail_mse(model, ctx.params, h, x, nullptr);
  result.skip.objective = latent_bits / pixels + lambda * result.skip.mse;

  auto evaluate = [&](std::span<const float> flat) {
    const auto q = quantize_params(flat, cfg.interval);
    const auto theta = unflatten_params(q.values, acfg);
    HardScore s;
    s.latent_bits = latent_bits;
    s.side_bits = param_rate(q.indices, prior, cfg.interval) + kAdapterHeaderBits;
    s.mse = tail_mse(model, ctx.params, h, x, &theta);
    s.objective = (s.latent_bits + s.side_bits) / pixels + lambda * s.mse;
    return std::pair{s, q};
  };

  const auto theta0 = init_adapter(acfg, cfg.seed);
  auto [best, best_q] = evaluate(flatten_params(theta0));
  std::vector<std::int32_t> last_k = best_q.indices;

  const ad::Shape shape{acfg.channels, acfg.rank};
  auto a = ad::Tensor<float>::parameter(shape, theta0.a);
  auto b = ad::Tensor<float>::parameter(shape, theta0.b);
  Adam<float> opt({a, b});
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  const std::size_t count = 2 * theta0.a.size();
  for (int t = 0; t < cfg.iterations; ++t) {
    const auto noise = uniform_noise(count, cfg.interval / 2, rng);
    try {
      const auto loss = adapter_loss(ctx, h, a, b, cfg, lambda, noise);
      result.loss_trace.push_back(loss.item());
      ad::backward(loss);
      opt.step(lr_at(cfg.lr_stages, t));
    } catch (const DivergenceError&) {
      result.diverged = true;
      break;
    }
    std::vector<float> flat(a.data().begin(), a.data().end());
    flat.insert(flat.end(), b.data().begin(), b.data().end());
    const auto k = quantize_params(flat, cfg.interval).indices;
    if (k == last_k) continue;
    auto [s, q] = evaluate(flat);
    if (s.objective < best.objective) {
      best = s;
      best_q = std::move(q);
      result.best_iteration = t;
    }
    last_k = k;
  }

  result.with_adapter = best;
  result.indices = best_q.indices;
  result.theta = unflatten_params(best_q.values, acfg);
  result.send = !cfg.force_skip && best.objective < result.skip.objective;
  return result;
}

// -------------------------------------------------------------------- modes

namespace {

constexpr std::array kModes{Mode::kNone,  Mode::kLatentOnly,  Mode::kOurs,         Mode::kBiases,
                            Mode::kOmps,  Mode::kFullDecoder, Mode::kAdaptersFirst};

SideInfo adapter_side(const AdapterResult& r, const AdapterTrainConfig& cfg) {
  SideInfo side;
  if (!r.send) return side;
  side.kind = SideInfoKind::kAdapter;
  side.adapter_config = r.theta.config;
  side.indices = r.indices;
  side.interval = cfg.interval;
  side.prior_scale = cfg.prior_scale;
  return side;
}

// Distortion-only optimization of the decoder biases.
SideInfo train_biases(const CodecModel& model, const Latent& y_hat, const Image& x, const AdapterTrainConfig& cfg,
                      double lambda, std::vector<double>& trace, bool& diverged) {
  const int layers = static_cast<int>(model.arch.decoder.size());
  auto ctx = LossContext<float>::make(model, x);
  std::vector<ad::Tensor<float>> biases;
  for (int l = 0; l < layers; ++l) {
    auto& slot = ctx.params[model.dec_bias(l)];
    slot = ad::Tensor<float>::parameter(slot.shape(), std::vector<float>(slot.data().begin(), slot.data().end()));
    biases.push_back(slot);
  }
  auto collect = [&] {
    std::vector<double> v;
    for (const auto& t : biases) v.insert(v.end(), t.data().begin(), t.data().end());
    return v;
  };
  std::vector<double> best = collect();
  double best_loss = INFINITY;
  Adam<float> opt(biases);
  const auto y_t = constant_like<float>(y_hat.shape4(), y_hat.values);
  for (int t = 0; t <= cfg.iterations; ++t) {
    const auto loss = masked_distortion(ctx, synthesis(model, ctx.params, y_t), lambda);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      diverged = true;
      break;
    }
    trace.push_back(value);
    if (value < best_loss) {
      best_loss = value;
      best = collect();
    }
    if (t == cfg.iterations) break;
    ad::backward(loss);
    try {
      opt.step(lr_at(cfg.lr_stages, t));
    } catch (const DivergenceError&) {
      diverged = true;
      break;
    }
  }
  SideInfo side;
  side.kind = SideInfoKind::kBiases;
  side.biases = std::move(best);
  return side;
}

SideInfo quantize_omps(std::span<const float> scales) {
  SideInfo side;
  side.kind = SideInfoKind::kOmps;
  const auto [lo, hi] = std::minmax_element(scales.begin(), scales.end());
  side.omp_min = *lo;
  side.omp_step = (*hi - *lo) / 255.0f;
  for (float s : scales) {
    const long code = side.omp_step > 0 ? std::lround((s - side.omp_min) / side.omp_step) : 0;
    side.omp_codes.push_back(static_cast<std::uint8_t>(std::clamp(code, 0L, 255L)));
  }
  return side;
}

// Distortion-only optimization of per-channel scales at the insertion point.
SideInfo train_omps(const CodecModel& model, const Latent& y_hat, const Image& x, const AdapterTrainConfig& cfg,
                    double lambda, std::vector<double>& trace, bool& diverged) {
  const auto ctx = LossContext<float>::make(model, x);
  const int at = model.adapter_insertion_index;
  const int layers = static_cast<int>(model.arch.decoder.size());
  const int c = model.arch.decoder[at].in_channels;
  const auto h = synthesis_range(model, ctx.params, constant_like<float>(y_hat.shape4(), y_hat.values), 0, at);
  auto s = ad::Tensor<float>::parameter({c}, std::vector<float>(c, 1.0f));
  std::vector<float> best(c, 1.0f);
  double best_loss = INFINITY;
  Adam<float> opt({s});
  for (int t = 0; t <= cfg.iterations; ++t) {
    const auto loss = masked_distortion(ctx, synthesis_range(model, ctx.params, ad::scale_channels(h, s), at, layers), lambda);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      diverged = true;
      break;
    }
    trace.push_back(value);
    if (value < best_loss) {
      best_loss = value;
      best.assign(s.data().begin(), s.data().end());
    }
    if (t == cfg.iterations) break;
    ad::backward(loss);
    try {
      opt.step(lr_at(cfg.lr_stages, t));
    } catch (const DivergenceError&) {
      diverged = true;
      break;
    }
  }
  return quantize_omps(best);
}

// Rate-distortion optimization of deltas on every decoder and entropy-model
// parameter under the same mixed quantization as the adapters.
SideInfo train_full_decoder(const CodecModel& model, const Latent& y_hat, const Image& x,
                            const AdapterTrainConfig& cfg, double lambda, std::vector<double>& trace, bool& diverged) {
  constexpr int kEvalEvery = 25;
  const auto indices = full_decoder_param_indices(model);
  const LogisticPrior prior{cfg.prior_scale};
  const double w = cfg.interval;
  const auto base = LossContext<float>::make(model, x);
  const auto y_t = constant_like<float>(y_hat.shape4(), y_hat.values);

  std::vector<ad::Tensor<float>> deltas;
  std::size_t total = 0;
  for (auto i : indices) {
    deltas.push_back(ad::Tensor<float>::parameter(model.params[i].shape,
                                                  std::vector<float>(model.params[i].values.size(), 0.0f)));
    total += model.params[i].values.size();
  }
  auto flat_k = [&] {
    std::vector<std::int32_t> k;
    k.reserve(total);
    for (const auto& d : deltas) {
      auto q = quantize_params(d.data(), w);
      k.insert(k.end(), q.indices.begin(), q.indices.end());
    }
    return k;
  };
  auto make_side = [&](std::vector<std::int32_t> k) {
    SideInfo side;
    side.kind = SideInfoKind::kFullDecoder;
    side.indices = std::move(k);
    side.interval = w;
    side.prior_scale = cfg.prior_scale;
    return side;
  };

  SideInfo best = make_side(flat_k());
  double best_objective = score(model, x, y_hat, best, lambda).objective;
  Adam<float> opt(deltas);
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dull);
  for (int t = 0; t < cfg.iterations; ++t) {
    auto p = base.params;
    ad::Tensor<float> bits = ad::Tensor<float>::scalar(0.0f);
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const auto& d = deltas[j];
      std::vector<float> q(d.data().size());
      for (std::size_t e = 0; e < q.size(); ++e)
        q[e] = dequantize_index(static_cast<std::int32_t>(std::round(double(d.data()[e]) / w)), w);
      bits = ad::add(bits, noisy_param_bits(d, uniform_noise(q.size(), w / 2, rng), prior, w));
      p[indices[j]] = ad::add(base.params[indices[j]], ad::straight_through(d, std::move(q)));
    }
    const auto latent = ad::sum(latent_bits(model, p, y_t));
    const auto loss = ad::add(ad::scale(ad::add(bits, latent), 1.0 / base.pixels()),
                              masked_distortion(base, synthesis(model, p, y_t), lambda));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      diverged = true;
      break;
    }
    trace.push_back(value);
    ad::backward(loss);
    try {
      opt.step(lr_at(cfg.lr_stages, t));
    } catch (const DivergenceError&) {
      diverged = true;
      break;
    }
    if ((t + 1) % kEvalEvery == 0 || t + 1 == cfg.iterations) {
      SideInfo cand = make_side(flat_k());
      const double obj = score(model, x, y_hat, cand, lambda).objective;
      if (obj < best_objective) {
        best_objective = obj;
        best = std::move(cand);
      }
    }
  }
  return best;
}

}  // namespace

std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::kNone: return "none";
    case Mode::kLatentOnly: return "latent_only";
    case Mode::kOurs: return "ours";
    case Mode::kBiases: return "biases";
    case Mode::kOmps: return "omps";
    case Mode::kFullDecoder: return "full_decoder";
    case Mode::kAdaptersFirst: return "adapters_first";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  for (Mode m : kModes)
    if (mode_name(m) == name) return m;
  throw std::invalid_argument("unknown mode '" + std::string(name) +
                              "' (expected none, latent_only, ours, biases, omps, full_decoder, adapters_first)");
}

std::span<const Mode> all_modes() { return kModes; }

std::vector<std::size_t> full_decoder_param_indices(const CodecModel& model) {
  std::vector<std::size_t> out;
  for (int l = 0; l < static_cast<int>(model.arch.decoder.size()); ++l) {
    out.push_back(model.dec_weight(l));
    out.push_back(model.dec_bias(l));
  }
  out.push_back(model.entropy_logits());
  out.push_back(model.entropy_locs());
  out.push_back(model.entropy_raw_scales());
  return out;
}

std::vector<double> dequantize_omps(const SideInfo& side) {
  std::vector<double> out;
  out.reserve(side.omp_codes.size());
  for (auto c : side.omp_codes) out.push_back(side.omp_min + side.omp_step * static_cast<float>(c));
  return out;
}

SynthesisOptions PatchedDecoder::options(int height, int width) const {
  SynthesisOptions opt;
  opt.adapter = adapter ? &*adapter : nullptr;
  opt.channel_scales = channel_scales;
  opt.height = height;
  opt.width = width;
  return opt;
}

PatchedDecoder apply_side_info(const CodecModel& model, const SideInfo& side) {
  PatchedDecoder dec{model, {}, {}};
  switch (side.kind) {
    case SideInfoKind::kNone: break;
    case SideInfoKind::kAdapter: {
      if (side.adapter_config.insertion_index != model.adapter_insertion_index ||
          side.adapter_config.channels != adapter_config(model).channels)
        throw std::invalid_argument("adapter config does not match the model");
      std::vector<float> values;
      values.reserve(side.indices.size());
      for (auto k : side.indices) values.push_back(dequantize_index(k, side.interval));
      dec.adapter = unflatten_params(values, side.adapter_config);
      break;
    }
    case SideInfoKind::kBiases: {
      std::size_t pos = 0;
      for (int l = 0; l < static_cast<int>(model.arch.decoder.size()); ++l) {
        auto& v = dec.model.params[model.dec_bias(l)].values;
        if (pos + v.size() > side.biases.size()) throw std::invalid_argument("too few bias values");
        for (auto& b : v) b = static_cast<float>(side.biases[pos++]);
      }
      if (pos != side.biases.size()) throw std::invalid_argument("too many bias values");
      break;
    }
    case SideInfoKind::kOmps: {
      const int c = model.arch.decoder[model.adapter_insertion_index].in_channels;
      if (static_cast<int>(side.omp_codes.size()) != c) throw std::invalid_argument("OMP count does not match the model");
      for (double s : dequantize_omps(side)) dec.channel_scales.push_back(static_cast<float>(s));
      break;
    }
    case SideInfoKind::kFullDecoder: {
      std::size_t pos = 0;
      for (auto i : full_decoder_param_indices(model)) {
        auto& v = dec.model.params[i].values;
        if (pos + v.size() > side.indices.size()) throw std::invalid_argument("too few decoder deltas");
        for (auto& p : v) p += dequantize_index(side.indices[pos++], side.interval);
      }
      if (pos != side.indices.size()) throw std::invalid_argument("too many decoder deltas");
      break;
    }
  }
  return dec;
}

double side_info_bits(const SideInfo& side, const CodecModel& model) {
  switch (side.kind) {
    case SideInfoKind::kNone: return 0.0;
    case SideInfoKind::kAdapter:
      return param_rate(side.indices, LogisticPrior{side.prior_scale}, side.interval) + kAdapterHeaderBits;
    case SideInfoKind::kBiases: return 64.0 * static_cast<double>(side.biases.size());
    case SideInfoKind::kOmps: return 8.0 * static_cast<double>(side.omp_codes.size()) + 64.0;
    case SideInfoKind::kFullDecoder:
      return param_rate(side.indices, LogisticPrior{side.prior_scale}, side.interval);
  }
  (void)model;
  return 0.0;
}

HardScore score(const CodecModel& model, const Image& x, const Latent& y_hat, const SideInfo& side, double lambda) {
  const PatchedDecoder dec = apply_side_info(model, side);
  return score_with(dec, EntropyModel(dec.model), x, y_hat, side_info_bits(side, model), lambda);
}

AdaptationResult adapt_image(const CodecModel& model, const Image& x, Mode mode, const AdaptationConfig& cfg,
                             const RefineResult* stage1) {
  const double lambda = resolve_lambda(cfg.refine.lambda, model);
  AdapterTrainConfig acfg = cfg.adapter;
  if (acfg.lambda <= 0) acfg.lambda = lambda;

  AdaptationResult r;
  r.mode = mode;
  auto run_stage1 = [&]() -> const RefineResult& {
    if (!r.stage1) r.stage1 = stage1 ? *stage1 : refine_latent(model, x, cfg.refine);
    r.diverged = r.diverged || r.stage1->diverged;
    return *r.stage1;
  };

  switch (mode) {
    case Mode::kNone: r.y_hat = quantize(encode_latent(model, x)); break;
    case Mode::kLatentOnly: r.y_hat = quantize(run_stage1().y_star); break;
    case Mode::kOurs: {
      r.y_hat = quantize(run_stage1().y_star);
      r.stage2 = train_adapters(model, r.y_hat, x, acfg);
      r.side = adapter_side(*r.stage2, acfg);
      r.loss_trace = r.stage2->loss_trace;
      r.diverged = r.diverged || r.stage2->diverged;
      break;
    }
    case Mode::kBiases:
      r.y_hat = quantize(run_stage1().y_star);
      r.side = train_biases(model, r.y_hat, x, acfg, acfg.lambda, r.loss_trace, r.diverged);
      break;
    case Mode::kOmps:
      r.y_hat = quantize(run_stage1().y_star);
      r.side = train_omps(model, r.y_hat, x, acfg, acfg.lambda, r.loss_trace, r.diverged);
      break;
    case Mode::kFullDecoder:
      r.y_hat = quantize(run_stage1().y_star);
      r.side = train_full_decoder(model, r.y_hat, x, acfg, acfg.lambda, r.loss_trace, r.diverged);
      break;
    case Mode::kAdaptersFirst: {
      const Latent y0 = encode_latent(model, x);
      r.stage2 = train_adapters(model, quantize(y0), x, acfg);
      r.side = adapter_side(*r.stage2, acfg);
      const auto dec = apply_side_info(model, r.side);
      r.stage1 = refine_latent(model, x, cfg.refine, dec.adapter ? &*dec.adapter : nullptr, y0);
      r.y_hat = quantize(r.stage1->y_star);
      r.diverged = r.stage1->diverged || r.stage2->diverged;
      break;
    }
  }
  r.score = score(model, x, r.y_hat, r.side, lambda);
  return r;
}

// ------------------------------------------------------------------- config

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view text, std::string_view key) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end)
    throw std::invalid_argument("config: bad value '" + std::string(text) + "' for " + std::string(key));
  return value;
}

std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

bool parse_bool(std::string_view text, std::string_view key) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw std::invalid_argument("config: bad boolean '" + std::string(text) + "' for " + std::string(key));
}

}  // namespace

std::vector<LrStage> parse_lr_stages(std::string_view text) {
  std::vector<LrStage> stages;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto item = trim(text.substr(0, comma));
    const auto at = item.find('@');
    if (at == std::string_view::npos) throw std::invalid_argument("lr stage '" + std::string(item) + "' lacks '@'");
    LrStage s;
    s.iterations = parse_number<int>(trim(item.substr(0, at)), "lr stage");
    s.lr = parse_number<double>(trim(item.substr(at + 1)), "lr stage");
    if (s.iterations <= 0 || !(s.lr > 0)) throw std::invalid_argument("lr stage '" + std::string(item) + "' invalid");
    stages.push_back(s);
    text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
  }
  if (stages.empty()) throw std::invalid_argument("empty lr schedule");
  return stages;
}

std::string format_lr_stages(std::span<const LrStage> stages) {
  std::string out;
  for (const auto& s : stages) {
    if (!out.empty()) out += ',';
    out += std::to_string(s.iterations) + '@' + format_double(s.lr);
  }
  return out;
}

AdaptationConfig parse_config(std::string_view text) {
  AdaptationConfig cfg;
  std::map<std::string, std::string, std::less<>> seen;
  int line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (!seen.emplace(key, value).second)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": duplicate key " + key);
  }
  const auto version = seen.find("version");
  if (version == seen.end()) throw std::invalid_argument("config: missing version");
  if (parse_number<int>(version->second, "version") != kConfigVersion)
    throw std::invalid_argument("config: unsupported version " + version->second);

  for (const auto& [key, value] : seen) {
    auto& r = cfg.refine;
    auto& a = cfg.adapter;
    if (key == "version") continue;
    else if (key == "refine.lambda") r.lambda = parse_number<double>(value, key);
    else if (key == "refine.iterations") r.iterations = parse_number<int>(value, key);
    else if (key == "refine.lr_stages") r.lr_stages = parse_lr_stages(value);
    else if (key == "refine.tau0") r.temperature.tau0 = parse_number<double>(value, key);
    else if (key == "refine.tau_decay") r.temperature.decay = parse_number<double>(value, key);
    else if (key == "refine.tau_min") r.temperature.tau_min = parse_number<double>(value, key);
    else if (key == "refine.seed") r.seed = parse_number<std::uint64_t>(value, key);
    else if (key == "adapter.lambda") a.lambda = parse_number<double>(value, key);
    else if (key == "adapter.iterations") a.iterations = parse_number<int>(value, key);
    else if (key == "adapter.lr_stages") a.lr_stages = parse_lr_stages(value);
    else if (key == "adapter.interval") a.interval = parse_number<double>(value, key);
    else if (key == "adapter.prior_scale") a.prior_scale = parse_number<double>(value, key);
    else if (key == "adapter.rank") a.rank = parse_number<int>(value, key);
    else if (key == "adapter.seed") a.seed = parse_number<std::uint64_t>(value, key);
    else if (key == "adapter.force_skip") a.force_skip = parse_bool(value, key);
    else throw std::invalid_argument("config: unknown key " + key);
  }
  cfg.refine.validate();
  cfg.adapter.validate();
  return cfg;
}

AdaptationConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const AdaptationConfig& cfg) {
  const auto& r = cfg.refine;
  const auto& a = cfg.adapter;
  std::ostringstream os;
  os << "version = " << kConfigVersion << '\n'
     << "refine.lambda = " << format_double(r.lambda) << '\n'
     << "refine.iterations = " << r.iterations << '\n'
     << "refine.lr_stages = " << format_lr_stages(r.lr_stages) << '\n'
     << "refine.tau0 = " << format_double(r.temperature.tau0) << '\n'
     << "refine.tau_decay = " << format_double(r.temperature.decay) << '\n'
     << "refine.tau_min = " << format_double(r.temperature.tau_min) << '\n'
     << "refine.seed = " << r.seed << '\n'
     << "adapter.lambda = " << format_double(a.lambda) << '\n'
     << "adapter.iterations = " << a.iterations << '\n'
     << "adapter.lr_stages = " << format_lr_stages(a.lr_stages) << '\n'
     << "adapter.interval = " << format_double(a.interval) << '\n'
     << "adapter.prior_scale = " << format_double(a.prior_scale) << '\n'
     << "adapter.rank = " << a.rank << '\n'
     << "adapter.seed = " << a.seed << '\n'
     << "adapter.force_skip = " << (a.force_skip ? "true" : "false") << '\n';
  return os.str();
}

}  // namespace udic
