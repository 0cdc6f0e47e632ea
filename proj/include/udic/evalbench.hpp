// Metrics, synthetic evaluation domains, and the benchmark runner.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "udic/adaptation.hpp"
#include "udic/bitstream.hpp"
#include "udic/image.hpp"

namespace udic {

// ------------------------------------------------------------------ metrics

/// 10 log10(255^2 / MSE); +infinity for identical images.
double psnr(const Image& x, const Image& x_hat);
double psnr_from_mse(double mse);

struct RDPoint {
  double bpp = 0;
  double psnr = 0;

  bool operator==(const RDPoint&) const = default;
};
using RDCurve = std::vector<RDPoint>;

class BdRateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BdMethod { kCubic, kPchip };
std::string_view bd_method_name(BdMethod m);
BdMethod parse_bd_method(std::string_view name);

/// Average log-rate difference of `test` against `anchor` over their common
/// PSNR interval, as a percentage. Each curve needs at least four points with
/// strictly increasing bpp and PSNR.
double bd_rate(const RDCurve& anchor, const RDCurve& test, BdMethod method = BdMethod::kCubic);

// ------------------------------------------------------------------ domains

enum class Domain { kNatural, kLineDrawing, kComic, kVectorArt };
std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view name);
std::span<const Domain> all_domains();

struct DomainSpec {
  Domain domain = Domain::kNatural;
  int count = 20;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;
};

Image generate_image(Domain domain, int height, int width, std::uint64_t seed);
/// Image i uses seed spec.seed * 1000003 + i, so images are independent of count.
std::vector<Image> generate_domain(const DomainSpec& spec);
std::uint64_t image_seed(const DomainSpec& spec, int index);

/// Writes the images as PPM files plus manifest.json listing path, domain
/// and seed of each; returns the manifest path.
std::filesystem::path write_dataset(const std::vector<DomainSpec>& specs, const std::filesystem::path& dir);

// ---------------------------------------------------------------- benchmark

struct BenchConfig {
  std::vector<Domain> domains{Domain::kLineDrawing, Domain::kVectorArt};
  std::vector<Mode> modes{Mode::kNone, Mode::kLatentOnly, Mode::kOurs, Mode::kOmps, Mode::kBiases, Mode::kFullDecoder};
  int images_per_domain = 20;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 7;
  AdaptationConfig adaptation;
  BdMethod bd_method = BdMethod::kCubic;
  int jobs = 1;
  /// Runs adapters_first next to ours for the model at this position in the
  /// sorted lambda list (-1: no ablation).
  int ordering_lambda = -1;
  /// Fewer models are rejected. Below four, BD-rates are reported as unavailable.
  int min_models = 4;
};

/// One coded image.
struct ImageRow {
  std::string domain;
  int image = 0;
  std::string mode;
  double lambda = 0;
  std::uint64_t bytes = 0;
  std::uint64_t latent_bytes = 0;
  std::uint64_t side_bytes = 0;
  double bpp = 0;
  std::optional<double> psnr;  // empty: identical images
  double mse = 0;
  double objective = 0;  // coded bits / pixels + lambda * mse
  bool adapter_sent = false;
  double adapter_bits = 0;  // side bytes * 8 when an adapter is sent
  bool diverged = false;

  bool operator==(const ImageRow&) const = default;
};

struct ModeSummary {
  std::string domain;
  std::string mode;
  RDCurve curve;  // mean bpp and PSNR per lambda, ascending lambda
  std::optional<double> bd_rate;
  std::string bd_error;  // why bd_rate is empty
  double mean_objective = 0;
  double mean_adapter_bits = 0;
  double adapter_win_fraction = 0;

  bool operator==(const ModeSummary&) const = default;
};

/// Parameter classes updated per image and their effect.
struct ParamClassRow {
  std::string parameters;  // zero, biases, omps, adapters
  std::string mode;
  std::uint64_t count = 0;
  std::optional<double> bd_rate;  // mean over domains with a valid BD-rate
  double mean_objective = 0;

  bool operator==(const ParamClassRow&) const = default;
};

struct OrderingAblation {
  double lambda = 0;
  int images = 0;
  double ours_objective = 0;
  double adapters_first_objective = 0;

  bool operator==(const OrderingAblation&) const = default;
};

inline constexpr int kReportVersion = 1;

struct Report {
  int version = kReportVersion;
  std::string anchor = "none";
  std::string bd_method = "cubic";
  std::vector<double> lambdas;
  std::vector<std::string> domains;
  std::vector<std::string> modes;
  int images_per_domain = 0;
  int height = 0;
  int width = 0;
  std::uint64_t seed = 0;
  std::string adaptation_config;
  std::vector<ImageRow> rows;
  std::vector<ModeSummary> summaries;
  std::vector<ParamClassRow> parameter_classes;
  std::optional<OrderingAblation> ordering;

  bool operator==(const Report&) const = default;
};

std::string emit_report(const Report& r);
/// Throws std::invalid_argument on malformed or unsupported reports.
Report parse_report(std::string_view text);

/// Human-readable aggregate tables.
std::string format_tables(const Report& r);

using ProgressFn = std::function<void(const std::string&)>;

/// `models` must hold at least cfg.min_models models with distinct lambdas.
Report run_benchmark(const std::vector<CodecModel>& models, const BenchConfig& cfg, const ProgressFn& progress = {});

/// Summaries, parameter classes and ablation from rows (used by
/// run_benchmark; exposed for tests).
void summarize(Report& r, BdMethod method);

// ------------------------------------------------------------- pretraining

/// Natural-like training patches.
std::vector<Image> training_patches(int count, int size, std::uint64_t seed);

}  // namespace udic
