#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "udic/bytes.hpp"
#include "udic/evalbench.hpp"

namespace udic::cli {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::vector<std::string> args;
  std::ostream& out;
  std::shared_ptr<spdlog::logger> log;
};

spdlog::level::level_enum log_level() {
  const char* env = std::getenv("UDIC_LOG");
  const std::string v = env ? env : "info";
  if (v == "error") return spdlog::level::err;
  if (v == "info") return spdlog::level::info;
  if (v == "debug") return spdlog::level::debug;
  throw UsageError("UDIC_LOG must be one of error, info, debug (got '" + v + "')");
}

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
  return std::string(buf, res.ptr);
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw UsageError(std::string(what) + " '" + p.string() + "' does not exist");
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw UsageError(std::string(what) + " '" + p.string() + "' does not exist");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

template <class F>
void parallel_for(std::size_t n, int jobs, F&& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next++;
      if (i >= n) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  const std::size_t extra = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), n);
  for (std::size_t t = 1; t < extra; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ----------------------------------------------------------------- manifest

struct Manifest {
  std::string command;
  std::vector<std::string> config_paths;
  Json seeds = Json::object();
  std::vector<std::string> models;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
};

void write_manifest(const Context& ctx, const Manifest& m, const fs::path& path) {
  Json j;
  j["tool"] = "udic";
  j["tool_version"] = kToolVersion;
  j["command"] = m.command;
  j["argv"] = ctx.args;
  j["working_directory"] = fs::current_path().string();
  j["config_paths"] = m.config_paths;
  j["seeds"] = m.seeds;
  j["models"] = m.models;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  write_text(path, j.dump(2) + "\n");
  ctx.log->debug("manifest written to {}", path.string());
}

fs::path beside(const fs::path& output, const std::string& suffix) { return fs::path(output.string() + suffix); }

// ------------------------------------------------------------------ helpers

std::vector<Domain> parse_domains(const std::vector<std::string>& names) {
  std::vector<Domain> out;
  for (const auto& n : names) out.push_back(parse_domain(n));
  return out;
}

std::vector<Mode> parse_modes(const std::vector<std::string>& names) {
  std::vector<Mode> out;
  for (const auto& n : names) out.push_back(parse_mode(n));
  return out;
}

AdaptationConfig adaptation_config(const std::string& config_path, std::uint64_t seed) {
  AdaptationConfig cfg;
  if (!config_path.empty()) {
    require_file(config_path, "config file");
    cfg = load_config(config_path);
  }
  cfg.refine.seed = seed;
  cfg.adapter.seed = seed + 1;
  return cfg;
}

CodecModel load_checked_model(const fs::path& path) {
  require_file(path, "model checkpoint");
  return load_model(path);
}

std::vector<fs::path> files_with_extension(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// FNV-1a over the raw float samples, so equal hashes mean bit-identical images.
std::string reconstruction_hash(const Image& img) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(img.data.data());
  for (std::size_t i = 0; i < img.data.size() * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Json optional_number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

// ------------------------------------------------------------------ pretrain

struct PretrainArgs {
  std::vector<double> lambdas;
  std::string out_dir;
  std::string data_dir;
  std::string generator;
  int patches = 512;
  int patch_size = 64;
  int epochs = 40;
  std::string lr_stages = "30@1e-3,10@3e-4";
  int batch = 8;
  int channels = 32;
  int kernel = 5;
  std::uint64_t seed = kDefaultSeed;
  int jobs = 1;
};

std::vector<Image> tiles_from(const fs::path& dir, int size) {
  std::vector<Image> out;
  for (const auto& p : files_with_extension(dir, ".ppm")) {
    const Image img = load_image(p);
    for (int y = 0; y + size <= img.height; y += size)
      for (int x = 0; x + size <= img.width; x += size) {
        Image t(size, size);
        for (int c = 0; c < 3; ++c)
          for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j) t.at(c, i, j) = img.at(c, y + i, x + j);
        out.push_back(std::move(t));
      }
  }
  if (out.empty()) throw UsageError("data directory '" + dir.string() + "' has no PPM image of at least " +
                                    std::to_string(size) + "x" + std::to_string(size));
  return out;
}

int cmd_pretrain(const Context& ctx, const PretrainArgs& a) {
  if (a.lambdas.empty()) throw UsageError("pretrain needs at least one lambda");
  for (double l : a.lambdas)
    if (!(l > 0)) throw UsageError("lambda must be positive");
  if (a.data_dir.empty() == a.generator.empty()) throw UsageError("pass exactly one of --data-dir and --generator");
  if (a.patch_size < 16 || a.patch_size % 16 != 0) throw UsageError("--patch-size must be a positive multiple of 16");

  std::vector<Image> data;
  if (!a.data_dir.empty()) {
    require_dir(a.data_dir, "data directory");
    data = tiles_from(a.data_dir, a.patch_size);
  } else {
    const Domain d = parse_domain(a.generator);
    data = d == Domain::kNatural ? training_patches(a.patches, a.patch_size, a.seed)
                                 : generate_domain({d, a.patches, a.patch_size, a.patch_size, a.seed});
  }
  ctx.log->info("pretraining {} model(s) on {} patches of {}x{}", a.lambdas.size(), data.size(), a.patch_size,
                a.patch_size);

  PretrainSchedule schedule;
  schedule.epochs = a.epochs;
  schedule.lr_stages = parse_lr_stages(a.lr_stages);
  schedule.batch_size = a.batch;
  schedule.seed = a.seed;
  const Architecture arch = Architecture::desk(a.channels, a.kernel);

  fs::create_directories(a.out_dir);
  std::vector<std::string> outputs(a.lambdas.size());
  parallel_for(a.lambdas.size(), a.jobs, [&](std::size_t i) {
    const double lambda = a.lambdas[i];
    PretrainSchedule s = schedule;
    s.on_epoch = [&](int epoch, double loss) { ctx.log->info("lambda {} epoch {} loss {:.5f}", lambda, epoch, loss); };
    const CodecModel m = pretrain(CodecModel::init(arch, a.seed), data, lambda, s);
    const fs::path path = fs::path(a.out_dir) / ("model_" + shortest(lambda) + ".ckpt");
    save_model(m, path);
    outputs[i] = path.string();
    ctx.log->info("wrote {}", path.string());
  });

  Manifest m;
  m.command = "pretrain";
  m.seeds["init"] = a.seed;
  m.seeds["data"] = a.seed;
  m.seeds["schedule"] = a.seed;
  if (!a.data_dir.empty()) m.inputs.push_back(a.data_dir);
  m.outputs = outputs;
  write_manifest(ctx, m, fs::path(a.out_dir) / "pretrain.manifest.json");
  for (const auto& o : outputs) ctx.out << o << "\n";
  return kExitOk;
}

// -------------------------------------------------------------------- encode

struct EncodeArgs {
  std::string model;
  std::vector<std::string> images;
  std::string mode = "ours";
  std::string out;
  std::string config;
  std::uint64_t seed = kDefaultSeed;
  int jobs = 1;
};

Json stats_json(const CodecModel& model, const Image& x, const EncodeResult& r, const std::string& image,
                const std::string& output) {
  const Image delivered = image_from_rgb8(r.x_hat_local.height, r.x_hat_local.width, image_to_rgb8(r.x_hat_local));
  const double mse = distortion(x, delivered);
  Json losses = Json::object();
  const auto& ad = r.adaptation;
  if (ad.stage1) {
    losses["initial"] = ad.stage1->initial.objective;
    losses["latent_refinement"] = ad.stage1->best.objective;
  }
  if (ad.stage2) {
    losses["adapter_skip"] = ad.stage2->skip.objective;
    losses["adapter"] = ad.stage2->with_adapter.objective;
  }
  losses["final_estimate"] = ad.score.objective;
  Json j;
  j["image"] = image;
  j["output"] = output;
  j["mode"] = mode_name(ad.mode);
  j["lambda"] = model.lambda_train;
  j["bytes"] = r.bytes.size();
  j["bpp"] = r.bpp;
  j["psnr"] = optional_number(psnr_from_mse(mse));
  j["mse"] = mse;
  j["objective"] = r.bpp + model.lambda_train * mse;
  j["adapter_sent"] = ad.stage2 && ad.stage2->send;
  j["side_bytes"] = r.container.b_a.size();
  j["diverged"] = ad.diverged;
  j["reconstruction_fnv1a64"] = reconstruction_hash(r.x_hat_local);
  j["stage_losses"] = std::move(losses);
  return j;
}

int cmd_encode(const Context& ctx, const EncodeArgs& a) {
  const Mode mode = parse_mode(a.mode);
  const CodecModel model = load_checked_model(a.model);
  const AdaptationConfig cfg = adaptation_config(a.config, a.seed);
  for (const auto& img : a.images) require_file(img, "input image");
  const bool batch = a.images.size() > 1;
  if (batch) fs::create_directories(a.out);

  std::vector<std::string> outputs(a.images.size());
  std::vector<std::string> lines(a.images.size());
  parallel_for(a.images.size(), a.jobs, [&](std::size_t i) {
    const Image x = load_image(a.images[i]);
    const EncodeResult r = encode_image(model, x, mode, cfg);
    const fs::path out = batch ? fs::path(a.out) / (fs::path(a.images[i]).stem().string() + ".udic") : fs::path(a.out);
    write_file(out, r.bytes);
    const Json stats = stats_json(model, x, r, a.images[i], out.string());
    lines[i] = stats.dump();
    write_text(beside(out, ".stats.json"), lines[i] + "\n");
    outputs[i] = out.string();
    ctx.log->info("{}: {} bytes, {:.4f} bpp, psnr {}", out.string(), r.bytes.size(), r.bpp,
                  stats["psnr"].is_null() ? std::string("inf") : shortest(stats["psnr"].get<double>()));
  });

  Manifest m;
  m.command = "encode";
  if (!a.config.empty()) m.config_paths.push_back(a.config);
  m.seeds["refine"] = cfg.refine.seed;
  m.seeds["adapter"] = cfg.adapter.seed;
  m.models.push_back(a.model);
  m.inputs = a.images;
  for (const auto& o : outputs) {
    m.outputs.push_back(o);
    m.outputs.push_back(beside(o, ".stats.json").string());
  }
  write_manifest(ctx, m, batch ? fs::path(a.out) / "encode.manifest.json" : beside(a.out, ".manifest.json"));
  for (const auto& l : lines) ctx.out << l << "\n";
  return kExitOk;
}

// -------------------------------------------------------------------- decode

int cmd_decode(const Context& ctx, const std::string& model_path, const std::string& file, const std::string& out) {
  const CodecModel model = load_checked_model(model_path);
  require_file(file, "compressed file");
  const Image x = decode_image(model, read_file(file));
  save_image(x, out);
  ctx.log->info("decoded {} to {} ({}x{})", file, out, x.width, x.height);
  Json line;
  line["input"] = file;
  line["output"] = out;
  line["height"] = x.height;
  line["width"] = x.width;
  line["reconstruction_fnv1a64"] = reconstruction_hash(x);
  ctx.out << line.dump() << "\n";
  Manifest m;
  m.command = "decode";
  m.models.push_back(model_path);
  m.inputs.push_back(file);
  m.outputs.push_back(out);
  write_manifest(ctx, m, beside(out, ".manifest.json"));
  return kExitOk;
}

// --------------------------------------------------------------------- bench

struct BenchArgs {
  std::string models_dir;
  std::vector<std::string> domains{"line-drawing", "vector-art-like"};
  std::vector<std::string> modes{"none", "latent_only", "ours", "omps", "biases", "full_decoder"};
  std::string out;
  int images = 20;
  int size = 64;
  std::string config;
  std::uint64_t seed = kDefaultSeed;
  int jobs = 1;
  std::optional<double> ordering_lambda;
  std::string bd_method = "cubic";
  int min_models = 4;
};

int cmd_bench(const Context& ctx, const BenchArgs& a) {
  require_dir(a.models_dir, "models directory");
  BenchConfig cfg;
  cfg.domains = parse_domains(a.domains);
  cfg.modes = parse_modes(a.modes);
  cfg.images_per_domain = a.images;
  cfg.height = cfg.width = a.size;
  cfg.seed = a.seed;
  cfg.adaptation = adaptation_config(a.config, a.seed);
  cfg.bd_method = parse_bd_method(a.bd_method);
  cfg.jobs = a.jobs;
  cfg.min_models = a.min_models;

  std::vector<CodecModel> models;
  std::vector<std::string> model_paths;
  for (const auto& p : files_with_extension(a.models_dir, ".ckpt")) {
    models.push_back(load_model(p));
    model_paths.push_back(p.string());
  }
  if (a.ordering_lambda) {
    std::vector<double> lambdas;
    for (const auto& m : models) lambdas.push_back(m.lambda_train);
    std::sort(lambdas.begin(), lambdas.end());
    const auto it = std::find_if(lambdas.begin(), lambdas.end(),
                                 [&](double l) { return std::abs(l - *a.ordering_lambda) <= 1e-9 * l; });
    if (it == lambdas.end()) throw UsageError("no model for --ordering-lambda " + shortest(*a.ordering_lambda));
    cfg.ordering_lambda = static_cast<int>(it - lambdas.begin());
  }

  const Report report = run_benchmark(models, cfg, [&](const std::string& msg) { ctx.log->info("{}", msg); });
  write_text(a.out, emit_report(report));
  ctx.out << format_tables(report);

  Manifest m;
  m.command = "bench";
  if (!a.config.empty()) m.config_paths.push_back(a.config);
  m.seeds["images"] = a.seed;
  m.seeds["adaptation"] = a.seed;
  m.models = model_paths;
  m.outputs.push_back(a.out);
  write_manifest(ctx, m, beside(a.out, ".manifest.json"));
  return kExitOk;
}

// ------------------------------------------------------------------ generate

int cmd_generate(const Context& ctx, const std::vector<std::string>& domains, int count, int size,
                 std::uint64_t seed, const std::string& out_dir) {
  std::vector<DomainSpec> specs;
  for (Domain d : parse_domains(domains)) specs.push_back({d, count, size, size, seed});
  const fs::path manifest = write_dataset(specs, out_dir);
  ctx.log->info("wrote {} image(s) per domain to {}", count, out_dir);
  Manifest m;
  m.command = "generate";
  m.seeds["images"] = seed;
  m.outputs.push_back(manifest.string());
  for (const auto& p : files_with_extension(out_dir, ".ppm")) m.outputs.push_back(p.string());
  write_manifest(ctx, m, fs::path(out_dir) / "generate.manifest.json");
  ctx.out << manifest.string() << "\n";
  return kExitOk;
}

// -------------------------------------------------------------------- replay

int run_args(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cmd_replay(const Context& ctx, const std::string& manifest_path, bool check, std::ostream& err) {
  require_file(manifest_path, "manifest");
  Json j;
  std::vector<std::string> argv, outputs;
  std::string wd;
  try {
    j = Json::parse(read_text(manifest_path));
    argv = j.at("argv").get<std::vector<std::string>>();
    outputs = j.at("outputs").get<std::vector<std::string>>();
    wd = j.at("working_directory").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed manifest: ") + e.what());
  }
  if (argv.empty() || argv.front() == "replay") throw UsageError("manifest does not record a replayable command");

  const fs::path previous = fs::current_path();
  fs::current_path(wd);
  std::vector<std::vector<std::uint8_t>> before;
  int code = kExitOk;
  try {
    if (check)
      for (const auto& o : outputs) {
        require_file(o, "recorded output");
        before.push_back(read_file(o));
      }
    std::string line;
    for (const auto& arg : argv) line += " " + arg;
    ctx.log->info("replaying: udic{}", line);
    code = run_args(argv, ctx.out, err);
    if (code == kExitOk && check) {
      std::size_t differing = 0;
      for (std::size_t i = 0; i < outputs.size(); ++i)
        if (!fs::is_regular_file(outputs[i]) || read_file(outputs[i]) != before[i]) {
          ctx.log->error("output differs after replay: {}", outputs[i]);
          ++differing;
        }
      if (differing > 0) {
        err << "error: " << differing << " of " << outputs.size() << " output(s) differ after replay\n";
        code = kExitInternal;
      } else {
        ctx.out << "replay reproduced " << outputs.size() << " output(s) byte-identically\n";
      }
    }
  } catch (...) {
    fs::current_path(previous);
    throw;
  }
  fs::current_path(previous);
  return code;
}

// ---------------------------------------------------------------------- main

int run_args(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Content-adaptive learned image codec"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  PretrainArgs pa;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train one base model per lambda");
  pretrain_cmd->add_option("--lambdas", pa.lambdas, "Lambda values")->required()->delimiter(',');
  pretrain_cmd->add_option("--out-dir", pa.out_dir, "Checkpoint directory")->required();
  auto* data_opt = pretrain_cmd->add_option("--data-dir", pa.data_dir, "Directory of PPM training images");
  auto* gen_opt = pretrain_cmd->add_option("--generator", pa.generator, "Synthetic training domain");
  data_opt->excludes(gen_opt);
  pretrain_cmd->add_option("--patches", pa.patches, "Generated patch count")->capture_default_str();
  pretrain_cmd->add_option("--patch-size", pa.patch_size, "Patch side length")->capture_default_str();
  pretrain_cmd->add_option("--epochs", pa.epochs, "Epochs")->capture_default_str();
  pretrain_cmd->add_option("--lr-stages", pa.lr_stages, "Learning rate stages in epochs")->capture_default_str();
  pretrain_cmd->add_option("--batch", pa.batch, "Batch size")->capture_default_str();
  pretrain_cmd->add_option("--channels", pa.channels, "Hidden and latent channels")->capture_default_str();
  pretrain_cmd->add_option("--kernel", pa.kernel, "Kernel size")->capture_default_str();
  pretrain_cmd->add_option("--seed", pa.seed, "Seed")->capture_default_str();
  pretrain_cmd->add_option("--jobs", pa.jobs, "Models trained concurrently")->capture_default_str()->check(CLI::PositiveNumber);

  EncodeArgs ea;
  auto* encode_cmd = app.add_subcommand("encode", "Compress PPM images");
  encode_cmd->add_option("model", ea.model, "Model checkpoint")->required();
  encode_cmd->add_option("images", ea.images, "Input PPM images")->required();
  encode_cmd->add_option("--mode", ea.mode, "Adaptation mode")->capture_default_str();
  encode_cmd->add_option("--out", ea.out, "Output file, or directory for several images")->required();
  encode_cmd->add_option("--config", ea.config, "Adaptation config file");
  encode_cmd->add_option("--seed", ea.seed, "Seed")->capture_default_str();
  encode_cmd->add_option("--jobs", ea.jobs, "Images encoded concurrently")->capture_default_str()->check(CLI::PositiveNumber);

  std::string dec_model, dec_file, dec_out;
  auto* decode_cmd = app.add_subcommand("decode", "Decompress a file to PPM");
  decode_cmd->add_option("model", dec_model, "Model checkpoint")->required();
  decode_cmd->add_option("file", dec_file, "Compressed file")->required();
  decode_cmd->add_option("--out", dec_out, "Output PPM")->required();

  BenchArgs ba;
  double ordering = 0;
  auto* bench_cmd = app.add_subcommand("bench", "Run the rate-distortion benchmark");
  bench_cmd->add_option("models-dir", ba.models_dir, "Directory of model checkpoints")->required();
  bench_cmd->add_option("--domains", ba.domains, "Evaluation domains")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--modes", ba.modes, "Modes; none is the anchor")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--out", ba.out, "Report path")->required();
  bench_cmd->add_option("--images", ba.images, "Images per domain")->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--size", ba.size, "Image side length")->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--config", ba.config, "Adaptation config file");
  bench_cmd->add_option("--seed", ba.seed, "Seed")->capture_default_str();
  bench_cmd->add_option("--jobs", ba.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  auto* ordering_opt = bench_cmd->add_option("--ordering-lambda", ordering, "Run the ordering ablation at this lambda");
  bench_cmd->add_option("--bd-method", ba.bd_method, "cubic or pchip")->capture_default_str();
  bench_cmd->add_option("--min-models", ba.min_models, "Fewest models accepted")->capture_default_str();

  std::vector<std::string> gen_domains;
  for (Domain d : all_domains()) gen_domains.emplace_back(domain_name(d));
  int gen_count = 20, gen_size = 64;
  std::uint64_t gen_seed = kDefaultSeed;
  std::string gen_out;
  auto* generate_cmd = app.add_subcommand("generate", "Write a synthetic evaluation set");
  generate_cmd->add_option("--domains", gen_domains, "Domains")->delimiter(',')->capture_default_str();
  generate_cmd->add_option("--count", gen_count, "Images per domain")->capture_default_str()->check(CLI::PositiveNumber);
  generate_cmd->add_option("--size", gen_size, "Image side length")->capture_default_str()->check(CLI::PositiveNumber);
  generate_cmd->add_option("--seed", gen_seed, "Seed")->capture_default_str();
  generate_cmd->add_option("--out-dir", gen_out, "Output directory")->required();

  std::string replay_manifest;
  bool replay_check = false;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay_cmd->add_option("manifest", replay_manifest, "Manifest file")->required();
  replay_cmd->add_flag("--check", replay_check, "Fail unless every recorded output is reproduced byte-identically");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto log = std::make_shared<spdlog::logger>("udic", sink);
    log->set_pattern("[%l] %v");
    log->set_level(log_level());
    const Context ctx{args, out, log};

    if (*pretrain_cmd) return cmd_pretrain(ctx, pa);
    if (*encode_cmd) return cmd_encode(ctx, ea);
    if (*decode_cmd) return cmd_decode(ctx, dec_model, dec_file, dec_out);
    if (*bench_cmd) {
      if (*ordering_opt) ba.ordering_lambda = ordering;
      return cmd_bench(ctx, ba);
    }
    if (*generate_cmd) return cmd_generate(ctx, gen_domains, gen_count, gen_size, gen_seed, gen_out);
    return cmd_replay(ctx, replay_manifest, replay_check, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ImageFormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return run_args(args, out, err);
}

}  // namespace udic::cli
