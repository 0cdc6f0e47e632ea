#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "udic/evalbench.hpp"

using namespace udic;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome udic_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("udic_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

nlohmann::json json_file(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// Two small models trained for one epoch, shared by the tests below.
const fs::path& tiny_models() {
  static const fs::path dir = [] {
    const fs::path d = scratch("models");
    const auto r = udic_run({"pretrain", "--lambdas", "0.0067,0.025", "--out-dir", d.string(), "--generator",
                             "natural-like", "--patches", "8", "--patch-size", "32", "--epochs", "1", "--lr-stages",
                             "1@1e-3", "--channels", "8", "--kernel", "3"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return d;
  }();
  return dir;
}

fs::path write_ppm(const fs::path& dir, Domain d, int size, std::uint64_t seed) {
  const fs::path p = dir / (std::string(domain_name(d)) + "_" + std::to_string(seed) + ".ppm");
  save_image(generate_image(d, size, size, seed), p);
  return p;
}

fs::path fast_config(const fs::path& dir) {
  const fs::path p = dir / "fast.cfg";
  std::ofstream(p) << "version = 1\nrefine.iterations = 20\nrefine.lr_stages = 20@5e-2\n"
                      "adapter.iterations = 20\nadapter.lr_stages = 20@1e-2\n";
  return p;
}

}  // namespace

TEST_CASE("cli: usage errors exit with 2") {
  CHECK(udic_run({}).code == 2);
  CHECK(udic_run({"frobnicate"}).code == 2);
  CHECK(udic_run({"--help"}).code == 0);
  const fs::path dir = scratch("usage");
  auto r = udic_run({"bench", tiny_models().string(), "--modes", "none,sparkle", "--out", (dir / "r.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown mode") != std::string::npos);
  r = udic_run({"pretrain", "--lambdas", "0.01", "--out-dir", dir.string(), "--data-dir", (dir / "absent").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("does not exist") != std::string::npos);
  CHECK(udic_run({"encode", (dir / "absent.ckpt").string(), "x.ppm", "--out", "y"}).code == 2);
  CHECK(udic_run({"generate", "--domains", "photos", "--out-dir", dir.string()}).code == 2);

  setenv("UDIC_LOG", "loud", 1);
  r = udic_run({"generate", "--count", "1", "--out-dir", dir.string()});
  unsetenv("UDIC_LOG");
  CHECK(r.code == 2);
  CHECK(r.err.find("UDIC_LOG") != std::string::npos);
}

TEST_CASE("cli pretrain: one checkpoint per lambda, reproducible from its manifest") {
  const fs::path& dir = tiny_models();
  CHECK(fs::exists(dir / "model_0.0067.ckpt"));
  CHECK(fs::exists(dir / "model_0.025.ckpt"));
  CHECK(load_model(dir / "model_0.025.ckpt").lambda_train == 0.025);
  const auto manifest = json_file(dir / "pretrain.manifest.json");
  CHECK(manifest["command"] == "pretrain");
  CHECK(manifest["outputs"].size() == 2);
  CHECK(manifest["tool_version"] == cli::kToolVersion);
  const auto r = udic_run({"replay", (dir / "pretrain.manifest.json").string(), "--check"});
  CHECK_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("byte-identically") != std::string::npos);
}

TEST_CASE("cli pretrain: data directory input") {
  const fs::path dir = scratch("pretrain_data");
  fs::create_directories(dir / "data");
  write_ppm(dir / "data", Domain::kNatural, 40, 1);
  auto r = udic_run({"pretrain", "--lambdas", "0.013", "--out-dir", (dir / "m").string(), "--data-dir",
                     (dir / "data").string(), "--patch-size", "32", "--epochs", "1", "--lr-stages", "1@1e-3",
                     "--channels", "8", "--kernel", "3"});
  CHECK_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "m" / "model_0.013.ckpt"));
  r = udic_run({"pretrain", "--lambdas", "0.013", "--out-dir", (dir / "m").string(), "--data-dir",
                (dir / "data").string(), "--patch-size", "64"});
  CHECK(r.code == 2);
}

TEST_CASE("cli encode/decode: sidecar stats match the file and the decoder") {
  const fs::path dir = scratch("codec");
  const fs::path model = tiny_models() / "model_0.025.ckpt";
  const fs::path img = write_ppm(dir, Domain::kLineDrawing, 32, 3);
  const fs::path cfg = fast_config(dir);
  for (const std::string mode : {"none", "latent_only", "ours"}) {
    CAPTURE(mode);
    const fs::path file = dir / (mode + ".udic");
    auto r = udic_run({"encode", model.string(), img.string(), "--mode", mode, "--out", file.string(), "--config",
                       cfg.string(), "--seed", "3"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto stats = json_file(dir / (mode + ".udic.stats.json"));
    CHECK(stats["bytes"] == fs::file_size(file));
    CHECK(stats["bpp"].get<double>() == bits_per_pixel(fs::file_size(file), 32, 32));
    CHECK(stats["mode"] == mode);
    CHECK(stats["stage_losses"].contains("final_estimate"));
    CHECK(stats["stage_losses"].contains("latent_refinement") == (mode != "none"));
    CHECK(stats["stage_losses"].contains("adapter") == (mode == "ours"));
    CHECK(stats["adapter_sent"].is_boolean());
    CHECK(slurp(dir / (mode + ".udic.stats.json")).find('\n') == slurp(dir / (mode + ".udic.stats.json")).size() - 1);

    const fs::path out = dir / (mode + ".ppm");
    r = udic_run({"decode", model.string(), file.string(), "--out", out.string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(nlohmann::json::parse(r.out)["reconstruction_fnv1a64"] == stats["reconstruction_fnv1a64"]);
    const Image x = load_image(img), x_hat = load_image(out);
    CHECK(distortion(x, x_hat) == doctest::Approx(stats["mse"].get<double>()).epsilon(1e-12));

    r = udic_run({"replay", (dir / (mode + ".udic.manifest.json")).string(), "--check"});
    CHECK_MESSAGE(r.code == 0, r.err);
  }
}

TEST_CASE("cli decode: truncated file and wrong model fail cleanly") {
  const fs::path dir = scratch("decode_errors");
  const fs::path img = write_ppm(dir, Domain::kVectorArt, 32, 4);
  const fs::path file = dir / "a.udic";
  REQUIRE(udic_run({"encode", (tiny_models() / "model_0.025.ckpt").string(), img.string(), "--mode", "none", "--out",
                    file.string()})
              .code == 0);
  auto r = udic_run({"decode", (tiny_models() / "model_0.0067.ckpt").string(), file.string(), "--out",
                     (dir / "o.ppm").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("lambda") != std::string::npos);

  const auto bytes = read_file(file);
  write_file(dir / "t.udic", std::span(bytes).first(bytes.size() / 2));
  r = udic_run({"decode", (tiny_models() / "model_0.025.ckpt").string(), (dir / "t.udic").string(), "--out",
                (dir / "o.ppm").string()});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK_FALSE(fs::exists(dir / "o.ppm"));
}

TEST_CASE("cli encode: batches with jobs match single runs") {
  const fs::path dir = scratch("batch");
  const fs::path model = tiny_models() / "model_0.0067.ckpt";
  const fs::path cfg = fast_config(dir);
  std::vector<std::string> args{"encode", model.string()};
  for (int i = 0; i < 3; ++i) args.push_back(write_ppm(dir, Domain::kComic, 32, 10 + i).string());
  for (std::string a : std::vector<std::string>{"--mode", "ours", "--config", cfg.string(), "--jobs", "2", "--out", (dir / "out").string()})
    args.push_back(a);
  const auto r = udic_run(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "out" / "encode.manifest.json"));
  const auto single = udic_run({"encode", model.string(), args[3], "--mode", "ours", "--config", cfg.string(), "--out",
                                (dir / "single.udic").string()});
  REQUIRE(single.code == 0);
  CHECK(read_file(dir / "single.udic") == read_file(dir / "out" / (fs::path(args[3]).stem().string() + ".udic")));
}

TEST_CASE("cli generate: dataset and manifest") {
  const fs::path dir = scratch("generate");
  const auto r = udic_run({"generate", "--domains", "line-drawing,comic-like", "--count", "2", "--size", "24",
                           "--out-dir", dir.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(json_file(dir / "generate.manifest.json")["outputs"].size() == 5);
  CHECK(udic_run({"replay", (dir / "generate.manifest.json").string(), "--check"}).code == 0);
}

TEST_CASE("cli replay: a changed output is reported") {
  const fs::path dir = scratch("replay");
  REQUIRE(udic_run({"generate", "--domains", "natural-like", "--count", "1", "--size", "16", "--out-dir", dir.string()})
              .code == 0);
  const auto manifest = json_file(dir / "generate.manifest.json");
  const fs::path first = manifest["outputs"][1].get<std::string>();
  auto bytes = read_file(first);
  bytes.back() ^= 1;
  write_file(first, bytes);
  const auto r = udic_run({"replay", (dir / "generate.manifest.json").string(), "--check"});
  CHECK(r.code == 1);
  CHECK(r.err.find("differ") != std::string::npos);
  CHECK(udic_run({"replay", (dir / "absent.json").string()}).code == 2);
}

TEST_CASE("cli bench: smoke run with one domain, two lambdas, five images") {
  const fs::path dir = scratch("bench");
  const auto start = std::chrono::steady_clock::now();
  const auto r = udic_run({"bench", tiny_models().string(), "--domains", "line-drawing", "--modes", "none,latent_only",
                           "--images", "5", "--size", "32", "--min-models", "2", "--out",
                           (dir / "report.json").string()});
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(seconds < 600);
  const Report report = parse_report(slurp(dir / "report.json"));
  CHECK(report.rows.size() == 2 * 2 * 5);
  CHECK(report.summaries.size() == 2);
  CHECK_FALSE(report.summaries[1].bd_rate.has_value());
  CHECK(r.out.find("latent_only") != std::string::npos);
  for (const auto& row : report.rows)
    if (row.mode == "latent_only") {
      const auto anchor = std::find_if(report.rows.begin(), report.rows.end(), [&](const ImageRow& a) {
        return a.mode == "none" && a.image == row.image && a.lambda == row.lambda;
      });
      CHECK(row.objective <= anchor->objective + 1e-9);
    }
  CHECK(udic_run({"bench", tiny_models().string(), "--domains", "line-drawing", "--modes", "none", "--images", "1",
                  "--size", "32", "--out", (dir / "r2.json").string()})
            .code == 2);
}
