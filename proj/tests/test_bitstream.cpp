#include <doctest.h>

#include <random>

#include "udic/bitstream.hpp"

using namespace udic;

namespace {

Image test_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(c, y, x) = 0.1f + 0.3f * u(rng) + 0.5f * float(x * y % 17) / 17.0f;
  return img;
}

CodecModel small_model(std::uint64_t seed = 1, double lambda = 0.013) {
  CodecModel m = CodecModel::init(Architecture::desk(8, 3), seed);
  m.lambda_train = lambda;
  for (auto& v : m.params[m.dec_weight(3)].values) v *= 0.1f;
  return m;
}

AdaptationConfig quick_config() {
  AdaptationConfig cfg;
  cfg.refine.iterations = 15;
  cfg.refine.lr_stages = {{15, 5e-2}};
  cfg.adapter.iterations = 15;
  cfg.adapter.lr_stages = {{15, 2e-2}};
  return cfg;
}

Container random_container(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> byte(0, 255), kind(0, 4), len(0, 40), dim(1, 4000);
  Container c;
  c.lambda_index = static_cast<std::uint8_t>(byte(rng) % 7 == 6 ? kCustomLambda : byte(rng) % 6);
  c.height = static_cast<std::uint16_t>(dim(rng));
  c.width = static_cast<std::uint16_t>(dim(rng));
  c.latent_height = static_cast<std::uint16_t>(1 + c.height / 16);
  c.latent_width = static_cast<std::uint16_t>(1 + c.width / 16);
  if (c.latent_height > c.height) c.latent_height = c.height;
  if (c.latent_width > c.width) c.latent_width = c.width;
  c.kind = static_cast<SideInfoKind>(kind(rng));
  if (c.kind == SideInfoKind::kAdapter) {
    c.rank = static_cast<std::uint8_t>(1 + byte(rng) % 8);
    c.insertion = static_cast<std::uint8_t>(byte(rng) % 4);
  }
  c.b_l.resize(static_cast<std::size_t>(len(rng)) + (byte(rng) == 0 ? 300 : 0));
  for (auto& b : c.b_l) b = static_cast<std::uint8_t>(byte(rng));
  if (c.kind != SideInfoKind::kNone) {
    c.b_a.resize(1 + static_cast<std::size_t>(len(rng)));
    for (auto& b : c.b_a) b = static_cast<std::uint8_t>(byte(rng));
  }
  return c;
}

}  // namespace

TEST_CASE("lambda grid indices") {
  for (std::size_t i = 0; i < kLambdaGrid.size(); ++i) CHECK(lambda_index(kLambdaGrid[i]) == i);
  CHECK(lambda_index(0.0067 * (1 + 1e-9)) == 2);
  CHECK(lambda_index(0.005) == kCustomLambda);
  CHECK(lambda_index(0.0) == kCustomLambda);
}

TEST_CASE("parse(serialize(c)) == c for random containers") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2000; ++i) {
    const Container c = random_container(rng);
    const auto bytes = serialize(c);
    CHECK(parse_container(bytes) == c);
    CHECK(bytes.size() == header_size(c) + c.b_l.size() + c.b_a.size());
  }
}

TEST_CASE("header layout") {
  Container c;
  c.lambda_index = 3;
  c.height = 0x0102;
  c.width = 0x0304;
  c.latent_height = 17;
  c.latent_width = 49;
  c.b_l = {0xAA, 0xBB};
  const auto bytes = serialize(c);
  const std::vector<std::uint8_t> expect{'U', 'D', 'I', 'C', 1, 0, 3, 0x02, 0x01, 0x04, 0x03, 17, 0, 49, 0, 0, 2, 0xAA, 0xBB};
  CHECK(bytes == expect);
  CHECK(header_size(c) == 17);

  c.kind = SideInfoKind::kAdapter;
  c.rank = 2;
  c.insertion = 1;
  c.b_a = {7};
  CHECK(header_size(c) == 19);
  c.b_l.assign(200, 1);
  CHECK(header_size(c) == 20);  // two-byte length
}

TEST_CASE("parse rejects malformed headers") {
  Container c;
  c.lambda_index = 1;
  c.height = 32;
  c.width = 32;
  c.latent_height = 2;
  c.latent_width = 2;
  c.b_l = {1, 2, 3};
  const auto good = serialize(c);
  auto bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(parse_container(bad), FormatError);
  bad = good;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(parse_container(bad), doctest::Contains("version"), FormatError);
  bad = good;
  bad[6] = 17;
  CHECK_THROWS_AS(parse_container(bad), FormatError);
  bad = good;
  bad[15] = 9;
  CHECK_THROWS_AS(parse_container(bad), FormatError);
  bad = good;
  bad.push_back(0);
  CHECK_THROWS_AS(parse_container(bad), FormatError);
  for (std::size_t n = 0; n < good.size(); ++n)
    CHECK_THROWS_AS(parse_container(std::span(good).first(n)), FormatError);
  // Non-minimal length encoding.
  bad = std::vector<std::uint8_t>(good.begin(), good.begin() + 16);
  bad.push_back(0x83);
  bad.push_back(0x00);
  bad.insert(bad.end(), {1, 2, 3});
  CHECK_THROWS_AS(parse_container(bad), FormatError);
}

TEST_CASE("bits per pixel counts every byte") {
  CHECK(bits_per_pixel(100, 16, 50) == doctest::Approx(1.0));
  CHECK_THROWS_AS(bits_per_pixel(1, 0, 4), std::invalid_argument);
}

TEST_CASE("encode/decode round trip for every mode") {
  const auto model = small_model();
  const Image x = test_image(37, 45, 2);
  const auto cfg = quick_config();
  const auto stage1 = refine_latent(model, x, cfg.refine);
  for (Mode mode : all_modes()) {
    CAPTURE(mode_name(mode));
    const auto r = encode_image(model, x, mode, cfg, mode == Mode::kAdaptersFirst ? nullptr : &stage1);
    CHECK(r.bpp == bits_per_pixel(r.bytes.size(), 37, 45));
    CHECK(r.container.kind == r.adaptation.side.kind);
    const Image y = decode_image(model, r.bytes);
    CHECK(y.height == 37);
    CHECK(y.width == 45);
    CHECK(y == r.x_hat_local);
    const auto payload = decode_payload(model, parse_container(r.bytes));
    CHECK(payload.y_hat == r.adaptation.y_hat);
    CHECK(payload.side == r.adaptation.side);
    if (mode == Mode::kNone) {
      CHECK(r.container.kind == SideInfoKind::kNone);
      CHECK(r.container.b_a.empty());
    }
  }
}

TEST_CASE("coded latent length matches the estimate") {
  const auto model = small_model(3);
  const Image x = test_image(64, 64, 3);
  const auto r = encode_image(model, x, Mode::kNone, quick_config());
  const double est = r.adaptation.score.latent_bits;
  const double coded = 8.0 * r.container.b_l.size();
  CHECK(coded <= est + 32);
  CHECK(coded >= est - 8);
}

TEST_CASE("adapter stream: coded length tracks param_rate and skip matches latent_only") {
  const auto model = small_model(4);
  const Image x = test_image(32, 32, 4);
  auto cfg = quick_config();
  const auto stage1 = refine_latent(model, x, cfg.refine);

  AdaptationResult forced = adapt_image(model, x, Mode::kLatentOnly, cfg, &stage1);
  forced.side.kind = SideInfoKind::kAdapter;
  forced.side.adapter_config = adapter_config(model);
  forced.side.indices.assign(param_count(forced.side.adapter_config), 0);
  for (std::size_t i = 0; i < forced.side.indices.size(); i += 3) forced.side.indices[i] = static_cast<int>(i % 5) - 2;
  forced.side.indices[1] = 200;  // escape
  const auto r = encode_adapted(model, x, forced);
  const double ideal = param_rate(forced.side.indices, LogisticPrior{kWirePriorScale}, kWireInterval);
  CHECK(8.0 * r.container.b_a.size() <= ideal * 1.001 + 32 + 16);
  CHECK(decode_payload(model, r.container).side.indices == forced.side.indices);
  CHECK(decode_image(model, r.bytes) == r.x_hat_local);

  cfg.adapter.force_skip = true;
  const auto ours = encode_image(model, x, Mode::kOurs, cfg, &stage1);
  const auto lo = encode_image(model, x, Mode::kLatentOnly, cfg, &stage1);
  CHECK(ours.bytes == lo.bytes);

  SUBCASE("zero adapter decodes like no adapter") {
    AdaptationResult zero = forced;
    std::fill(zero.side.indices.begin(), zero.side.indices.end(), 0);
    CHECK(decode_image(model, encode_adapted(model, x, zero).bytes) == decode_image(model, lo.bytes));
  }
}

TEST_CASE("non-wire prior parameters are rejected at encode") {
  const auto model = small_model(5);
  const Image x = test_image(16, 16, 5);
  auto cfg = quick_config();
  cfg.adapter.interval = 0.03;
  AdaptationResult r = adapt_image(model, x, Mode::kLatentOnly, cfg);
  r.side.kind = SideInfoKind::kAdapter;
  r.side.adapter_config = adapter_config(model);
  r.side.indices.assign(param_count(r.side.adapter_config), 0);
  r.side.interval = 0.03;
  CHECK_THROWS_AS(encode_adapted(model, x, r), std::invalid_argument);
}

TEST_CASE("decode errors: lambda, model, latent dims, truncation") {
  const auto model = small_model(6);
  const Image x = test_image(32, 32, 6);
  const auto r = encode_image(model, x, Mode::kNone, quick_config());

  CodecModel other = model;
  other.lambda_train = 0.025;
  CHECK_THROWS_WITH_AS(decode_image(other, r.bytes), doctest::Contains("lambda"), FormatError);

  Container c = r.container;
  c.latent_height = 3;
  CHECK_THROWS_AS(decode_container(model, c), FormatError);

  c = r.container;
  c.b_l.pop_back();
  CHECK_THROWS_AS(decode_container(model, c), FormatError);
  c = r.container;
  c.b_l.push_back(0);
  CHECK_THROWS_AS(decode_container(model, c), FormatError);

  c = r.container;
  c.kind = SideInfoKind::kBiases;
  c.b_a = {1, 2, 3};
  CHECK_THROWS_AS(decode_container(model, c), FormatError);
  c.kind = SideInfoKind::kOmps;
  CHECK_THROWS_AS(decode_container(model, c), FormatError);
  c.kind = SideInfoKind::kAdapter;
  c.rank = 2;
  c.insertion = 0;
  CHECK_THROWS_AS(decode_container(model, c), FormatError);
}

TEST_CASE("single-byte flips of b_l: error or a different image") {
  const auto model = small_model(7);
  const Image x = test_image(48, 48, 7);
  const auto r = encode_image(model, x, Mode::kNone, quick_config());
  const std::size_t start = r.bytes.size() - r.container.b_l.size();
  int errors = 0, different = 0;
  for (std::size_t i = start; i < r.bytes.size(); ++i) {
    for (std::uint8_t mask : {0x01, 0x80, 0xFF}) {
      auto bad = r.bytes;
      bad[i] ^= mask;
      try {
        if (decode_image(model, bad) != r.x_hat_local) ++different;
        else FAIL("flip at " << i << " decoded to the same image");
      } catch (const FormatError&) {
        ++errors;
      }
    }
  }
  CHECK(errors + different == 3 * static_cast<int>(r.container.b_l.size()));
}

TEST_CASE("fuzz: mutated containers never crash") {
  const auto model = small_model(8);
  const Image x = test_image(32, 32, 8);
  const auto cfg = quick_config();
  std::vector<std::vector<std::uint8_t>> seeds;
  for (Mode m : {Mode::kNone, Mode::kOurs, Mode::kBiases, Mode::kOmps}) seeds.push_back(encode_image(model, x, m, cfg).bytes);
  AdaptationResult forced = adapt_image(model, x, Mode::kNone, cfg);
  forced.side.kind = SideInfoKind::kAdapter;
  forced.side.adapter_config = adapter_config(model);
  forced.side.indices.assign(param_count(forced.side.adapter_config), 1);
  seeds.push_back(encode_adapted(model, x, forced).bytes);

  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> byte(0, 255), op(0, 3);
  int decoded = 0, rejected = 0;
  for (int i = 0; i < 20000; ++i) {
    auto bytes = seeds[static_cast<std::size_t>(i) % seeds.size()];
    const int edits = 1 + op(rng);
    for (int e = 0; e < edits; ++e) {
      const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, bytes.size() - 1)(rng);
      switch (op(rng)) {
        case 0: bytes[pos] = static_cast<std::uint8_t>(byte(rng)); break;
        case 1: bytes[pos] ^= static_cast<std::uint8_t>(1u << (byte(rng) % 8)); break;
        case 2: bytes.resize(pos); break;
        default: bytes.insert(bytes.begin() + static_cast<std::ptrdiff_t>(pos), static_cast<std::uint8_t>(byte(rng)));
      }
      if (bytes.empty()) bytes.push_back(0);
    }
    try {
      const Image out = decode_image(model, bytes);
      CHECK(out.height > 0);
      ++decoded;
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  CHECK(decoded + rejected == 20000);
  CHECK(rejected > 0);
}
