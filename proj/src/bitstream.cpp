#include "udic/bitstream.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

namespace udic {

namespace {

constexpr std::string_view kMagic = "UDIC";
constexpr int kMaxVarintBytes = 5;

void put_varint(ByteWriter& w, std::uint32_t v) {
  while (v >= 0x80) {
    w.u8(static_cast<std::uint8_t>(v | 0x80));
    v >>= 7;
  }
  w.u8(static_cast<std::uint8_t>(v));
}

std::uint32_t get_varint(ByteReader& r) {
  std::uint64_t v = 0;
  for (int i = 0; i < kMaxVarintBytes; ++i) {
    const std::uint8_t b = r.u8();
    v |= static_cast<std::uint64_t>(b & 0x7f) << (7 * i);
    if (!(b & 0x80)) {
      if (i > 0 && b == 0) throw FormatError("non-minimal length encoding");
      if (v > 0xFFFFFFFFull) throw FormatError("length out of range");
      return static_cast<std::uint32_t>(v);
    }
  }
  throw FormatError("length field too long");
}

bool has_header_config(SideInfoKind k) { return k == SideInfoKind::kAdapter; }

int latent_extent(int pixels, int stride) { return (pixels + stride - 1) / stride; }

coder::CdfTable wire_table() { return coder::logistic_table(kWirePriorScale, kWireInterval, kWireHalfRange); }

std::vector<std::uint8_t> code_indices(std::span<const std::int32_t> k) {
  const auto table = wire_table();
  coder::RangeEncoder enc;
  for (auto v : k) enc.encode_value(table, v);
  return enc.finish();
}

std::vector<std::int32_t> decode_indices(std::span<const std::uint8_t> bytes, std::size_t count) {
  const auto table = wire_table();
  coder::RangeDecoder dec(bytes);
  std::vector<std::int32_t> k(count);
  for (auto& v : k) v = dec.decode_value(table);
  dec.finish();
  return k;
}

void check_wire_prior(const SideInfo& side) {
  if (side.interval != kWireInterval || side.prior_scale != kWirePriorScale)
    throw std::invalid_argument("side information uses a quantization interval or prior scale the format cannot carry");
}

std::size_t full_decoder_count(const CodecModel& model) {
  std::size_t n = 0;
  for (auto i : full_decoder_param_indices(model)) n += model.params[i].values.size();
  return n;
}

int omp_channels(const CodecModel& model) { return model.arch.decoder[model.adapter_insertion_index].in_channels; }

std::size_t decoder_bias_count(const CodecModel& model) {
  std::size_t n = 0;
  for (int l = 0; l < static_cast<int>(model.arch.decoder.size()); ++l)
    n += model.params[model.dec_bias(l)].values.size();
  return n;
}

}  // namespace

std::uint8_t lambda_index(double lambda) {
  for (std::size_t i = 0; i < kLambdaGrid.size(); ++i)
    if (std::abs(lambda - kLambdaGrid[i]) <= 1e-6 * kLambdaGrid[i]) return static_cast<std::uint8_t>(i);
  return kCustomLambda;
}

std::vector<std::uint8_t> serialize(const Container& c) {
  if (c.kind != SideInfoKind::kNone && c.kind > SideInfoKind::kFullDecoder)
    throw std::invalid_argument("serialize: unknown side information kind");
  if (c.kind == SideInfoKind::kNone && !c.b_a.empty())
    throw std::invalid_argument("serialize: side stream present without side information");
  if (c.b_l.size() > 0xFFFFFFFFull) throw std::invalid_argument("serialize: latent stream too long");
  ByteWriter w;
  w.tag(kMagic);
  w.u16(c.version);
  w.u8(c.lambda_index);
  w.u16(c.height);
  w.u16(c.width);
  w.u16(c.latent_height);
  w.u16(c.latent_width);
  w.u8(static_cast<std::uint8_t>(c.kind));
  if (has_header_config(c.kind)) {
    w.u8(c.rank);
    w.u8(c.insertion);
  }
  put_varint(w, static_cast<std::uint32_t>(c.b_l.size()));
  w.bytes(c.b_l);
  w.bytes(c.b_a);
  return w.take();
}

Container parse_container(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Container c;
  r.expect_tag(kMagic);
  c.version = r.u16();
  if (c.version != kContainerVersion)
    throw FormatError("unsupported container version " + std::to_string(c.version));
  c.lambda_index = r.u8();
  if (c.lambda_index >= kLambdaGrid.size() && c.lambda_index != kCustomLambda)
    throw FormatError("invalid lambda index " + std::to_string(c.lambda_index));
  c.height = r.u16();
  c.width = r.u16();
  c.latent_height = r.u16();
  c.latent_width = r.u16();
  if (c.height == 0 || c.width == 0) throw FormatError("image dimensions must be positive");
  if (c.latent_height == 0 || c.latent_width == 0 || c.latent_height > c.height || c.latent_width > c.width)
    throw FormatError("latent dimensions inconsistent with the image");
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(SideInfoKind::kFullDecoder))
    throw FormatError("unknown side information kind " + std::to_string(kind));
  c.kind = static_cast<SideInfoKind>(kind);
  if (has_header_config(c.kind)) {
    c.rank = r.u8();
    c.insertion = r.u8();
    if (c.rank == 0) throw FormatError("adapter rank must be positive");
  }
  const std::uint32_t n = get_varint(r);
  const auto b_l = r.bytes(n);
  c.b_l.assign(b_l.begin(), b_l.end());
  const auto b_a = r.bytes(r.remaining());
  c.b_a.assign(b_a.begin(), b_a.end());
  if (c.kind == SideInfoKind::kNone && !c.b_a.empty()) throw FormatError("trailing bytes after the latent stream");
  if (c.kind != SideInfoKind::kNone && c.b_a.empty()) throw FormatError("missing side information stream");
  return c;
}

std::size_t header_size(const Container& c) { return serialize(c).size() - c.b_l.size() - c.b_a.size(); }

double bits_per_pixel(std::size_t container_bytes, int height, int width) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("bits_per_pixel: empty image");
  return static_cast<double>(container_bytes) * 8.0 / (static_cast<double>(height) * width);
}

EncodeResult encode_image(const CodecModel& model, const Image& x, Mode mode, const AdaptationConfig& cfg,
                          const RefineResult* stage1) {
  return encode_adapted(model, x, adapt_image(model, x, mode, cfg, stage1));
}

EncodeResult encode_adapted(const CodecModel& model, const Image& x, AdaptationResult adaptation) {
  if (x.height > 0xFFFF || x.width > 0xFFFF) throw std::invalid_argument("image too large for the container");
  const Latent& y = adaptation.y_hat;
  const SideInfo& side = adaptation.side;

  Container c;
  c.lambda_index = lambda_index(model.lambda_train);
  c.height = static_cast<std::uint16_t>(x.height);
  c.width = static_cast<std::uint16_t>(x.width);
  c.latent_height = static_cast<std::uint16_t>(y.height);
  c.latent_width = static_cast<std::uint16_t>(y.width);
  c.kind = side.kind;

  const EntropyModel em(model);
  coder::RangeEncoder enc;
  for (int ch = 0; ch < y.channels; ++ch)
    for (std::size_t i = 0; i < y.plane(); ++i)
      enc.encode_value(em.table(ch), static_cast<std::int32_t>(y.values[ch * y.plane() + i]));
  c.b_l = enc.finish();

  ByteWriter a;
  switch (side.kind) {
    case SideInfoKind::kNone: break;
    case SideInfoKind::kAdapter:
      check_wire_prior(side);
      if (side.adapter_config.rank > 255 || side.adapter_config.insertion_index > 255)
        throw std::invalid_argument("adapter config does not fit the header");
      c.rank = static_cast<std::uint8_t>(side.adapter_config.rank);
      c.insertion = static_cast<std::uint8_t>(side.adapter_config.insertion_index);
      a.bytes(code_indices(side.indices));
      break;
    case SideInfoKind::kBiases:
      for (double b : side.biases) a.f64(b);
      break;
    case SideInfoKind::kOmps:
      a.f32(side.omp_min);
      a.f32(side.omp_step);
      a.bytes(side.omp_codes);
      break;
    case SideInfoKind::kFullDecoder:
      check_wire_prior(side);
      a.bytes(code_indices(side.indices));
      break;
  }
  c.b_a = a.take();

  EncodeResult out;
  out.bytes = serialize(c);
  out.container = std::move(c);
  const PatchedDecoder dec = apply_side_info(model, side);
  out.x_hat_local = decode(dec.model, y, dec.options(x.height, x.width));
  out.bpp = bits_per_pixel(out.bytes.size(), x.height, x.width);
  out.adaptation = std::move(adaptation);
  return out;
}

DecodedPayload decode_payload(const CodecModel& model, const Container& c) {
  if (c.lambda_index != lambda_index(model.lambda_train))
    throw FormatError("container lambda index " + std::to_string(c.lambda_index) + " does not match the model (" +
                      std::to_string(lambda_index(model.lambda_train)) + ")");
  const int stride = model.arch.stride_product();
  if (c.latent_height != latent_extent(c.height, stride) || c.latent_width != latent_extent(c.width, stride))
    throw FormatError("latent dimensions do not match the image size and model stride");

  DecodedPayload p;
  p.y_hat.channels = model.arch.latent_channels;
  p.y_hat.height = c.latent_height;
  p.y_hat.width = c.latent_width;
  p.y_hat.values.resize(static_cast<std::size_t>(p.y_hat.channels) * p.y_hat.plane());
  try {
    const EntropyModel em(model);
    coder::RangeDecoder dec(c.b_l);
    for (int ch = 0; ch < p.y_hat.channels; ++ch)
      for (std::size_t i = 0; i < p.y_hat.plane(); ++i)
        p.y_hat.values[ch * p.y_hat.plane() + i] = static_cast<float>(dec.decode_value(em.table(ch)));
    dec.finish();

    SideInfo& side = p.side;
    side.kind = c.kind;
    side.interval = kWireInterval;
    side.prior_scale = kWirePriorScale;
    ByteReader r(c.b_a);
    switch (c.kind) {
      case SideInfoKind::kNone: break;
      case SideInfoKind::kAdapter: {
        side.adapter_config = AdapterConfig{c.rank, adapter_config(model).channels, c.insertion};
        if (c.insertion != model.adapter_insertion_index)
          throw FormatError("adapter insertion index does not match the model");
        side.indices = decode_indices(c.b_a, static_cast<std::size_t>(param_count(side.adapter_config)));
        break;
      }
      case SideInfoKind::kBiases: {
        const std::size_t n = decoder_bias_count(model);
        if (c.b_a.size() != 8 * n) throw FormatError("bias stream has the wrong length");
        for (std::size_t i = 0; i < n; ++i) side.biases.push_back(r.f64());
        break;
      }
      case SideInfoKind::kOmps: {
        const auto n = static_cast<std::size_t>(omp_channels(model));
        if (c.b_a.size() != 8 + n) throw FormatError("scale stream has the wrong length");
        side.omp_min = r.f32();
        side.omp_step = r.f32();
        const auto codes = r.bytes(n);
        side.omp_codes.assign(codes.begin(), codes.end());
        break;
      }
      case SideInfoKind::kFullDecoder:
        side.indices = decode_indices(c.b_a, full_decoder_count(model));
        break;
    }
  } catch (const coder::CodingError& e) {
    throw FormatError(std::string("corrupt stream: ") + e.what());
  }
  return p;
}

Image decode_container(const CodecModel& model, const Container& c) {
  const DecodedPayload p = decode_payload(model, c);
  try {
    const PatchedDecoder dec = apply_side_info(model, p.side);
    return decode(dec.model, p.y_hat, dec.options(c.height, c.width));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("side information does not fit the model: ") + e.what());
  }
}

Image decode_image(const CodecModel& model, std::span<const std::uint8_t> bytes) {
  return decode_container(model, parse_container(bytes));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace udic
