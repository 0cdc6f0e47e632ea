// The container that carries one compressed image: a fixed header, the
// range-coded latent b_l and the side-information stream b_a.
//
//   "UDIC" | version u16 | lambda index u8 | H u16 | W u16 | latent h u16 |
//   latent w u16 | side kind u8 | [rank u8 | insertion u8] | len(b_l) varint |
//   b_l | b_a
//
// Little-endian throughout. b_a runs to the end of the container and is empty
// when the side kind is none.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "udic/adaptation.hpp"
#include "udic/bytes.hpp"
#include "udic/coder.hpp"

namespace udic {

inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::array<double, 6> kLambdaGrid{0.0018, 0.0035, 0.0067, 0.013, 0.025, 0.0483};
inline constexpr std::uint8_t kCustomLambda = 255;

/// Adapter and full-decoder indices are coded under the logistic prior with
/// these fixed values; they are part of the format.
inline constexpr double kWireInterval = 0.06;
inline constexpr double kWirePriorScale = 0.05;
inline constexpr int kWireHalfRange = 64;

/// Index of `lambda` in kLambdaGrid (relative tolerance 1e-6), else kCustomLambda.
std::uint8_t lambda_index(double lambda);

struct Container {
  std::uint16_t version = kContainerVersion;
  std::uint8_t lambda_index = kCustomLambda;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t latent_height = 0;
  std::uint16_t latent_width = 0;
  SideInfoKind kind = SideInfoKind::kNone;
  std::uint8_t rank = 0;       // kAdapter only
  std::uint8_t insertion = 0;  // kAdapter only
  std::vector<std::uint8_t> b_l;
  std::vector<std::uint8_t> b_a;

  bool operator==(const Container&) const = default;
};

std::vector<std::uint8_t> serialize(const Container& c);
/// Throws FormatError on any malformed or truncated input.
Container parse_container(std::span<const std::uint8_t> bytes);

/// Header bytes before b_l.
std::size_t header_size(const Container& c);

/// Total bits / pixels of a serialized container.
double bits_per_pixel(std::size_t container_bytes, int height, int width);

struct EncodeResult {
  Container container;
  std::vector<std::uint8_t> bytes;
  Image x_hat_local;
  AdaptationResult adaptation;
  double bpp = 0;
};

/// Adapts `x` with `mode`, codes the result, and reconstructs locally.
EncodeResult encode_image(const CodecModel& model, const Image& x, Mode mode, const AdaptationConfig& cfg,
                          const RefineResult* stage1 = nullptr);

/// Codes an existing adaptation result.
EncodeResult encode_adapted(const CodecModel& model, const Image& x, AdaptationResult adaptation);

/// Throws FormatError for malformed containers, mismatched models or lambda,
/// and corrupt streams.
Image decode_image(const CodecModel& model, std::span<const std::uint8_t> bytes);
Image decode_container(const CodecModel& model, const Container& c);

/// Latent and side information recovered from a container.
struct DecodedPayload {
  Latent y_hat;
  SideInfo side;
};
DecodedPayload decode_payload(const CodecModel& model, const Container& c);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace udic
