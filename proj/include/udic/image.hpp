// RGB images with samples in [0, 1], plus binary PPM (P6) I/O.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace udic {

/// Planar (CHW) 3-channel image.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // 3 * height * width

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), data(static_cast<std::size_t>(3) * h * w, fill) {}

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  bool operator==(const Image&) const = default;
};

class ImageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved 8-bit RGB <-> Image. Samples map to byte / 255.
Image image_from_rgb8(int height, int width, std::span<const std::uint8_t> rgb);
std::vector<std::uint8_t> image_to_rgb8(const Image& img);

/// Parses a P6 file with maxval 255. Comments in the header are accepted.
Image decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const Image& img);

Image load_image(const std::filesystem::path& path);
void save_image(const Image& img, const std::filesystem::path& path);

/// Extends the bottom/right edges by mirror reflection to multiples of
/// `multiple`.
Image pad_reflect(const Image& img, int multiple);
/// Top-left crop.
Image crop(const Image& img, int height, int width);

}  // namespace udic
