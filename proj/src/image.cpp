#include "udic/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace udic {

Image image_from_rgb8(int height, int width, std::span<const std::uint8_t> rgb) {
  if (height <= 0 || width <= 0) throw ImageFormatError("image dimensions must be positive");
  Image img(height, width);
  if (rgb.size() != img.data.size()) throw ImageFormatError("rgb buffer has wrong size");
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] / 255.0f;
  return img;
}

std::vector<std::uint8_t> image_to_rgb8(const Image& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        out[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return out;
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
        ++pos_;
      } else {
        return;
      }
    }
  }

  long number(const char* what) {
    skip_space_and_comments();
    long v = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (++digits > 9) throw ImageFormatError(std::string("PPM header: ") + what + " too large");
    }
    if (digits == 0) throw ImageFormatError(std::string("PPM header: missing ") + what);
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance() { ++pos_; }
  bool at_end() const { return pos_ >= bytes_.size(); }
  std::uint8_t peek() const { return bytes_[pos_]; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ImageFormatError("not a binary PPM (P6) file");
  HeaderReader rd(bytes.subspan(2));
  const long width = rd.number("width");
  const long height = rd.number("height");
  const long maxval = rd.number("maxval");
  if (width <= 0 || height <= 0) throw ImageFormatError("PPM header: dimensions must be positive");
  if (width > 65535 || height > 65535) throw ImageFormatError("PPM header: dimensions exceed 65535");
  if (maxval > 255 && maxval < 65536) throw ImageFormatError("PPM: unsupported sample depth (16-bit)");
  if (maxval != 255) throw ImageFormatError("PPM: unsupported maxval " + std::to_string(maxval));
  if (rd.at_end()) throw ImageFormatError("PPM: truncated header");
  const auto sep = rd.peek();
  if (sep != ' ' && sep != '\t' && sep != '\n' && sep != '\r') throw ImageFormatError("PPM header: missing separator");
  rd.advance();
  const std::size_t offset = 2 + rd.pos();
  const std::size_t need = static_cast<std::size_t>(width) * height * 3;
  if (bytes.size() - offset < need) throw ImageFormatError("PPM: truncated pixel payload");
  return image_from_rgb8(static_cast<int>(height), static_cast<int>(width), bytes.subspan(offset, need));
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto rgb = image_to_rgb8(img);
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

Image load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageFormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

void save_image(const Image& img, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageFormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageFormatError("write failed for " + path.string());
}

Image pad_reflect(const Image& img, int multiple) {
  const int h = (img.height + multiple - 1) / multiple * multiple;
  const int w = (img.width + multiple - 1) / multiple * multiple;
  if (h == img.height && w == img.width) return img;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Image out(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, reflect(y, img.height), reflect(x, img.width));
  return out;
}

Image crop(const Image& img, int height, int width) {
  if (height > img.height || width > img.width) throw std::invalid_argument("crop larger than image");
  Image out(height, width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = img.at(c, y, x);
  return out;
}

}  // namespace udic
