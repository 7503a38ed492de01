#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smokewatch {

/// 8-bit interleaved RGB image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  static constexpr int kChannels = 3;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * kChannels, fill) {}

  bool valid() const noexcept {
    return width > 0 && height > 0 &&
           pixels.size() == static_cast<std::size_t>(width) * height * kChannels;
  }

  std::uint8_t* at(int x, int y) noexcept {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * kChannels;
  }
  const std::uint8_t* at(int x, int y) const noexcept {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * kChannels;
  }

  bool operator==(const Image&) const = default;
};

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes PNG or JPEG (sniffed from magic bytes) into RGB. Grayscale is
/// expanded to r=g=b and alpha is dropped.
Image decode_image(std::span<const std::uint8_t> bytes);
Image decode_image(const std::string& bytes);

std::string encode_png(const Image& img);
std::string encode_jpeg(const Image& img, int quality = 90);

Image read_image_file(const std::string& path);
void write_image_file(const std::string& path, const Image& img);

}  // namespace smokewatch
