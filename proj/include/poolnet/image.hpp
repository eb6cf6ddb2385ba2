#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "poolnet/tensor.hpp"

namespace poolnet::data {

// 8-bit interleaved RGB.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, RGBRGB...

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

// Binary P6 pixmap with maxval 255. Throws DecodeError on truncated or
// malformed input and UnsupportedFormat if the magic is not "P6".
RgbImage decode_ppm(std::span<const std::uint8_t> bytes);

void write_ppm(const std::filesystem::path& path, const RgbImage& image);

struct ImageDecoder {
  std::string name;
  // Lower-case extensions including the dot, used when listing frames.
  std::vector<std::string> extensions;
  // Cheap signature test on the leading bytes.
  std::function<bool(std::span<const std::uint8_t>)> accepts;
  std::function<RgbImage(std::span<const std::uint8_t>)> decode;
};

class DecoderRegistry {
 public:
  // Registry holding only the P6 decoder.
  static DecoderRegistry with_defaults();

  void add(ImageDecoder decoder);

  // First decoder whose signature test accepts the bytes. Throws
  // UnsupportedFormat when none does.
  RgbImage decode(std::span<const std::uint8_t> bytes,
                  const std::string& origin = "") const;
  RgbImage decode_file(const std::filesystem::path& path) const;

  bool handles_extension(const std::filesystem::path& path) const;

 private:
  std::vector<ImageDecoder> decoders_;
};

const DecoderRegistry& default_decoders();

// Bilinear resize to side x side with half-pixel centers and edge clamping;
// values scaled to [0, 1]. Output is channel-major [3, side, side].
std::vector<float> resize_to_unit(const RgbImage& image, std::size_t side);

// Decode, resize and scale one frame into a Tensor[3, side, side].
Tensor ingest_frame(const std::filesystem::path& path, std::size_t side,
                    const DecoderRegistry& decoders = default_decoders());

}  // namespace poolnet::data
