#include "poolnet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "poolnet/error.hpp"

namespace poolnet::data {
namespace fs = std::filesystem;

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  // Next decimal field, skipping whitespace and '#' comments.
  std::size_t number(const char* what) {
    skip_blank();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000) throw DecodeError(std::string("PPM ") + what + " too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw DecodeError(std::string("PPM header: missing ") + what);
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw DecodeError("PPM header: no separator before raster");
    }
    return pos_ + 1;
  }

 private:
  void skip_blank() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};

bool is_p6(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6';
}

std::string lower_extension(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

RgbImage decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2) throw DecodeError("PPM: file too short");
  if (!is_p6(bytes)) throw UnsupportedFormat("not a binary P6 pixmap");
  HeaderReader header(bytes);
  RgbImage image;
  image.width = header.number("width");
  image.height = header.number("height");
  const auto maxval = header.number("maxval");
  if (image.width == 0 || image.height == 0) throw DecodeError("PPM: zero dimension");
  if (maxval != 255) {
    throw DecodeError("PPM: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  }
  const auto offset = header.raster_offset();
  const auto needed = image.width * image.height * 3;
  if (bytes.size() < offset + needed) {
    throw DecodeError("PPM: truncated raster (" + std::to_string(bytes.size() - std::min(offset, bytes.size())) +
                      " of " + std::to_string(needed) + " bytes)");
  }
  image.pixels.assign(bytes.begin() + offset, bytes.begin() + offset + needed);
  return image;
}

void write_ppm(const fs::path& path, const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) {
    throw ContractError("write_ppm: pixel buffer does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

DecoderRegistry DecoderRegistry::with_defaults() {
  DecoderRegistry r;
  r.add({"ppm", {".ppm"}, is_p6, decode_ppm});
  return r;
}

void DecoderRegistry::add(ImageDecoder decoder) { decoders_.push_back(std::move(decoder)); }

RgbImage DecoderRegistry::decode(std::span<const std::uint8_t> bytes,
                                 const std::string& origin) const {
  for (const auto& d : decoders_) {
    if (d.accepts(bytes)) {
      try {
        return d.decode(bytes);
      } catch (const DecodeError& e) {
        throw DecodeError(origin.empty() ? e.what() : origin + ": " + e.what());
      }
    }
  }
  if (bytes.empty()) throw DecodeError(origin + ": empty file");
  throw UnsupportedFormat((origin.empty() ? std::string("image") : origin) +
                          ": no registered decoder accepts this format");
}

RgbImage DecoderRegistry::decode_file(const fs::path& path) const {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode(bytes, path.string());
}

bool DecoderRegistry::handles_extension(const fs::path& path) const {
  const auto ext = lower_extension(path);
  for (const auto& d : decoders_) {
    if (std::find(d.extensions.begin(), d.extensions.end(), ext) != d.extensions.end()) {
      return true;
    }
  }
  return false;
}

const DecoderRegistry& default_decoders() {
  static const DecoderRegistry registry = DecoderRegistry::with_defaults();
  return registry;
}

std::vector<float> resize_to_unit(const RgbImage& image, std::size_t side) {
  if (side == 0) throw ContractError("resize: side must be positive");
  std::vector<float> out(3 * side * side);
  const double sx = double(image.width) / double(side);
  const double sy = double(image.height) / double(side);
  auto sample = [&](double coord, double scale, std::size_t extent,
                    std::size_t& lo, std::size_t& hi, double& frac) {
    double src = (coord + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(extent - 1));
    lo = static_cast<std::size_t>(std::floor(src));
    hi = std::min(lo + 1, extent - 1);
    frac = src - double(lo);
  };
  for (std::size_t y = 0; y < side; ++y) {
    std::size_t y0, y1;
    double fy;
    sample(double(y), sy, image.height, y0, y1, fy);
    for (std::size_t x = 0; x < side; ++x) {
      std::size_t x0, x1;
      double fx;
      sample(double(x), sx, image.width, x0, x1, fx);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - fx) * image.at(x0, y0, c) + fx * image.at(x1, y0, c);
        const double bottom = (1 - fx) * image.at(x0, y1, c) + fx * image.at(x1, y1, c);
        const double v = ((1 - fy) * top + fy * bottom) / 255.0;
        out[(c * side + y) * side + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Tensor ingest_frame(const fs::path& path, std::size_t side,
                    const DecoderRegistry& decoders) {
  const auto image = decoders.decode_file(path);
  return Tensor({3, side, side}, resize_to_unit(image, side));
}

}  // namespace poolnet::data
