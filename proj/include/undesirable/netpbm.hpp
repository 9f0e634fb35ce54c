#pragma once

// Binary PPM (P6) and PGM (P5) images with maxval <= 255, and UNDM raw masks.
//
// Decoded images are [H,W,3] tensors in [0,1]; a PGM is replicated across
// the three channels. UNDM layout: magic "UNDM", u32 rows, u32 cols, then
// rows*cols little-endian binary64 values.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "undesirable/tensor.hpp"

namespace undesirable {

using Bytes = std::vector<std::uint8_t>;

namespace detail {

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Bytes netpbm_header(const char* magic, std::size_t w, std::size_t h) {
  const std::string head = std::string(magic) + "\n" + std::to_string(w) + " " +
                           std::to_string(h) + "\n255\n";
  return Bytes(head.begin(), head.end());
}

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  // Next whitespace-separated token, skipping '#' comments.
  std::string token() {
    for (;;) {
      while (pos_ < bytes_.size() && std::isspace(bytes_[pos_])) ++pos_;
      if (pos_ < bytes_.size() && bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
        continue;
      }
      break;
    }
    std::string out;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_]) && bytes_[pos_] != '#') {
      out.push_back(static_cast<char>(bytes_[pos_++]));
    }
    if (out.empty()) throw FormatError("netpbm: truncated header");
    return out;
  }

  std::size_t number(const char* what) {
    const std::string t = token();
    if (t.size() > 9 || !std::all_of(t.begin(), t.end(), [](char c) {
          return std::isdigit(static_cast<unsigned char>(c));
        })) {
      throw FormatError(std::string("netpbm: bad ") + what + " '" + t + "'");
    }
    return std::stoul(t);
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw FormatError("netpbm: missing separator before raster");
    }
    return pos_ + 1;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// [H,W,3] image to P6.
inline Bytes encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.extent(2) != 3) {
    throw ShapeError("encode_ppm: expected [H,W,3], got " + shape_string(image.shape()));
  }
  Bytes out = detail::netpbm_header("P6", image.extent(1), image.extent(0));
  for (double v : image.values()) out.push_back(detail::quantize(v));
  return out;
}

/// [H,W] grid to P5.
inline Bytes encode_pgm(const Tensor& gray) {
  require_rank(gray, 2, "encode_pgm");
  Bytes out = detail::netpbm_header("P5", gray.extent(1), gray.extent(0));
  for (double v : gray.values()) out.push_back(detail::quantize(v));
  return out;
}

/// P6 or P5 to an [H,W,3] tensor in [0,1].
inline Tensor decode_netpbm(std::span<const std::uint8_t> bytes) {
  detail::HeaderReader r(bytes);
  const std::string magic = r.token();
  if (magic != "P6" && magic != "P5") {
    throw FormatError("netpbm: unsupported magic '" + magic + "' (need P5 or P6)");
  }
  const std::size_t w = r.number("width");
  const std::size_t h = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (w == 0 || h == 0) throw FormatError("netpbm: zero image extent");
  if (maxval == 0 || maxval > 255) {
    throw FormatError("netpbm: maxval must be in [1,255], got " + std::to_string(maxval));
  }
  const std::size_t start = r.raster_start();
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const std::size_t need = w * h * channels;
  if (bytes.size() - start < need) throw FormatError("netpbm: truncated raster");

  Tensor img({h, w, 3});
  const double inv = 1.0 / static_cast<double>(maxval);
  for (std::size_t p = 0; p < w * h; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t v = bytes[start + p * channels + (channels == 3 ? c : 0)];
      if (v > maxval) throw FormatError("netpbm: sample exceeds maxval");
      img[p * 3 + c] = static_cast<double>(v) * inv;
    }
  }
  return img;
}

inline Bytes encode_mask_f64(const Tensor& mask) {
  require_rank(mask, 2, "encode_mask_f64");
  Bytes out{'U', 'N', 'D', 'M'};
  auto put = [&out](std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(mask.extent(0), 4);
  put(mask.extent(1), 4);
  for (double v : mask.values()) put(std::bit_cast<std::uint64_t>(v), 8);
  return out;
}

inline Tensor decode_mask_f64(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || bytes[0] != 'U' || bytes[1] != 'N' || bytes[2] != 'D' ||
      bytes[3] != 'M') {
    throw FormatError("mask file: bad magic (expected UNDM)");
  }
  auto get = [&bytes](std::size_t at, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{bytes[at + i]} << (8 * i);
    return v;
  };
  const std::size_t rows = get(4, 4), cols = get(8, 4);
  if (rows == 0 || cols == 0) throw FormatError("mask file: zero extent");
  if (bytes.size() != 12 + rows * cols * 8) {
    throw FormatError("mask file: length does not match " + std::to_string(rows) +
                      "x" + std::to_string(cols));
  }
  Tensor m({rows, cols});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::bit_cast<double>(get(12 + 8 * i, 8));
  return m;
}

}  // namespace undesirable
