#pragma once

// UNDW weight files.
//
//   offset  size  field
//   0       4     magic "UNDW"
//   4       4     u32 version (1)
//   8       4     u32 architecture id (1 = reference CNN, 2 = toy linear)
//   12      4     u32 class count
//   16      8     u64 parameter count
//   24      8*P   parameters, little-endian IEEE-754 binary64
//
// All integers are little-endian. Parameter order is the model's
// `parameters()` order. Both architectures take square [S,S,3] inputs; S is
// recovered from the parameter count.

#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "undesirable/models.hpp"

namespace undesirable {

inline constexpr std::uint32_t kWeightFileVersion = 1;
inline constexpr std::size_t kWeightHeaderBytes = 24;

struct WeightFile {
  std::uint32_t architecture = 0;
  std::uint32_t num_classes = 0;
  std::vector<double> parameters;

  bool operator==(const WeightFile&) const = default;
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v,
                   std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

inline std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t at,
                            std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_weights(const WeightFile& file) {
  std::vector<std::uint8_t> out{'U', 'N', 'D', 'W'};
  out.reserve(kWeightHeaderBytes + 8 * file.parameters.size());
  detail::put_le(out, kWeightFileVersion, 4);
  detail::put_le(out, file.architecture, 4);
  detail::put_le(out, file.num_classes, 4);
  detail::put_le(out, file.parameters.size(), 8);
  for (double p : file.parameters) {
    detail::put_le(out, std::bit_cast<std::uint64_t>(p), 8);
  }
  return out;
}

inline WeightFile decode_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kWeightHeaderBytes) {
    throw FormatError("weight file truncated: header needs 24 bytes");
  }
  if (bytes[0] != 'U' || bytes[1] != 'N' || bytes[2] != 'D' || bytes[3] != 'W') {
    throw FormatError("weight file: bad magic");
  }
  const auto version = detail::get_le(bytes, 4, 4);
  if (version != kWeightFileVersion) {
    throw FormatError("weight file: unsupported version " +
                      std::to_string(version));
  }
  WeightFile file;
  file.architecture = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
  file.num_classes = static_cast<std::uint32_t>(detail::get_le(bytes, 12, 4));
  const std::uint64_t count = detail::get_le(bytes, 16, 8);
  if (count > (bytes.size() - kWeightHeaderBytes) / 8 ||
      bytes.size() != kWeightHeaderBytes + 8 * count) {
    throw FormatError("weight file: expected " + std::to_string(count) +
                      " parameters, buffer holds " +
                      std::to_string((bytes.size() - kWeightHeaderBytes) / 8));
  }
  file.parameters.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    file.parameters[i] = std::bit_cast<double>(
        detail::get_le(bytes, kWeightHeaderBytes + 8 * i, 8));
  }
  return file;
}

inline std::vector<std::uint8_t> save_weights(const Classifier& model) {
  return encode_weights({model.architecture_id(),
                         static_cast<std::uint32_t>(model.num_classes()),
                         model.parameters()});
}

namespace detail {

// Largest side S with count(S) == params, where count grows with S.
template <typename CountFn>
std::size_t infer_side(std::size_t params, std::size_t step, CountFn count) {
  for (std::size_t s = step; s <= 4096; s += step) {
    const std::size_t c = count(s);
    if (c == params) return s;
    if (c > params) break;
  }
  throw FormatError("weight file: parameter count " + std::to_string(params) +
                    " does not match the architecture");
}

}  // namespace detail

inline std::unique_ptr<Classifier> model_from_weights(const WeightFile& file) {
  const std::size_t n = file.num_classes;
  if (n < 2) throw FormatError("weight file: class count must be >= 2");
  const std::size_t p = file.parameters.size();
  switch (file.architecture) {
    case ReferenceCnn::kArchitectureId: {
      const auto side = detail::infer_side(p, 4, [n](std::size_t s) {
        return ReferenceCnn::parameter_count(n, s, s);
      });
      return std::make_unique<ReferenceCnn>(
          ReferenceCnn::from_parameters(n, side, side, file.parameters));
    }
    case ToyLinearModel::kArchitectureId: {
      const auto side = detail::infer_side(p, 1, [n](std::size_t s) {
        return ToyLinearModel::parameter_count(n, s, s);
      });
      return std::make_unique<ToyLinearModel>(
          ToyLinearModel::from_parameters(n, side, side, file.parameters));
    }
    default:
      throw FormatError("weight file: unknown architecture id " +
                        std::to_string(file.architecture));
  }
}

inline std::unique_ptr<Classifier> load_weights(
    std::span<const std::uint8_t> bytes) {
  return model_from_weights(decode_weights(bytes));
}

}  // namespace undesirable
