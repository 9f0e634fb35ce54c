#pragma once

// Image perturbation: Gaussian blur, bilinear mask upsampling and the
// masking operator Q(X; M') = X * M' + blur(X) * (1 - M').
//
// Images are [H,W,C] tensors (rank-2 [H,W] is accepted as one channel by
// the blur). Masks are [h,w] grids in [0,1].

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "undesirable/tensor.hpp"

namespace undesirable {

struct BlurConfig {
  double sigma = 2.0;
  std::size_t kernel_size = 5;

  /// Desk-scale default for 32x32 inputs.
  static BlurConfig desk_scale() { return {2.0, 5}; }
  /// Default at 224x224.
  static BlurConfig full_scale() { return {5.0, 11}; }

  void validate() const {
    if (kernel_size == 0 || kernel_size % 2 == 0) {
      throw Error("blur kernel size must be odd and positive, got " +
                  std::to_string(kernel_size));
    }
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw Error("blur sigma must be positive and finite");
    }
  }

  bool operator==(const BlurConfig&) const = default;
};

/// Low-resolution perturbation mask with every entry in [0,1].
class Mask {
 public:
  explicit Mask(Tensor grid) : grid_(std::move(grid)) {
    require_rank(grid_, 2, "mask");
    for (double v : grid_.values()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw Error("mask entries must lie in [0,1]");
      }
    }
  }

  static Mask constant(std::size_t rows, std::size_t cols, double value) {
    return Mask(Tensor({rows, cols}, value));
  }

  const Tensor& grid() const noexcept { return grid_; }
  std::size_t rows() const { return grid_.extent(0); }
  std::size_t cols() const { return grid_.extent(1); }

  bool operator==(const Mask&) const = default;

 private:
  Tensor grid_;
};

/// Normalized 1-D Gaussian taps, centred at kernel_size / 2.
inline std::vector<double> gaussian_kernel_1d(const BlurConfig& cfg) {
  cfg.validate();
  const auto radius = static_cast<double>(cfg.kernel_size / 2);
  std::vector<double> taps(cfg.kernel_size);
  double total = 0.0;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const double d = static_cast<double>(i) - radius;
    taps[i] = std::exp(-d * d / (2.0 * cfg.sigma * cfg.sigma));
    total += taps[i];
  }
  for (double& t : taps) t /= total;
  return taps;
}

namespace detail {

struct Planar {
  std::size_t h, w, c;
};

inline Planar planar_dims(const Tensor& t, const char* what) {
  if (t.rank() == 2) return {t.extent(0), t.extent(1), 1};
  if (t.rank() == 3) return {t.extent(0), t.extent(1), t.extent(2)};
  throw ShapeError(std::string(what) + ": expected [H,W] or [H,W,C], got " +
                   shape_string(t.shape()));
}

inline std::size_t clamp_offset(std::size_t pos, std::size_t tap,
                                std::size_t radius, std::size_t extent) {
  const auto s = static_cast<std::ptrdiff_t>(pos + tap) -
                 static_cast<std::ptrdiff_t>(radius);
  if (s < 0) return 0;
  if (static_cast<std::size_t>(s) >= extent) return extent - 1;
  return static_cast<std::size_t>(s);
}

// One separable pass with replicate borders. `transpose` applies the adjoint
// (scatter) instead of the forward gather.
inline Tensor blur_pass(const Tensor& in, const std::vector<double>& taps,
                        bool vertical, bool transpose) {
  const Planar d = planar_dims(in, "blur");
  const std::size_t radius = taps.size() / 2;
  Tensor out(in.shape());
  const double* src = in.values().data();
  double* dst = out.values().data();
  for (std::size_t y = 0; y < d.h; ++y) {
    for (std::size_t x = 0; x < d.w; ++x) {
      for (std::size_t t = 0; t < taps.size(); ++t) {
        const std::size_t sy = vertical ? clamp_offset(y, t, radius, d.h) : y;
        const std::size_t sx = vertical ? x : clamp_offset(x, t, radius, d.w);
        const std::size_t here = (y * d.w + x) * d.c;
        const std::size_t there = (sy * d.w + sx) * d.c;
        for (std::size_t c = 0; c < d.c; ++c) {
          if (transpose) {
            dst[there + c] += taps[t] * src[here + c];
          } else {
            dst[here + c] += taps[t] * src[there + c];
          }
        }
      }
    }
  }
  return out;
}

}  // namespace detail

/// Separable Gaussian blur per channel with replicate borders.
inline Tensor gaussian_blur(const Tensor& image, const BlurConfig& cfg) {
  const auto taps = gaussian_kernel_1d(cfg);
  return detail::blur_pass(detail::blur_pass(image, taps, false, false), taps,
                           true, false);
}

inline Tensor gaussian_blur_vjp(const Tensor& cotangent, const BlurConfig& cfg) {
  const auto taps = gaussian_kernel_1d(cfg);
  return detail::blur_pass(detail::blur_pass(cotangent, taps, true, true), taps,
                           false, true);
}

namespace detail {

struct Sample1d {
  std::size_t lo, hi;
  double frac;  // weight of `hi`
};

// Half-pixel-centre source position for target index t, clamped.
inline Sample1d bilinear_sample(std::size_t t, std::size_t src,
                                std::size_t dst) {
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  double s = (static_cast<double>(t) + 0.5) * scale - 0.5;
  const double top = static_cast<double>(src - 1);
  if (s < 0.0) s = 0.0;
  if (s > top) s = top;
  const auto lo = static_cast<std::size_t>(std::floor(s));
  const std::size_t hi = lo + 1 < src ? lo + 1 : lo;
  return {lo, hi, s - static_cast<double>(lo)};
}

inline void check_upsample(const Tensor& grid, std::size_t height,
                           std::size_t width) {
  require_rank(grid, 2, "bilinear_upsample");
  if (height == 0 || width == 0) {
    throw ShapeError("bilinear_upsample: zero target extent");
  }
  if (height < grid.extent(0) || width < grid.extent(1)) {
    throw ShapeError("bilinear_upsample: target smaller than mask");
  }
}

}  // namespace detail

inline Tensor bilinear_upsample(const Tensor& grid, std::size_t height,
                                std::size_t width) {
  detail::check_upsample(grid, height, width);
  const std::size_t gh = grid.extent(0), gw = grid.extent(1);
  Tensor out({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const auto sy = detail::bilinear_sample(y, gh, height);
    for (std::size_t x = 0; x < width; ++x) {
      const auto sx = detail::bilinear_sample(x, gw, width);
      const double top = grid(sy.lo, sx.lo) * (1.0 - sx.frac) +
                         grid(sy.lo, sx.hi) * sx.frac;
      const double bottom = grid(sy.hi, sx.lo) * (1.0 - sx.frac) +
                            grid(sy.hi, sx.hi) * sx.frac;
      out(y, x) = top * (1.0 - sy.frac) + bottom * sy.frac;
    }
  }
  return out;
}

inline Tensor bilinear_upsample(const Mask& mask, std::size_t height,
                                std::size_t width) {
  return bilinear_upsample(mask.grid(), height, width);
}

inline Tensor bilinear_upsample_vjp(const Shape& grid_shape,
                                    const Tensor& cotangent) {
  if (grid_shape.size() != 2) throw ShapeError("bilinear_upsample_vjp: rank");
  require_rank(cotangent, 2, "bilinear_upsample_vjp cotangent");
  const std::size_t height = cotangent.extent(0), width = cotangent.extent(1);
  const std::size_t gh = grid_shape[0], gw = grid_shape[1];
  detail::check_upsample(Tensor(grid_shape), height, width);
  Tensor d(grid_shape);
  for (std::size_t y = 0; y < height; ++y) {
    const auto sy = detail::bilinear_sample(y, gh, height);
    for (std::size_t x = 0; x < width; ++x) {
      const auto sx = detail::bilinear_sample(x, gw, width);
      const double c = cotangent(y, x);
      d(sy.lo, sx.lo) += c * (1.0 - sy.frac) * (1.0 - sx.frac);
      d(sy.lo, sx.hi) += c * (1.0 - sy.frac) * sx.frac;
      d(sy.hi, sx.lo) += c * sy.frac * (1.0 - sx.frac);
      d(sy.hi, sx.hi) += c * sy.frac * sx.frac;
    }
  }
  return d;
}

namespace detail {

inline void check_apply(const Tensor& image, const Tensor& mask,
                        const Tensor& blurred) {
  require_rank(image, 3, "mask_apply image");
  require_rank(mask, 2, "mask_apply mask");
  require_same_shape(image, blurred, "mask_apply");
  if (mask.extent(0) != image.extent(0) || mask.extent(1) != image.extent(1)) {
    throw ShapeError("mask_apply: mask " + shape_string(mask.shape()) +
                     " does not match image " + shape_string(image.shape()));
  }
}

}  // namespace detail

/// Q = X * M' + blurred * (1 - M'); M' is broadcast across channels.
inline Tensor mask_apply(const Tensor& image, const Tensor& upsampled_mask,
                         const Tensor& blurred) {
  detail::check_apply(image, upsampled_mask, blurred);
  const std::size_t c = image.extent(2);
  Tensor q(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double m = upsampled_mask[i / c];
    q[i] = image[i] * m + blurred[i] * (1.0 - m);
  }
  return q;
}

struct MaskApplyGrads {
  Tensor image;
  Tensor mask;
  Tensor blurred;
};

inline Tensor mask_apply_vjp_mask(const Tensor& image, const Tensor& blurred,
                                  const Tensor& cotangent) {
  require_same_shape(image, cotangent, "mask_apply_vjp");
  const std::size_t c = image.extent(2);
  Tensor dm({image.extent(0), image.extent(1)});
  for (std::size_t i = 0; i < image.size(); ++i) {
    dm[i / c] += cotangent[i] * (image[i] - blurred[i]);
  }
  return dm;
}

inline MaskApplyGrads mask_apply_vjp(const Tensor& image,
                                     const Tensor& upsampled_mask,
                                     const Tensor& blurred,
                                     const Tensor& cotangent) {
  detail::check_apply(image, upsampled_mask, blurred);
  const std::size_t c = image.extent(2);
  Tensor dx(image.shape()), db(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double m = upsampled_mask[i / c];
    dx[i] = cotangent[i] * m;
    db[i] = cotangent[i] * (1.0 - m);
  }
  return {std::move(dx), mask_apply_vjp_mask(image, blurred, cotangent),
          std::move(db)};
}

}  // namespace undesirable
