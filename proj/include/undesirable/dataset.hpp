#pragma once

// Synthetic classification data with a known undesirable region.
//
// Class k is a square checkerboard of colour k and its complement, placed
// (with +-1 px jitter) in the class's own cell of a 4x4 grid over smooth
// grey texture. Every image also carries a smaller "confuser": the pattern
// of another class in that class's cell. The clean variant is the same image
// without the confuser. Blurring turns either pattern into flat grey.

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "undesirable/models.hpp"
#include "undesirable/perturbation.hpp"
#include "undesirable/rng.hpp"
#include "undesirable/tensor.hpp"

namespace undesirable {

struct Box {
  std::size_t row = 0, col = 0, height = 0, width = 0;

  bool contains(std::size_t r, std::size_t c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
  bool operator==(const Box&) const = default;
};

struct LabeledImage {
  Tensor image;
  std::size_t label = 0;
};

struct SyntheticSample {
  Tensor image;  // with confuser
  Tensor clean;  // without confuser
  std::size_t label = 0;
  std::size_t confuser_label = 0;
  Box patch;
  Box confuser;
};

struct SyntheticOptions {
  std::size_t image_size = 32;
  std::size_t patch_size = 7;
  std::size_t confuser_size = 6;
  std::size_t texture_cells = 6;
  double noise_lo = 0.3;
  double noise_hi = 0.7;
  double grain = 0.03;
};

inline constexpr std::size_t kSyntheticClasses = 10;

inline const std::array<std::array<double, 3>, kSyntheticClasses>&
synthetic_colors() {
  static const std::array<std::array<double, 3>, kSyntheticClasses> colors{{
      {1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 1.0, 0.0},
      {1.0, 0.0, 1.0}, {0.0, 1.0, 1.0}, {1.0, 0.5, 0.0}, {0.5, 0.0, 1.0},
      {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0},
  }};
  return colors;
}

// Cell (row, col) of the 4x4 grid owned by each class.
inline const std::array<std::array<std::size_t, 2>, kSyntheticClasses>&
synthetic_cells() {
  static const std::array<std::array<std::size_t, 2>, kSyntheticClasses> cells{{
      {0, 0}, {0, 2}, {1, 1}, {1, 3}, {2, 0},
      {2, 2}, {3, 1}, {3, 3}, {0, 3}, {3, 0},
  }};
  return cells;
}

namespace detail {

// Box of side `size` centred in class k's cell, shifted by (dr, dc).
inline Box class_box(std::size_t k, std::size_t size, int dr, int dc,
                     std::size_t image_size) {
  const std::size_t cell = image_size / 4;
  const auto [cr, cc] = synthetic_cells()[k];
  const auto base = static_cast<int>((cell - size) / 2);
  const int r = static_cast<int>(cr * cell) + base + dr;
  const int c = static_cast<int>(cc * cell) + base + dc;
  const int hi = static_cast<int>(image_size - size);
  return {static_cast<std::size_t>(std::clamp(r, 0, hi)),
          static_cast<std::size_t>(std::clamp(c, 0, hi)), size, size};
}

// Checkerboard of `color` and its complement: fine detail that blurs to grey.
inline void paint(Tensor& image, const Box& box,
                  const std::array<double, 3>& color) {
  for (std::size_t r = box.row; r < box.row + box.height; ++r) {
    for (std::size_t c = box.col; c < box.col + box.width; ++c) {
      const bool odd = (r + c) % 2 == 1;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        image(r, c, ch) = odd ? 1.0 - color[ch] : color[ch];
      }
    }
  }
}

// Low-frequency texture: a coarse random grid bilinearly enlarged, plus a
// little per-pixel grain.
inline Tensor textured_background(CounterRng& rng, const SyntheticOptions& opt) {
  const std::size_t s = opt.image_size;
  Tensor coarse({opt.texture_cells, opt.texture_cells});
  for (double& v : coarse.values()) v = rng.uniform(opt.noise_lo, opt.noise_hi);
  const Tensor smooth = bilinear_upsample(coarse, s, s);
  Tensor img({s, s, 3});
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < s; ++c) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        img(r, c, ch) = smooth(r, c) + rng.uniform(-opt.grain, opt.grain);
      }
    }
  }
  return img;
}

}  // namespace detail

/// One sample; a pure function of (seed, index).
inline SyntheticSample synthetic_sample(std::uint64_t seed, std::size_t index,
                                        const SyntheticOptions& opt = {}) {
  CounterRng rng(seed, index);
  const std::size_t s = opt.image_size;
  SyntheticSample out;
  out.label = index % kSyntheticClasses;
  out.confuser_label =
      (out.label + 1 + rng.below(kSyntheticClasses - 1)) % kSyntheticClasses;

  Tensor img = detail::textured_background(rng, opt);

  auto jitter = [&rng] { return static_cast<int>(rng.below(3)) - 1; };
  const int pr = jitter(), pc = jitter();
  out.patch = detail::class_box(out.label, opt.patch_size, pr, pc, s);
  detail::paint(img, out.patch, synthetic_colors()[out.label]);
  out.clean = img;

  const int cr = jitter(), cc = jitter();
  out.confuser = detail::class_box(out.confuser_label, opt.confuser_size, cr, cc, s);
  detail::paint(img, out.confuser, synthetic_colors()[out.confuser_label]);
  out.image = std::move(img);
  return out;
}

/// Labels cycle through the classes, so counts are balanced within +-1.
inline std::vector<SyntheticSample> generate_synthetic_dataset(
    std::size_t n, std::uint64_t seed, const SyntheticOptions& opt = {}) {
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synthetic_sample(seed, i, opt));
  return out;
}

inline std::vector<LabeledImage> clean_images(
    const std::vector<SyntheticSample>& samples) {
  std::vector<LabeledImage> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.clean, s.label});
  return out;
}

/// The reference suite: the model is trained on the clean variants of
/// 2000 samples drawn with kTrainSeed and evaluated on kEvalSeed samples.
inline constexpr std::uint64_t kTrainSeed = 7;
inline constexpr std::size_t kTrainSamples = 2000;
inline constexpr std::uint64_t kEvalSeed = 1007;

/// Held-out sample used for single-image demos; its 7 px confuser draws a
/// mask strong enough to cross the 0.6 pixel-ratio threshold.
inline SyntheticSample demo_sample() {
  SyntheticOptions opt;
  opt.confuser_size = 7;
  return synthetic_sample(kEvalSeed, 50, opt);
}

/// Nominal (unjittered, noise-free) image of class k.
inline Tensor class_template(std::size_t k, const SyntheticOptions& opt = {}) {
  Tensor t({opt.image_size, opt.image_size, 3},
           0.5 * (opt.noise_lo + opt.noise_hi));
  detail::paint(t, detail::class_box(k, opt.patch_size, 0, 0, opt.image_size),
                synthetic_colors()[k]);
  return t;
}

/// Nearest-template linear classifier: logit_k = -|X - T_k|^2 / 2 + |X|^2 / 2.
inline ToyLinearModel toy_model_from_templates(const SyntheticOptions& opt = {}) {
  std::vector<Tensor> weights;
  std::vector<double> bias;
  for (std::size_t k = 0; k < kSyntheticClasses; ++k) {
    Tensor t = class_template(k, opt);
    double sq = 0.0;
    for (double v : t.values()) sq += v * v;
    weights.push_back(std::move(t));
    bias.push_back(-0.5 * sq);
  }
  return ToyLinearModel(std::move(weights), std::move(bias));
}

}  // namespace undesirable
