#pragma once

// Projected-Adam search for the mask that most helps the target class.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "undesirable/adam.hpp"
#include "undesirable/models.hpp"
#include "undesirable/objectives.hpp"
#include "undesirable/perturbation.hpp"
#include "undesirable/rng.hpp"

namespace undesirable {

struct ExplainConfig {
  Mode mode = Mode::Ftc;
  std::optional<std::size_t> target;  // nullopt: top-1 class of the clean image
  RegWeights weights;
  BlurConfig blur = BlurConfig::desk_scale();
  std::size_t mask_rows = 8;
  std::size_t mask_cols = 8;
  double lr = 0.1;
  std::size_t iterations = 200;
  std::uint64_t seed = 0;
  double init_lo = 0.4;
  double init_hi = 0.6;

  /// 32x32 inputs: 8x8 mask, sigma 2, kernel 5.
  static ExplainConfig desk_scale() { return {}; }

  /// 224x224 inputs: 28x28 mask, sigma 5, kernel 11.
  static ExplainConfig full_scale() {
    ExplainConfig c;
    c.blur = BlurConfig::full_scale();
    c.mask_rows = 28;
    c.mask_cols = 28;
    return c;
  }

  void validate() const {
    weights.validate();
    blur.validate();
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
      throw Error("learning rate must be finite and non-negative");
    }
    if (iterations < 1) throw Error("iterations must be >= 1");
    if (!(0.0 <= init_lo && init_lo <= init_hi && init_hi <= 1.0)) {
      throw Error("mask init band must satisfy 0 <= lo <= hi <= 1");
    }
    if (mask_rows == 0 || mask_cols == 0) throw Error("mask extents must be positive");
  }

  bool operator==(const ExplainConfig&) const = default;
};

struct ExplanationResult {
  Tensor mask;            // M*, [mask_rows, mask_cols]
  Tensor initial_mask;
  Tensor upsampled_mask;  // M', [H, W]
  Tensor perturbed;       // Q
  ClassifierEval before;
  ClassifierEval after;
  std::vector<double> trace;  // objective before each step
  std::size_t target = 0;
  std::uint64_t seed = 0;
  ExplainConfig config;

  double before_prob() const { return before.probs[target]; }
  double after_prob() const { return after.probs[target]; }
};

/// Elementwise clamp to [0,1].
inline Tensor project_mask(Tensor mask) {
  for (double& v : mask.values()) v = std::clamp(v, 0.0, 1.0);
  return mask;
}

inline Tensor initial_mask(const ExplainConfig& config) {
  CounterRng rng(config.seed, /*stream=*/0x3A5C);
  Tensor m({config.mask_rows, config.mask_cols});
  for (double& v : m.values()) v = rng.uniform(config.init_lo, config.init_hi);
  return m;
}

inline ExplanationResult explain(const Classifier& model, const Tensor& image,
                                 const ExplainConfig& config) {
  config.validate();
  const PerturbationContext ctx(model, image, config.blur);
  if (config.mask_rows * config.mask_cols >= ctx.height() * ctx.width() ||
      config.mask_rows > ctx.height() || config.mask_cols > ctx.width()) {
    throw Error("mask must be coarser than the image");
  }
  const std::size_t target = config.target.value_or(ctx.before().top1());
  if (target >= model.num_classes()) {
    throw Error("target class " + std::to_string(target) + " out of range");
  }

  ExplanationResult result;
  result.initial_mask = initial_mask(config);
  Tensor mask = result.initial_mask;
  AdamState state(mask.size());
  const AdamOptions adam{config.lr};
  result.trace.reserve(config.iterations);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto eval = loss(config.mode, model, ctx, mask, target, config.weights);
    if (!std::isfinite(eval.total)) {
      throw OptimizationError("non-finite objective", it);
    }
    result.trace.push_back(eval.total);
    if (!eval.mask_gradient.all_finite()) {
      throw OptimizationError("non-finite gradient", it);
    }
    adam_step(mask.values(), eval.mask_gradient.values(), state, adam);
    mask = project_mask(std::move(mask));
  }

  result.upsampled_mask = ctx.upsample(mask);
  result.perturbed = mask_apply(ctx.image(), result.upsampled_mask, ctx.blurred());
  result.mask = std::move(mask);
  result.before = ctx.before();
  result.after = model.evaluate(result.perturbed);
  result.target = target;
  result.seed = config.seed;
  result.config = config;
  result.config.target = target;
  return result;
}

}  // namespace undesirable
