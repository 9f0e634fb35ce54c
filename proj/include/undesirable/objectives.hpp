#pragma once

// Mask objectives and their gradients.
//
// All losses are minimisation problems over a low-resolution mask M:
//
//   Plain: -f_k(Q) + R_M
//   FTC:   -f_k(Q) + R_M + R_ftc
//   FNTC:  sum_{i != k} f_i(Q) + R_M + R_fntc
//
// with Q = X * up(M) + blur(X) * (1 - up(M)), f the softmax probabilities,
// R_M = lambda1 * TV_beta(M) + lambda2 * |1 - M|_1, and R_ftc / R_fntc the
// penalties on how far the perturbation moves the non-target / target
// logits. By default the two R_M norms are divided by the mask cell count
// (RegScaling::PerCell); RegScaling::Sum uses them as plain sums.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "undesirable/models.hpp"
#include "undesirable/ops.hpp"
#include "undesirable/perturbation.hpp"
#include "undesirable/tensor.hpp"

namespace undesirable {

enum class Mode { Plain, Ftc, Fntc };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Plain: return "plain";
    case Mode::Ftc: return "ftc";
    case Mode::Fntc: return "fntc";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(const std::string& s) {
  if (s == "plain") return Mode::Plain;
  if (s == "ftc") return Mode::Ftc;
  if (s == "fntc") return Mode::Fntc;
  return std::nullopt;
}

/// How the non-target penalty reads its norm.
///  Literal: gamma * | mean_{i != k} dlogit_i |
///  Vector:  gamma / (N - 1) * || (dlogit_i)_{i != k} ||_2
enum class FtcReading { Literal, Vector };

/// Whether TV and l1 enter R_M as sums or as per-cell means.
enum class RegScaling { PerCell, Sum };

struct RegWeights {
  double lambda1 = 1.7;  // TV
  double lambda2 = 3.0;  // l1
  double beta = 2.0;     // TV exponent
  double gamma = 0.3;    // FTC / FNTC penalty
  FtcReading ftc_reading = FtcReading::Literal;
  RegScaling scaling = RegScaling::PerCell;

  void validate() const {
    if (!std::isfinite(lambda1) || lambda1 < 0.0 || !std::isfinite(lambda2) ||
        lambda2 < 0.0 || !std::isfinite(gamma) || gamma < 0.0) {
      throw Error("regularizer weights must be finite and non-negative");
    }
    if (!std::isfinite(beta) || beta <= 0.0) {
      throw Error("TV exponent beta must be positive");
    }
  }

  bool operator==(const RegWeights&) const = default;
};

namespace detail {

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// |v|^beta; exact for beta == 2.
inline double abs_pow(double v, double beta) {
  return beta == 2.0 ? v * v : std::pow(std::abs(v), beta);
}

}  // namespace detail

/// sum_{i,j} (|M[i+1,j] - M[i,j]|^b + |M[i,j+1] - M[i,j]|^b)^(1/b);
/// differences that leave the grid count as 0.
inline double tv_norm(const Tensor& mask, double beta) {
  require_rank(mask, 2, "tv_norm");
  const std::size_t h = mask.extent(0), w = mask.extent(1);
  double total = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double down = i + 1 < h ? mask(i + 1, j) - mask(i, j) : 0.0;
      const double right = j + 1 < w ? mask(i, j + 1) - mask(i, j) : 0.0;
      const double s = detail::abs_pow(down, beta) + detail::abs_pow(right, beta);
      if (s == 0.0) continue;
      total += beta == 2.0 ? std::sqrt(s) : std::pow(s, 1.0 / beta);
    }
  }
  return total;
}

inline double tv_norm(const Mask& mask, double beta) {
  return tv_norm(mask.grid(), beta);
}

// Terms with a zero difference contribute a zero subgradient.
inline Tensor tv_norm_vjp(const Tensor& mask, double beta, double cotangent) {
  require_rank(mask, 2, "tv_norm_vjp");
  const std::size_t h = mask.extent(0), w = mask.extent(1);
  Tensor d(mask.shape());
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double down = i + 1 < h ? mask(i + 1, j) - mask(i, j) : 0.0;
      const double right = j + 1 < w ? mask(i, j + 1) - mask(i, j) : 0.0;
      const double s = detail::abs_pow(down, beta) + detail::abs_pow(right, beta);
      if (s == 0.0) continue;
      // d s^(1/b) / d delta = s^(1/b - 1) * |delta|^(b - 1) * sign(delta)
      const double outer = std::pow(s, 1.0 / beta - 1.0);
      auto partial = [&](double delta) {
        if (delta == 0.0) return 0.0;
        return cotangent * outer * std::pow(std::abs(delta), beta - 1.0) *
               detail::sign(delta);
      };
      const double g_down = partial(down);
      const double g_right = partial(right);
      if (i + 1 < h) {
        d(i + 1, j) += g_down;
        d(i, j) -= g_down;
      }
      if (j + 1 < w) {
        d(i, j + 1) += g_right;
        d(i, j) -= g_right;
      }
    }
  }
  return d;
}

/// sum |1 - M_ij|
inline double l1_deviation(const Tensor& mask) {
  double total = 0.0;
  for (double v : mask.values()) total += std::abs(1.0 - v);
  return total;
}

inline double l1_deviation(const Mask& mask) { return l1_deviation(mask.grid()); }

// At M = 1 the derivative from inside [0,1] (where |1 - M| = 1 - M) is used,
// so entries resting on the upper bound keep being pushed against it.
inline Tensor l1_deviation_vjp(const Tensor& mask, double cotangent) {
  Tensor d(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    d[i] = mask[i] <= 1.0 ? -cotangent : cotangent;
  }
  return d;
}

namespace detail {

inline void check_target(std::size_t k, std::size_t n) {
  if (n < 2) throw Error("need at least 2 classes");
  if (k >= n) {
    throw Error("target class " + std::to_string(k) + " out of range [0, " +
                std::to_string(n) + ")");
  }
}

}  // namespace detail

/// Non-target logit penalty and its gradient w.r.t. the perturbed logits.
struct PenaltyEval {
  double value = 0.0;
  std::vector<double> logit_gradient;
};

inline PenaltyEval r_ftc_eval(std::span<const double> before,
                              std::span<const double> after, std::size_t k,
                              double gamma,
                              FtcReading reading = FtcReading::Literal) {
  if (before.size() != after.size()) throw ShapeError("r_ftc: logit lengths differ");
  const std::size_t n = after.size();
  detail::check_target(k, n);
  const double inv = 1.0 / static_cast<double>(n - 1);
  PenaltyEval out{0.0, std::vector<double>(n, 0.0)};
  if (reading == FtcReading::Literal) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i != k) mean += after[i] - before[i];
    }
    mean *= inv;
    out.value = gamma * std::abs(mean);
    for (std::size_t i = 0; i < n; ++i) {
      if (i != k) out.logit_gradient[i] = gamma * inv * detail::sign(mean);
    }
  } else {
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i != k) sq += (after[i] - before[i]) * (after[i] - before[i]);
    }
    const double norm = std::sqrt(sq);
    out.value = gamma * inv * norm;
    if (norm > 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (i != k) out.logit_gradient[i] = gamma * inv * (after[i] - before[i]) / norm;
      }
    }
  }
  return out;
}

inline PenaltyEval r_fntc_eval(std::span<const double> before,
                               std::span<const double> after, std::size_t k,
                               double gamma) {
  if (before.size() != after.size()) throw ShapeError("r_fntc: logit lengths differ");
  detail::check_target(k, after.size());
  PenaltyEval out{0.0, std::vector<double>(after.size(), 0.0)};
  const double delta = after[k] - before[k];
  out.value = gamma * std::abs(delta);
  out.logit_gradient[k] = gamma * detail::sign(delta);
  return out;
}

inline double r_ftc(const Classifier& model, const Tensor& image,
                    const Tensor& perturbed, std::size_t k, double gamma,
                    FtcReading reading = FtcReading::Literal) {
  return r_ftc_eval(model.logits(image), model.logits(perturbed), k, gamma,
                    reading)
      .value;
}

inline double r_fntc(const Classifier& model, const Tensor& image,
                     const Tensor& perturbed, std::size_t k, double gamma) {
  return r_fntc_eval(model.logits(image), model.logits(perturbed), k, gamma)
      .value;
}

/// Image, its blurred copy and the clean evaluation: everything about X that
/// stays fixed while the mask is optimised.
class PerturbationContext {
 public:
  PerturbationContext(const Classifier& model, Tensor image,
                      const BlurConfig& blur)
      : image_(std::move(image)),
        blurred_(gaussian_blur(image_, blur)),
        before_(model.evaluate(image_)) {}

  const Tensor& image() const noexcept { return image_; }
  const Tensor& blurred() const noexcept { return blurred_; }
  const ClassifierEval& before() const noexcept { return before_; }
  std::size_t height() const { return image_.extent(0); }
  std::size_t width() const { return image_.extent(1); }

  Tensor upsample(const Tensor& mask) const {
    return bilinear_upsample(mask, height(), width());
  }

  Tensor perturb(const Tensor& mask) const {
    return mask_apply(image_, upsample(mask), blurred_);
  }

 private:
  Tensor image_;
  Tensor blurred_;
  ClassifierEval before_;
};

/// Contributions as they enter the minimised total.
struct ObjectiveTerms {
  double class_term = 0.0;
  double tv = 0.0;     // lambda1 * TV
  double l1 = 0.0;     // lambda2 * |1 - M|_1
  double extra = 0.0;  // R_ftc or R_fntc; 0 in plain mode
};

struct ObjectiveEval {
  double total = 0.0;
  ObjectiveTerms terms;
  Tensor mask_gradient;  // empty when not requested
  ClassifierEval perturbed;
};

inline ObjectiveEval loss(Mode mode, const Classifier& model,
                          const PerturbationContext& ctx, const Tensor& mask,
                          std::size_t target, const RegWeights& weights,
                          bool with_gradient = true) {
  require_rank(mask, 2, "loss mask");
  detail::check_target(target, model.num_classes());

  const Tensor up = ctx.upsample(mask);
  const Tensor q = mask_apply(ctx.image(), up, ctx.blurred());
  ObjectiveEval out;
  out.perturbed = model.evaluate(q);
  const auto& p = out.perturbed.probs;
  const std::size_t n = p.size();

  // Cotangent of the total w.r.t. the perturbed logits.
  std::vector<double> class_cot(n, 0.0);
  if (mode == Mode::Fntc) {
    for (std::size_t i = 0; i < n; ++i) {
      if (i != target) {
        out.terms.class_term += p[i];
        class_cot[i] = 1.0;
      }
    }
  } else {
    out.terms.class_term = -p[target];
    class_cot[target] = -1.0;
  }
  std::vector<double> dlogits = ops::softmax_vjp(p, class_cot);

  if (mode != Mode::Plain) {
    const auto pen =
        mode == Mode::Ftc
            ? r_ftc_eval(ctx.before().logits, out.perturbed.logits, target,
                         weights.gamma, weights.ftc_reading)
            : r_fntc_eval(ctx.before().logits, out.perturbed.logits, target,
                          weights.gamma);
    out.terms.extra = pen.value;
    for (std::size_t i = 0; i < n; ++i) dlogits[i] += pen.logit_gradient[i];
  }

  const double rs = weights.scaling == RegScaling::PerCell
                        ? 1.0 / static_cast<double>(mask.size())
                        : 1.0;
  out.terms.tv = rs * weights.lambda1 * tv_norm(mask, weights.beta);
  out.terms.l1 = rs * weights.lambda2 * l1_deviation(mask);
  out.total = out.terms.class_term + out.terms.tv + out.terms.l1 + out.terms.extra;

  if (with_gradient) {
    const Tensor dq = model.input_gradient(q, dlogits);
    const Tensor dup = mask_apply_vjp_mask(ctx.image(), ctx.blurred(), dq);
    Tensor g = bilinear_upsample_vjp(mask.shape(), dup);
    const Tensor g_tv = tv_norm_vjp(mask, weights.beta, rs * weights.lambda1);
    const Tensor g_l1 = l1_deviation_vjp(mask, rs * weights.lambda2);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += g_tv[i] + g_l1[i];
    out.mask_gradient = std::move(g);
  }
  return out;
}

}  // namespace undesirable
