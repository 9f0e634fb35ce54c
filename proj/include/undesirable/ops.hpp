#pragma once

// Forward primitives and their vector-Jacobian products.
//
// Every `foo_vjp` returns J^T * cotangent of `foo` evaluated at the recorded
// forward inputs. The mask-gradient of each objective is composed from these
// by hand over a fixed graph, so there is no tape.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include "undesirable/tensor.hpp"

namespace undesirable::ops {

enum class Padding { SameReplicate, Valid };

namespace detail {

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t extent) {
  if (i < 0) return 0;
  if (static_cast<std::size_t>(i) >= extent) return extent - 1;
  return static_cast<std::size_t>(i);
}

struct ConvGeometry {
  std::size_t in_h, in_w, cin, kh, kw, cout, out_h, out_w;
  std::ptrdiff_t pad_h, pad_w;
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels,
                                  Padding padding) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  ConvGeometry g{};
  g.in_h = input.extent(0);
  g.in_w = input.extent(1);
  g.cin = input.extent(2);
  g.kh = kernels.extent(0);
  g.kw = kernels.extent(1);
  g.cout = kernels.extent(3);
  if (kernels.extent(2) != g.cin) {
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) +
                     " channels but kernels expect " +
                     std::to_string(kernels.extent(2)));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd");
  }
  if (padding == Padding::SameReplicate) {
    g.out_h = g.in_h;
    g.out_w = g.in_w;
    g.pad_h = static_cast<std::ptrdiff_t>(g.kh / 2);
    g.pad_w = static_cast<std::ptrdiff_t>(g.kw / 2);
  } else {
    if (g.in_h < g.kh || g.in_w < g.kw) {
      throw ShapeError("conv2d: valid padding needs input >= kernel");
    }
    g.out_h = g.in_h - g.kh + 1;
    g.out_w = g.in_w - g.kw + 1;
    g.pad_h = 0;
    g.pad_w = 0;
  }
  return g;
}

// Source row/column for output position `o` and kernel tap `d`.
inline std::size_t conv_source(std::size_t o, std::size_t d,
                               std::ptrdiff_t pad, std::size_t extent) {
  return clamp_index(static_cast<std::ptrdiff_t>(o + d) - pad, extent);
}

}  // namespace detail

/// Cross-correlation of an [H,W,Cin] input with [Kh,Kw,Cin,Cout] kernels.
/// SameReplicate keeps H and W by replicating border values.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels,
                     Padding padding) {
  const auto g = detail::conv_geometry(input, kernels, padding);
  Tensor out({g.out_h, g.out_w, g.cout});
  const double* in = input.values().data();
  const double* k = kernels.values().data();
  double* o = out.values().data();
  for (std::size_t y = 0; y < g.out_h; ++y) {
    for (std::size_t x = 0; x < g.out_w; ++x) {
      double* orow = o + (y * g.out_w + x) * g.cout;
      for (std::size_t dy = 0; dy < g.kh; ++dy) {
        const std::size_t sy = detail::conv_source(y, dy, g.pad_h, g.in_h);
        for (std::size_t dx = 0; dx < g.kw; ++dx) {
          const std::size_t sx = detail::conv_source(x, dx, g.pad_w, g.in_w);
          const double* ipix = in + (sy * g.in_w + sx) * g.cin;
          const double* ktap = k + (dy * g.kw + dx) * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double v = ipix[ci];
            const double* kk = ktap + ci * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) orow[co] += v * kk[co];
          }
        }
      }
    }
  }
  return out;
}

inline Tensor conv2d_vjp_input(const Tensor& input, const Tensor& kernels,
                               Padding padding, const Tensor& cotangent) {
  const auto g = detail::conv_geometry(input, kernels, padding);
  if (cotangent.shape() != Shape{g.out_h, g.out_w, g.cout}) {
    throw ShapeError("conv2d_vjp: cotangent shape " +
                     shape_string(cotangent.shape()));
  }
  Tensor din(input.shape());
  const double* k = kernels.values().data();
  const double* c = cotangent.values().data();
  double* d = din.values().data();
  for (std::size_t y = 0; y < g.out_h; ++y) {
    for (std::size_t x = 0; x < g.out_w; ++x) {
      const double* crow = c + (y * g.out_w + x) * g.cout;
      for (std::size_t dy = 0; dy < g.kh; ++dy) {
        const std::size_t sy = detail::conv_source(y, dy, g.pad_h, g.in_h);
        for (std::size_t dx = 0; dx < g.kw; ++dx) {
          const std::size_t sx = detail::conv_source(x, dx, g.pad_w, g.in_w);
          double* dpix = d + (sy * g.in_w + sx) * g.cin;
          const double* ktap = k + (dy * g.kw + dx) * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double* kk = ktap + ci * g.cout;
            double acc = 0.0;
            for (std::size_t co = 0; co < g.cout; ++co) acc += kk[co] * crow[co];
            dpix[ci] += acc;
          }
        }
      }
    }
  }
  return din;
}

inline Tensor conv2d_vjp_kernels(const Tensor& input, const Tensor& kernels,
                                 Padding padding, const Tensor& cotangent) {
  const auto g = detail::conv_geometry(input, kernels, padding);
  if (cotangent.shape() != Shape{g.out_h, g.out_w, g.cout}) {
    throw ShapeError("conv2d_vjp: cotangent shape " +
                     shape_string(cotangent.shape()));
  }
  Tensor dk(kernels.shape());
  const double* in = input.values().data();
  const double* c = cotangent.values().data();
  double* d = dk.values().data();
  for (std::size_t y = 0; y < g.out_h; ++y) {
    for (std::size_t x = 0; x < g.out_w; ++x) {
      const double* crow = c + (y * g.out_w + x) * g.cout;
      for (std::size_t dy = 0; dy < g.kh; ++dy) {
        const std::size_t sy = detail::conv_source(y, dy, g.pad_h, g.in_h);
        for (std::size_t dx = 0; dx < g.kw; ++dx) {
          const std::size_t sx = detail::conv_source(x, dx, g.pad_w, g.in_w);
          const double* ipix = in + (sy * g.in_w + sx) * g.cin;
          double* dtap = d + (dy * g.kw + dx) * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double v = ipix[ci];
            double* dd = dtap + ci * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) dd[co] += v * crow[co];
          }
        }
      }
    }
  }
  return dk;
}

struct Conv2dGrads {
  Tensor input;
  Tensor kernels;
};

inline Conv2dGrads conv2d_vjp(const Tensor& input, const Tensor& kernels,
                              Padding padding, const Tensor& cotangent) {
  return {conv2d_vjp_input(input, kernels, padding, cotangent),
          conv2d_vjp_kernels(input, kernels, padding, cotangent)};
}

/// Adds a per-channel bias along the last axis.
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "bias_add bias");
  const std::size_t c = bias.size();
  if (x.rank() == 0 || x.shape().back() != c) {
    throw ShapeError("bias_add: last axis of " + shape_string(x.shape()) +
                     " does not match bias length " + std::to_string(c));
  }
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % c];
  return out;
}

struct BiasAddGrads {
  Tensor input;
  Tensor bias;
};

inline BiasAddGrads bias_add_vjp(const Tensor& x, const Tensor& bias,
                                 const Tensor& cotangent) {
  require_same_shape(x, cotangent, "bias_add_vjp");
  const std::size_t c = bias.size();
  Tensor db(bias.shape());
  for (std::size_t i = 0; i < cotangent.size(); ++i) db[i % c] += cotangent[i];
  return {cotangent, std::move(db)};
}

/// y = W x + b with W stored [out, in].
inline Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  require_rank(weights, 2, "dense weights");
  const std::size_t n_out = weights.extent(0);
  const std::size_t n_in = weights.extent(1);
  if (x.size() != n_in) {
    throw ShapeError("dense: input length " + std::to_string(x.size()) +
                     " does not match weights " +
                     shape_string(weights.shape()));
  }
  if (bias.size() != n_out) throw ShapeError("dense: bias length mismatch");
  Tensor y({n_out});
  const double* w = weights.values().data();
  const double* xv = x.values().data();
  for (std::size_t o = 0; o < n_out; ++o) {
    double acc = bias[o];
    const double* row = w + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * xv[i];
    y[o] = acc;
  }
  return y;
}

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline Tensor dense_vjp_input(const Tensor& x, const Tensor& weights,
                              const Tensor& cotangent) {
  const std::size_t n_out = weights.extent(0);
  const std::size_t n_in = weights.extent(1);
  if (cotangent.size() != n_out) throw ShapeError("dense_vjp: cotangent length");
  Tensor dx(x.shape());
  const double* w = weights.values().data();
  for (std::size_t o = 0; o < n_out; ++o) {
    const double c = cotangent[o];
    const double* row = w + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) dx[i] += row[i] * c;
  }
  return dx;
}

inline DenseGrads dense_vjp(const Tensor& x, const Tensor& weights,
                            const Tensor& cotangent) {
  const std::size_t n_out = weights.extent(0);
  const std::size_t n_in = weights.extent(1);
  Tensor dw(weights.shape());
  for (std::size_t o = 0; o < n_out; ++o) {
    for (std::size_t i = 0; i < n_in; ++i) dw(o, i) = cotangent[o] * x[i];
  }
  return {dense_vjp_input(x, weights, cotangent), std::move(dw),
          Tensor({n_out}, cotangent.storage())};
}

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

// Gradient at exactly 0 is 0.
inline Tensor relu_vjp(const Tensor& x, const Tensor& cotangent) {
  require_same_shape(x, cotangent, "relu_vjp");
  Tensor d(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    d[i] = x[i] > 0.0 ? cotangent[i] : 0.0;
  }
  return d;
}

/// 2x2 average pooling with stride 2 over an [H,W,C] tensor; H and W even.
inline Tensor avgpool2(const Tensor& x) {
  require_rank(x, 3, "avgpool2");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  if (h % 2 || w % 2) throw ShapeError("avgpool2: extents must be even");
  Tensor y({h / 2, w / 2, c});
  for (std::size_t i = 0; i < h / 2; ++i) {
    for (std::size_t j = 0; j < w / 2; ++j) {
      for (std::size_t k = 0; k < c; ++k) {
        y(i, j, k) = 0.25 * (x(2 * i, 2 * j, k) + x(2 * i + 1, 2 * j, k) +
                             x(2 * i, 2 * j + 1, k) + x(2 * i + 1, 2 * j + 1, k));
      }
    }
  }
  return y;
}

inline Tensor avgpool2_vjp(const Shape& input_shape, const Tensor& cotangent) {
  if (input_shape.size() != 3 ||
      cotangent.shape() !=
          Shape{input_shape[0] / 2, input_shape[1] / 2, input_shape[2]}) {
    throw ShapeError("avgpool2_vjp: cotangent shape " +
                     shape_string(cotangent.shape()));
  }
  Tensor d(input_shape);
  for (std::size_t i = 0; i < input_shape[0]; ++i) {
    for (std::size_t j = 0; j < input_shape[1]; ++j) {
      for (std::size_t k = 0; k < input_shape[2]; ++k) {
        d(i, j, k) = 0.25 * cotangent(i / 2, j / 2, k);
      }
    }
  }
  return d;
}

/// Numerically stable softmax over a flat vector (max logit subtracted).
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax: empty input");
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

inline Tensor softmax(const Tensor& logits) {
  return Tensor(logits.shape(), softmax(logits.values()));
}

// Takes the forward output (probabilities), not the logits.
inline std::vector<double> softmax_vjp(std::span<const double> probs,
                                       std::span<const double> cotangent) {
  if (probs.size() != cotangent.size()) {
    throw ShapeError("softmax_vjp: cotangent length mismatch");
  }
  // p_i * sum_j p_j (c_i - c_j) rather than p_i (c_i - <p, c>): a constant
  // cotangent then gives exact zeros even though sum p is not exactly 1.
  std::vector<double> d(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < probs.size(); ++j) s += probs[j] * (cotangent[i] - cotangent[j]);
    d[i] = probs[i] * s;
  }
  return d;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

inline std::pair<Tensor, Tensor> mul_vjp(const Tensor& a, const Tensor& b,
                                         const Tensor& cotangent) {
  require_same_shape(a, cotangent, "mul_vjp");
  return {mul(b, cotangent), mul(a, cotangent)};
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

inline std::pair<Tensor, Tensor> add_vjp(const Tensor& cotangent) {
  return {cotangent, cotangent};
}

inline Tensor scale(double alpha, const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v *= alpha;
  return y;
}

struct ScaleGrads {
  double alpha;
  Tensor input;
};

inline ScaleGrads scale_vjp(double alpha, const Tensor& x,
                            const Tensor& cotangent) {
  require_same_shape(x, cotangent, "scale_vjp");
  double da = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) da += x[i] * cotangent[i];
  return {da, scale(alpha, cotangent)};
}

inline double sum(const Tensor& x) { return x.sum(); }

inline Tensor sum_vjp(const Shape& shape, double cotangent) {
  return Tensor(shape, cotangent);
}

/// Euclidean norm of all entries; for a single entry this is |x|.
inline double l2_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return std::sqrt(s);
}

// Subgradient 0 at the origin.
inline Tensor l2_norm_vjp(const Tensor& x, double cotangent) {
  const double n = l2_norm(x);
  Tensor d(x.shape());
  if (n == 0.0) return d;
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = cotangent * x[i] / n;
  return d;
}

}  // namespace undesirable::ops
