#pragma once

// Finite-difference checks for every VJP primitive and every loss mode.
//
// Each check reduces to a scalar probe L(x) = <c, p(x)> with a random
// cotangent c, compares the analytic gradient against central differences
// and reports |a - b| / max(|a|, |b|).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "undesirable/models.hpp"
#include "undesirable/objectives.hpp"
#include "undesirable/ops.hpp"
#include "undesirable/perturbation.hpp"
#include "undesirable/rng.hpp"
#include "undesirable/tensor.hpp"

namespace undesirable {

using Flat = std::vector<double>;

/// A scalar function, a point and the analytic gradient at that point.
struct Probe {
  std::function<double(const Flat&)> value;
  Flat point;
  Flat gradient;
};

inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

inline Flat central_difference(const std::function<double(const Flat&)>& f,
                               Flat x, double step) {
  Flat g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + step;
    const double up = f(x);
    x[i] = x0 - step;
    const double down = f(x);
    x[i] = x0;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline double probe_error(const Probe& p, double step = 1e-5) {
  return relative_error(p.gradient, central_difference(p.value, p.point, step));
}

namespace detail {

inline Tensor random_tensor(CounterRng& rng, const Shape& shape, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Flat pack(const std::vector<Tensor>& ts) {
  Flat out;
  for (const auto& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

inline std::vector<Tensor> unpack(const Flat& x, const std::vector<Shape>& shapes) {
  std::vector<Tensor> out;
  std::size_t at = 0;
  for (const auto& s : shapes) {
    const std::size_t n = shape_size(s);
    out.emplace_back(s, Flat(x.begin() + at, x.begin() + at + n));
    at += n;
  }
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

using Forward = std::function<Tensor(const std::vector<Tensor>&)>;
using Backward =
    std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)>;

// Probe <c, f(inputs)> with a random cotangent c.
inline Probe tensor_probe(CounterRng& rng, std::vector<Tensor> inputs,
                          Forward forward, Backward backward) {
  std::vector<Shape> shapes;
  for (const auto& t : inputs) shapes.push_back(t.shape());
  const Tensor out = forward(inputs);
  const Tensor cot = random_tensor(rng, out.shape());
  Probe p;
  p.point = pack(inputs);
  p.gradient = pack(backward(inputs, cot));
  p.value = [forward, shapes, cot](const Flat& x) {
    return dot(cot, forward(unpack(x, shapes)));
  };
  return p;
}

inline Tensor scalar(double v) { return Tensor({1}, v); }

// Entries with |v| >= 0.1, away from the relu kink.
inline Tensor off_kink(CounterRng& rng, const Shape& shape) {
  Tensor t(shape);
  for (double& v : t.values()) {
    v = rng.uniform(0.1, 1.0) * (rng.below(2) ? 1.0 : -1.0);
  }
  return t;
}

// Sign pattern of every relu input in the network.
inline std::vector<bool> relu_pattern(const ReferenceCnn& net, const Tensor& image) {
  const auto a = net.forward(image);
  std::vector<bool> out;
  for (const Tensor* z : {&a.z1, &a.z2}) {
    for (double v : z->values()) out.push_back(v > 0.0);
  }
  return out;
}

struct LossInstance {
  std::shared_ptr<const ReferenceCnn> net;
  Tensor image;
  Tensor mask;
};

// Random CNN, image and 4x4 mask, redrawn until no relu input changes sign
// when any mask entry moves by 1e-4; finite differences across a kink say
// nothing about the gradient.
inline LossInstance smooth_loss_instance(CounterRng& rng) {
  constexpr double kMargin = 1e-4;
  for (;;) {
    auto net = std::make_shared<const ReferenceCnn>(
        ReferenceCnn::initialized(10, 32, 32, rng.next_u64()));
    Tensor image = random_tensor(rng, {32, 32, 3}, 0.0, 1.0);
    Tensor mask = random_tensor(rng, {4, 4}, 0.05, 0.95);
    const Tensor blurred = gaussian_blur(image, BlurConfig::desk_scale());
    auto pattern = [&](const Tensor& m) {
      return relu_pattern(*net, mask_apply(image, bilinear_upsample(m, 32, 32), blurred));
    };
    const auto base = pattern(mask);
    bool smooth = true;
    for (std::size_t i = 0; smooth && i < mask.size(); ++i) {
      for (double d : {-kMargin, kMargin}) {
        Tensor m = mask;
        m[i] += d;
        if (pattern(m) != base) {
          smooth = false;
          break;
        }
      }
    }
    if (smooth) return {std::move(net), std::move(image), std::move(mask)};
  }
}

}  // namespace detail

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 10;
  double step = 1e-5;
  // Negative control: scales the analytic gradient of the named check.
  std::optional<std::string> corrupt;
};

struct GradcheckRow {
  std::string name;
  bool is_loss = false;
  double max_error = 0.0;
  std::size_t trials = 0;
};

using ProbeFactory = std::function<Probe(CounterRng&, std::size_t trial)>;

struct GradcheckEntry {
  std::string name;
  bool is_loss = false;
  ProbeFactory make;
};

/// The registry: every primitive VJP, then the losses w.r.t. a 4x4 mask on
/// a randomly initialised reference CNN.
inline std::vector<GradcheckEntry> gradcheck_registry() {
  using detail::Backward;
  using detail::Forward;
  using detail::random_tensor;
  using detail::scalar;
  using detail::tensor_probe;
  using T = std::vector<Tensor>;
  std::vector<GradcheckEntry> reg;
  auto primitive = [&reg](std::string name, ProbeFactory f) {
    reg.push_back({std::move(name), false, std::move(f)});
  };

  primitive("conv2d", [](CounterRng& rng, std::size_t trial) {
    const auto pad = trial % 2 ? ops::Padding::Valid : ops::Padding::SameReplicate;
    return tensor_probe(
        rng, {random_tensor(rng, {5, 6, 2}), random_tensor(rng, {3, 3, 2, 3})},
        [pad](const T& in) { return ops::conv2d(in[0], in[1], pad); },
        [pad](const T& in, const Tensor& c) {
          auto g = ops::conv2d_vjp(in[0], in[1], pad, c);
          return T{g.input, g.kernels};
        });
  });
  primitive("bias_add", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {3, 4, 3}), random_tensor(rng, {3})},
        [](const T& in) { return ops::bias_add(in[0], in[1]); },
        [](const T& in, const Tensor& c) {
          auto g = ops::bias_add_vjp(in[0], in[1], c);
          return T{g.input, g.bias};
        });
  });
  primitive("dense", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng,
        {random_tensor(rng, {5}), random_tensor(rng, {3, 5}), random_tensor(rng, {3})},
        [](const T& in) { return ops::dense(in[0], in[1], in[2]); },
        [](const T& in, const Tensor& c) {
          auto g = ops::dense_vjp(in[0], in[1], c);
          return T{g.input, g.weights, g.bias};
        });
  });
  primitive("relu", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {detail::off_kink(rng, {4, 5})},
        [](const T& in) { return ops::relu(in[0]); },
        [](const T& in, const Tensor& c) { return T{ops::relu_vjp(in[0], c)}; });
  });
  primitive("avgpool2", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {4, 6, 2})},
        [](const T& in) { return ops::avgpool2(in[0]); },
        [](const T& in, const Tensor& c) {
          return T{ops::avgpool2_vjp(in[0].shape(), c)};
        });
  });
  primitive("softmax", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {6}, -3.0, 3.0)},
        [](const T& in) { return ops::softmax(in[0]); },
        [](const T& in, const Tensor& c) {
          const Tensor p = ops::softmax(in[0]);
          return T{Tensor(p.shape(), ops::softmax_vjp(p.values(), c.values()))};
        });
  });
  primitive("mul", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
        [](const T& in) { return ops::mul(in[0], in[1]); },
        [](const T& in, const Tensor& c) {
          auto [a, b] = ops::mul_vjp(in[0], in[1], c);
          return T{a, b};
        });
  });
  primitive("add", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})},
        [](const T& in) { return ops::add(in[0], in[1]); },
        [](const T&, const Tensor& c) {
          auto [a, b] = ops::add_vjp(c);
          return T{a, b};
        });
  });
  primitive("scale", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {1}), random_tensor(rng, {2, 5})},
        [](const T& in) { return ops::scale(in[0][0], in[1]); },
        [](const T& in, const Tensor& c) {
          auto g = ops::scale_vjp(in[0][0], in[1], c);
          return T{scalar(g.alpha), g.input};
        });
  });
  primitive("sum", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {3, 5})},
        [](const T& in) { return scalar(ops::sum(in[0])); },
        [](const T& in, const Tensor& c) { return T{ops::sum_vjp(in[0].shape(), c[0])}; });
  });
  primitive("l2_norm", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {7})},
        [](const T& in) { return scalar(ops::l2_norm(in[0])); },
        [](const T& in, const Tensor& c) { return T{ops::l2_norm_vjp(in[0], c[0])}; });
  });
  primitive("l1_deviation", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {4, 4}, 0.0, 0.9)},
        [](const T& in) { return scalar(l1_deviation(in[0])); },
        [](const T& in, const Tensor& c) { return T{l1_deviation_vjp(in[0], c[0])}; });
  });
  primitive("tv_norm", [](CounterRng& rng, std::size_t trial) {
    const double beta = trial % 2 ? 3.0 : 2.0;
    return tensor_probe(
        rng, {random_tensor(rng, {4, 5}, 0.0, 1.0)},
        [beta](const T& in) { return scalar(tv_norm(in[0], beta)); },
        [beta](const T& in, const Tensor& c) {
          return T{tv_norm_vjp(in[0], beta, c[0])};
        });
  });
  primitive("bilinear_upsample", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng, {random_tensor(rng, {3, 4}, 0.0, 1.0)},
        [](const T& in) { return bilinear_upsample(in[0], 7, 9); },
        [](const T& in, const Tensor& c) {
          return T{bilinear_upsample_vjp(in[0].shape(), c)};
        });
  });
  primitive("gaussian_blur", [](CounterRng& rng, std::size_t) {
    const BlurConfig cfg{1.3, 5};
    return tensor_probe(
        rng, {random_tensor(rng, {6, 7, 2}, 0.0, 1.0)},
        [cfg](const T& in) { return gaussian_blur(in[0], cfg); },
        [cfg](const T&, const Tensor& c) { return T{gaussian_blur_vjp(c, cfg)}; });
  });
  primitive("mask_apply", [](CounterRng& rng, std::size_t) {
    return tensor_probe(
        rng,
        {random_tensor(rng, {4, 5, 3}, 0.0, 1.0), random_tensor(rng, {4, 5}, 0.0, 1.0),
         random_tensor(rng, {4, 5, 3}, 0.0, 1.0)},
        [](const T& in) { return mask_apply(in[0], in[1], in[2]); },
        [](const T& in, const Tensor& c) {
          auto g = mask_apply_vjp(in[0], in[1], in[2], c);
          return T{g.image, g.mask, g.blurred};
        });
  });

  auto loss_entry = [&reg](std::string name, Mode mode, FtcReading reading) {
    reg.push_back({std::move(name), true, [mode, reading](CounterRng& rng, std::size_t) {
      auto [net, image, mask] = detail::smooth_loss_instance(rng);
      auto ctx = std::make_shared<PerturbationContext>(*net, image,
                                                       BlurConfig::desk_scale());
      const std::size_t target = rng.below(10);
      RegWeights w;
      w.ftc_reading = reading;
      Probe p;
      p.point = Flat(mask.values().begin(), mask.values().end());
      const auto eval = loss(mode, *net, *ctx, mask, target, w);
      p.gradient = Flat(eval.mask_gradient.values().begin(),
                        eval.mask_gradient.values().end());
      p.value = [net, ctx, mode, target, w](const Flat& x) {
        return loss(mode, *net, *ctx, Tensor({4, 4}, x), target, w, false).total;
      };
      return p;
    }});
  };
  loss_entry("loss:plain", Mode::Plain, FtcReading::Literal);
  loss_entry("loss:ftc", Mode::Ftc, FtcReading::Literal);
  loss_entry("loss:ftc-vector", Mode::Ftc, FtcReading::Vector);
  loss_entry("loss:fntc", Mode::Fntc, FtcReading::Literal);
  return reg;
}

/// Runs every registered check; the worst error over the trials is kept.
inline std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opt = {}) {
  if (opt.trials == 0) throw Error("gradcheck needs at least one trial");
  std::vector<GradcheckRow> rows;
  const auto registry = gradcheck_registry();
  if (opt.corrupt &&
      std::none_of(registry.begin(), registry.end(),
                   [&](const GradcheckEntry& e) { return e.name == *opt.corrupt; })) {
    throw Error("gradcheck: unknown check '" + *opt.corrupt + "'");
  }
  for (std::size_t e = 0; e < registry.size(); ++e) {
    const auto& entry = registry[e];
    CounterRng rng(opt.seed, 0x6C00 + e);
    GradcheckRow row{entry.name, entry.is_loss, 0.0, opt.trials};
    for (std::size_t t = 0; t < opt.trials; ++t) {
      Probe p = entry.make(rng, t);
      if (opt.corrupt && *opt.corrupt == entry.name) {
        for (double& g : p.gradient) g *= 1.01;
      }
      row.max_error = std::max(row.max_error, probe_error(p, opt.step));
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace undesirable
