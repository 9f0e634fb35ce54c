#pragma once

// Differentiable classifiers treated as black boxes by the explainer.
//
// A classifier maps an [H,W,3] image in [0,1] to N pre-softmax logits and
// can pull a logit cotangent back to the input pixels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "undesirable/ops.hpp"
#include "undesirable/rng.hpp"
#include "undesirable/tensor.hpp"

namespace undesirable {

/// Logits (pre-softmax) and softmax probabilities for one image.
struct ClassifierEval {
  std::vector<double> logits;
  std::vector<double> probs;

  static ClassifierEval from_logits(std::vector<double> logits) {
    auto probs = ops::softmax(logits);
    return {std::move(logits), std::move(probs)};
  }

  std::size_t num_classes() const { return logits.size(); }

  std::size_t top1() const {
    return static_cast<std::size_t>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
  }

  bool operator==(const ClassifierEval&) const = default;
};

class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual std::uint32_t architecture_id() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual Shape input_shape() const = 0;
  /// Flat parameter buffer in serialization order.
  virtual std::vector<double> parameters() const = 0;

  std::vector<double> logits(const Tensor& image) const {
    check_input(image);
    return compute_logits(image);
  }

  ClassifierEval evaluate(const Tensor& image) const {
    return ClassifierEval::from_logits(logits(image));
  }

  /// Gradient of <logits(image), cotangent> with respect to the pixels.
  Tensor input_gradient(const Tensor& image,
                        std::span<const double> cotangent) const {
    check_input(image);
    if (cotangent.size() != num_classes()) {
      throw ShapeError("input_gradient: cotangent has " +
                       std::to_string(cotangent.size()) + " entries, model has " +
                       std::to_string(num_classes()) + " classes");
    }
    return compute_input_gradient(image, cotangent);
  }

 protected:
  virtual std::vector<double> compute_logits(const Tensor& image) const = 0;
  virtual Tensor compute_input_gradient(
      const Tensor& image, std::span<const double> cotangent) const = 0;

 private:
  void check_input(const Tensor& image) const {
    if (image.shape() != input_shape()) {
      throw ShapeError("classifier expects input " +
                       shape_string(input_shape()) + ", got " +
                       shape_string(image.shape()));
    }
  }
};

/// logit_i(X) = <W_i, X> + b_i. Transparent enough to serve as a
/// ground-truth oracle for which regions are undesirable for a class.
class ToyLinearModel final : public Classifier {
 public:
  static constexpr std::uint32_t kArchitectureId = 2;

  ToyLinearModel(std::vector<Tensor> class_weights, std::vector<double> bias)
      : weights_(std::move(class_weights)), bias_(std::move(bias)) {
    if (weights_.size() < 2) throw Error("a classifier needs at least 2 classes");
    if (bias_.size() != weights_.size()) {
      throw ShapeError("toy model: bias length does not match class count");
    }
    for (const auto& w : weights_) {
      require_rank(w, 3, "toy model weights");
      require_same_shape(w, weights_.front(), "toy model weights");
      if (w.extent(2) != 3) throw ShapeError("toy model expects 3 channels");
    }
  }

  static std::size_t parameter_count(std::size_t classes, std::size_t height,
                                     std::size_t width) {
    return classes * (height * width * 3 + 1);
  }

  static ToyLinearModel from_parameters(std::size_t classes, std::size_t height,
                                        std::size_t width,
                                        std::span<const double> params) {
    if (params.size() != parameter_count(classes, height, width)) {
      throw Error("toy model: parameter count mismatch");
    }
    const std::size_t per = height * width * 3;
    std::vector<Tensor> w;
    for (std::size_t k = 0; k < classes; ++k) {
      w.emplace_back(Shape{height, width, 3},
                     std::vector<double>(params.begin() + k * per,
                                         params.begin() + (k + 1) * per));
    }
    return ToyLinearModel(std::move(w),
                          std::vector<double>(params.end() - classes, params.end()));
  }

  std::uint32_t architecture_id() const override { return kArchitectureId; }
  std::size_t num_classes() const override { return weights_.size(); }
  Shape input_shape() const override { return weights_.front().shape(); }

  std::vector<double> parameters() const override {
    std::vector<double> out;
    for (const auto& w : weights_) {
      out.insert(out.end(), w.values().begin(), w.values().end());
    }
    out.insert(out.end(), bias_.begin(), bias_.end());
    return out;
  }

  const Tensor& class_weights(std::size_t k) const { return weights_.at(k); }
  const std::vector<double>& bias() const { return bias_; }

 protected:
  std::vector<double> compute_logits(const Tensor& image) const override {
    std::vector<double> y(weights_.size());
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      double acc = 0.0;
      const auto w = weights_[k].values();
      const auto x = image.values();
      for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * x[i];
      y[k] = acc + bias_[k];
    }
    return y;
  }

  Tensor compute_input_gradient(const Tensor& image,
                                std::span<const double> cotangent) const override {
    Tensor g(image.shape());
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      if (cotangent[k] == 0.0) continue;
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += cotangent[k] * weights_[k][i];
      }
    }
    return g;
  }

 private:
  std::vector<Tensor> weights_;
  std::vector<double> bias_;
};

/// conv3x3(3->8) -> relu -> avgpool2 -> conv3x3(8->16) -> relu -> avgpool2
/// -> flatten -> dense(N). Both convolutions replicate borders.
class ReferenceCnn final : public Classifier {
 public:
  static constexpr std::uint32_t kArchitectureId = 1;
  static constexpr std::size_t kConv1Out = 8;
  static constexpr std::size_t kConv2Out = 16;

  struct Activations {
    Tensor input, z1, pool1, z2, flat;
    std::vector<double> logits;
  };

  struct Gradients {
    Tensor conv1_kernels, conv1_bias, conv2_kernels, conv2_bias, dense_weights,
        dense_bias;

    std::vector<double> flatten() const {
      std::vector<double> out;
      for (const Tensor* t : {&conv1_kernels, &conv1_bias, &conv2_kernels,
                              &conv2_bias, &dense_weights, &dense_bias}) {
        out.insert(out.end(), t->values().begin(), t->values().end());
      }
      return out;
    }
  };

  explicit ReferenceCnn(std::size_t classes = 10, std::size_t height = 32,
                        std::size_t width = 32)
      : classes_(classes),
        height_(height),
        width_(width),
        conv1_k_({3, 3, 3, kConv1Out}),
        conv1_b_({kConv1Out}),
        conv2_k_({3, 3, kConv1Out, kConv2Out}),
        conv2_b_({kConv2Out}),
        dense_w_({classes, flat_size(height, width)}),
        dense_b_({classes}) {
    if (classes < 2) throw Error("a classifier needs at least 2 classes");
    if (height % 4 || width % 4) {
      throw ShapeError("reference CNN input extents must be multiples of 4");
    }
  }

  static std::size_t flat_size(std::size_t height, std::size_t width) {
    return (height / 4) * (width / 4) * kConv2Out;
  }

  static std::size_t parameter_count(std::size_t classes, std::size_t height,
                                     std::size_t width) {
    return 3 * 3 * 3 * kConv1Out + kConv1Out + 3 * 3 * kConv1Out * kConv2Out +
           kConv2Out + classes * (flat_size(height, width) + 1);
  }

  /// He-normal kernels, zero biases; deterministic in `seed`.
  static ReferenceCnn initialized(std::size_t classes, std::size_t height,
                                  std::size_t width, std::uint64_t seed) {
    ReferenceCnn net(classes, height, width);
    CounterRng rng(seed, /*stream=*/0xC0);
    auto fill = [&rng](Tensor& t, double stddev) {
      for (double& v : t.values()) v = stddev * rng.normal();
    };
    fill(net.conv1_k_, std::sqrt(2.0 / 27.0));
    fill(net.conv2_k_, std::sqrt(2.0 / (9.0 * kConv1Out)));
    fill(net.dense_w_, std::sqrt(1.0 / static_cast<double>(
                                           flat_size(height, width))));
    return net;
  }

  static ReferenceCnn from_parameters(std::size_t classes, std::size_t height,
                                      std::size_t width,
                                      std::span<const double> params) {
    ReferenceCnn net(classes, height, width);
    net.set_parameters(params);
    return net;
  }

  std::uint32_t architecture_id() const override { return kArchitectureId; }
  std::size_t num_classes() const override { return classes_; }
  Shape input_shape() const override { return {height_, width_, 3}; }

  std::vector<double> parameters() const override {
    std::vector<double> out;
    out.reserve(parameter_count(classes_, height_, width_));
    for (const Tensor* t :
         {&conv1_k_, &conv1_b_, &conv2_k_, &conv2_b_, &dense_w_, &dense_b_}) {
      out.insert(out.end(), t->values().begin(), t->values().end());
    }
    return out;
  }

  void set_parameters(std::span<const double> params) {
    if (params.size() != parameter_count(classes_, height_, width_)) {
      throw Error("reference CNN: expected " +
                  std::to_string(parameter_count(classes_, height_, width_)) +
                  " parameters, got " + std::to_string(params.size()));
    }
    std::size_t offset = 0;
    for (Tensor* t :
         {&conv1_k_, &conv1_b_, &conv2_k_, &conv2_b_, &dense_w_, &dense_b_}) {
      std::copy_n(params.begin() + offset, t->size(), t->values().begin());
      offset += t->size();
    }
  }

  Activations forward(const Tensor& image) const {
    Activations a;
    a.input = image;
    a.z1 = ops::bias_add(ops::conv2d(image, conv1_k_, ops::Padding::SameReplicate),
                         conv1_b_);
    a.pool1 = ops::avgpool2(ops::relu(a.z1));
    a.z2 = ops::bias_add(
        ops::conv2d(a.pool1, conv2_k_, ops::Padding::SameReplicate), conv2_b_);
    const Tensor pool2 = ops::avgpool2(ops::relu(a.z2));
    a.flat = pool2.reshaped({pool2.size()});
    a.logits = ops::dense(a.flat, dense_w_, dense_b_).storage();
    return a;
  }

  /// Parameter gradient of <logits, cotangent> at the recorded activations.
  Gradients parameter_gradient(const Activations& a,
                               std::span<const double> cotangent) const {
    Gradients g;
    const Tensor c(Shape{classes_},
                   std::vector<double>(cotangent.begin(), cotangent.end()));
    auto dense_grads = ops::dense_vjp(a.flat, dense_w_, c);
    g.dense_weights = std::move(dense_grads.weights);
    g.dense_bias = std::move(dense_grads.bias);

    const Tensor dz2 = back_to_z2(a, dense_grads.input);
    g.conv2_kernels = ops::conv2d_vjp_kernels(a.pool1, conv2_k_,
                                              ops::Padding::SameReplicate, dz2);
    g.conv2_bias = ops::bias_add_vjp(a.z2, conv2_b_, dz2).bias;

    const Tensor dz1 = back_to_z1(a, dz2);
    g.conv1_kernels = ops::conv2d_vjp_kernels(a.input, conv1_k_,
                                              ops::Padding::SameReplicate, dz1);
    g.conv1_bias = ops::bias_add_vjp(a.z1, conv1_b_, dz1).bias;
    return g;
  }

 protected:
  std::vector<double> compute_logits(const Tensor& image) const override {
    return forward(image).logits;
  }

  Tensor compute_input_gradient(const Tensor& image,
                                std::span<const double> cotangent) const override {
    const Activations a = forward(image);
    const Tensor c(Shape{classes_},
                   std::vector<double>(cotangent.begin(), cotangent.end()));
    const Tensor dz2 = back_to_z2(a, ops::dense_vjp_input(a.flat, dense_w_, c));
    const Tensor dz1 = back_to_z1(a, dz2);
    return ops::conv2d_vjp_input(a.input, conv1_k_, ops::Padding::SameReplicate,
                                 dz1);
  }

 private:
  Tensor back_to_z2(const Activations& a, const Tensor& dflat) const {
    const Shape pool2_shape{height_ / 4, width_ / 4, kConv2Out};
    const Tensor da2 = ops::avgpool2_vjp(a.z2.shape(), dflat.reshaped(pool2_shape));
    return ops::relu_vjp(a.z2, da2);
  }

  Tensor back_to_z1(const Activations& a, const Tensor& dz2) const {
    const Tensor dpool1 = ops::conv2d_vjp_input(a.pool1, conv2_k_,
                                                ops::Padding::SameReplicate, dz2);
    return ops::relu_vjp(a.z1, ops::avgpool2_vjp(a.z1.shape(), dpool1));
  }

  std::size_t classes_, height_, width_;
  Tensor conv1_k_, conv1_b_, conv2_k_, conv2_b_, dense_w_, dense_b_;
};

}  // namespace undesirable
