#pragma once

// Minibatch Adam training of the reference CNN with softmax cross-entropy.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "undesirable/adam.hpp"
#include "undesirable/dataset.hpp"
#include "undesirable/models.hpp"
#include "undesirable/rng.hpp"

namespace undesirable {

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct TrainOptions {
  std::size_t epochs = 4;
  double lr = 0.005;
  std::size_t batch_size = 16;
  std::uint64_t seed = 7;
  double label_smoothing = 0.1;
};

struct TrainResult {
  ReferenceCnn model;
  double train_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

inline double accuracy(const Classifier& model,
                       std::span<const LabeledImage> data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& d : data) hits += model.evaluate(d.image).top1() == d.label;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Deterministic in (data, options). Zero epochs returns the initial weights.
inline TrainResult train_reference(std::span<const LabeledImage> data,
                                   const TrainOptions& opt,
                                   std::size_t classes = kSyntheticClasses) {
  if (data.empty()) throw TrainingError("training set is empty");
  const Shape shape = data.front().image.shape();
  if (shape.size() != 3 || shape[2] != 3 || shape[0] != shape[1]) {
    throw TrainingError("training images must be square [S,S,3]");
  }
  for (const auto& d : data) {
    if (d.image.shape() != shape) {
      throw TrainingError("training images do not share one shape");
    }
    if (d.label >= classes) throw TrainingError("label out of range");
  }

  ReferenceCnn net =
      ReferenceCnn::initialized(classes, shape[0], shape[1], opt.seed);
  std::vector<double> params = net.parameters();
  AdamState state(params.size());
  const AdamOptions adam{opt.lr};
  CounterRng rng(opt.seed, /*stream=*/0x5E);

  std::vector<std::size_t> order(data.size());
  std::vector<double> epoch_loss;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double total_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      std::vector<double> grad(params.size(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const auto& sample = data[order[b]];
        const auto act = net.forward(sample.image);
        const auto probs = ops::softmax(act.logits);
        // Cross-entropy against the smoothed one-hot target t:
        // loss = -sum t_i log p_i, dloss/dlogits = p - t.
        const double off = opt.label_smoothing / static_cast<double>(classes);
        std::vector<double> dlogits = probs;
        for (std::size_t i = 0; i < classes; ++i) {
          const double t = off + (i == sample.label ? 1.0 - opt.label_smoothing : 0.0);
          total_loss -= t * std::log(std::max(probs[i], 1e-300));
          dlogits[i] -= t;
        }
        const auto g = net.parameter_gradient(act, dlogits).flatten();
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (double& g : grad) g *= inv;
      try {
        adam_step(params, grad, state, adam);
      } catch (const OptimizationError&) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch + 1) +
                            " (non-finite gradient)");
      }
      net.set_parameters(params);
    }
    const double mean_loss = total_loss / static_cast<double>(data.size());
    if (!std::isfinite(mean_loss)) {
      throw TrainingError("training diverged at epoch " +
                          std::to_string(epoch + 1));
    }
    epoch_loss.push_back(mean_loss);
  }
  const double acc = accuracy(net, data);
  return {std::move(net), acc, std::move(epoch_loss)};
}

}  // namespace undesirable
