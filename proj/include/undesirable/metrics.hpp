#pragma once

// Evaluation metrics for learned masks.

#include <atomic>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "undesirable/explainer.hpp"
#include "undesirable/models.hpp"
#include "undesirable/tensor.hpp"

namespace undesirable {

/// Relative improvement of a class probability, in percent of the headroom
/// 1 - before. Rounded to 1e-9 percentage points so that decimal inputs
/// give decimal results (phi(0.6, 0.8) is 50, not 50.00000000000002).
inline double phi(double before, double after) {
  if (!(before >= 0.0 && before < 1.0)) {
    throw Error("phi: before-probability must lie in [0,1), got " +
                std::to_string(before));
  }
  if (!(after >= 0.0 && after <= 1.0)) {
    throw Error("phi: after-probability must lie in [0,1]");
  }
  return std::round((after - before) / (1.0 - before) * 1e11) / 1e9;
}

/// Fraction of pixels whose perturbation strength 1 - M' reaches `threshold`.
inline double pixel_ratio(const Tensor& upsampled_mask, double threshold = 0.6) {
  if (upsampled_mask.empty()) throw ShapeError("pixel_ratio: empty mask");
  std::size_t count = 0;
  for (double m : upsampled_mask.values()) count += (1.0 - m) >= threshold;
  return static_cast<double>(count) / static_cast<double>(upsampled_mask.size());
}

/// Pearson correlation of two flattened masks, rounded to 1e-12 so that
/// M against 1 - M gives exactly -1 despite 1 - m rounding.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError("pearson: masks must share a non-empty shape");
  }
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw Error("consistency: a mask is constant (zero variance)");
  }
  return std::clamp(std::round(sab / std::sqrt(saa * sbb) * 1e12) / 1e12, -1.0, 1.0);
}

/// Mean pairwise Pearson correlation over a list of masks.
inline double consistency_score(std::span<const Tensor> masks) {
  if (masks.size() < 2) throw Error("consistency needs at least 2 masks");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    require_same_shape(masks[i], masks[0], "consistency_score");
    for (std::size_t j = i + 1; j < masks.size(); ++j) {
      total += pearson(masks[i].values(), masks[j].values());
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

struct ImageMetrics {
  std::size_t index = 0;
  std::size_t target = 0;
  double before = 0.0;
  double after = 0.0;
  double phi = 0.0;
  double pixel_ratio = 0.0;
  std::optional<std::string> error;
};

struct MetricReport {
  Mode mode = Mode::Ftc;
  std::vector<ImageMetrics> rows;
  std::vector<double> phi_per_image;          // successful rows only
  std::vector<double> pixel_ratio_per_image;  // successful rows only
  double phi_mean = 0.0;
  double pixel_ratio_mean = 0.0;
  std::size_t improved = 0;  // rows with after > before
  std::size_t failures = 0;
  std::optional<double> consistency;
  ExplainConfig config;
};

/// Runs a single explanation and scores it; rows never throw.
inline ImageMetrics score_image(const Classifier& model, const Tensor& image,
                                const ExplainConfig& config, std::size_t index) {
  ImageMetrics row;
  row.index = index;
  try {
    const auto r = explain(model, image, config);
    row.target = r.target;
    row.before = r.before_prob();
    row.after = r.after_prob();
    row.pixel_ratio = pixel_ratio(r.upsampled_mask);
    row.phi = phi(row.before, row.after);
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  return row;
}

/// Explains every image with the given config (top-1 target unless the
/// config pins one) and aggregates. Rows are ordered by image index
/// whatever the thread count, so the report is deterministic.
inline MetricReport evaluate_batch(const Classifier& model,
                                   std::span<const Tensor> images, Mode mode,
                                   ExplainConfig config, std::size_t threads = 1) {
  if (images.empty()) throw Error("evaluate_batch: no images");
  config.mode = mode;
  MetricReport report;
  report.mode = mode;
  report.config = config;
  report.rows.resize(images.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < images.size(); i = next++) {
      report.rows[i] = score_image(model, images[i], config, i);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, images.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& row : report.rows) {
    if (row.error) {
      ++report.failures;
      continue;
    }
    report.phi_per_image.push_back(row.phi);
    report.pixel_ratio_per_image.push_back(row.pixel_ratio);
    report.improved += row.after > row.before;
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  report.phi_mean = mean(report.phi_per_image);
  report.pixel_ratio_mean = mean(report.pixel_ratio_per_image);
  return report;
}

}  // namespace undesirable
