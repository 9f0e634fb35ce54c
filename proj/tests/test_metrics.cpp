#include "reference.hpp"
#include "support.hpp"
#include "toy_oracle.hpp"

using namespace undesirable;

TEST(Phi, Examples) {
  EXPECT_EQ(phi(0.6, 0.8), 50.0);
  EXPECT_EQ(phi(0.3, 0.3), 0.0);
  EXPECT_EQ(phi(0.0, 1.0), 100.0);
  EXPECT_LT(phi(0.5, 0.25), 0.0);
}

TEST(Phi, RelativeToHeadroom) {
  // Same absolute gain counts for more when less headroom is left.
  EXPECT_DOUBLE_EQ(phi(0.9, 0.95), 2.0 * phi(0.8, 0.85));
  EXPECT_DOUBLE_EQ(phi(0.5, 0.75), phi(0.0, 0.5));
  EXPECT_DOUBLE_EQ(phi(0.2, 0.6), 50.0);
}

TEST(Phi, Errors) {
  EXPECT_THROW(phi(1.0, 1.0), Error);
  EXPECT_THROW(phi(-0.1, 0.5), Error);
  EXPECT_THROW(phi(0.5, 1.5), Error);
  EXPECT_THROW(phi(std::nan(""), 0.5), Error);
}

TEST(PixelRatio, Examples) {
  EXPECT_EQ(pixel_ratio(Tensor({5, 5}, 1.0)), 0.0);
  EXPECT_EQ(pixel_ratio(Tensor({4, 4}, 0.0)), 1.0);
  // 1 - M' = 0.6 exactly sits on the threshold
  const Tensor m({1, 4}, std::vector<double>{0.0, 0.25, 0.5, 1.0});
  EXPECT_EQ(pixel_ratio(m), 0.5);
  EXPECT_THROW(pixel_ratio(Tensor()), ShapeError);
}

TEST(PixelRatio, MonotoneInThreshold) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor m = test::random_tensor(seed, {32, 32}, 0, 1);
    double prev = 1.0;
    for (int i = 0; i <= 100; ++i) {
      const double r = pixel_ratio(m, i / 100.0);
      EXPECT_LE(r, prev);
      EXPECT_GE(r, 0.0);
      prev = r;
    }
  }
}

TEST(Consistency, IdenticalAndOpposite) {
  const Tensor m = test::random_tensor(1, {8, 8}, 0, 1);
  Tensor inv = m;
  for (double& v : inv.values()) v = 1.0 - v;
  const std::vector<Tensor> same{m, m, m};
  EXPECT_EQ(consistency_score(same), 1.0);
  const std::vector<Tensor> opposite{m, inv};
  EXPECT_EQ(consistency_score(opposite), -1.0);
}

TEST(Consistency, Errors) {
  const Tensor m = test::random_tensor(2, {8, 8}, 0, 1);
  const std::vector<Tensor> one{m};
  EXPECT_THROW(consistency_score(one), Error);
  const std::vector<Tensor> flat{m, Tensor({8, 8}, 1.0)};
  EXPECT_THROW(consistency_score(flat), Error);
  const std::vector<Tensor> shapes{m, test::random_tensor(3, {4, 4}, 0, 1)};
  EXPECT_THROW(consistency_score(shapes), ShapeError);
}

TEST(Consistency, IndependentMasksNearZero) {
  std::size_t within = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const std::vector<Tensor> masks{test::random_tensor(3 * seed, {8, 8}, 0, 1),
                                    test::random_tensor(3 * seed + 1, {8, 8}, 0, 1),
                                    test::random_tensor(3 * seed + 2, {8, 8}, 0, 1)};
    within += std::abs(consistency_score(masks)) <= 0.3;
  }
  EXPECT_GE(within, 195u);
}

TEST(Consistency, PermutationSymmetric) {
  std::vector<Tensor> masks;
  for (std::uint64_t s = 0; s < 4; ++s) masks.push_back(test::random_tensor(40 + s, {6, 6}, 0, 1));
  const double base = consistency_score(masks);
  std::vector<std::size_t> order{0, 1, 2, 3};
  while (std::next_permutation(order.begin(), order.end())) {
    std::vector<Tensor> p;
    for (std::size_t i : order) p.push_back(masks[i]);
    EXPECT_NEAR(consistency_score(p), base, 1e-14);
  }
}

namespace {

// The dot now helps class 0, so blurring anything only hurts it.
ToyLinearModel dot_lover(const oracle::PlantedToy& toy) {
  Tensor w0 = toy.model.class_weights(0);
  for (double& v : w0.values()) v = -v;
  return ToyLinearModel({w0, toy.model.class_weights(1), toy.model.class_weights(2)},
                        toy.model.bias());
}

}  // namespace

TEST(EvaluateBatch, UntouchedMaskScoresZero) {
  const auto toy = oracle::planted_toy();
  const auto model = dot_lover(toy);
  auto cfg = oracle::planted_config(4);
  const std::vector<Tensor> images{toy.image};
  const auto report = evaluate_batch(model, images, Mode::Ftc, cfg);
  ASSERT_EQ(report.rows.size(), 1u);
  EXPECT_EQ(report.rows[0].phi, 0.0);
  EXPECT_EQ(report.rows[0].pixel_ratio, 0.0);
  EXPECT_EQ(report.improved, 0u);
}

TEST(EvaluateBatch, IdenticalImagesIdenticalRows) {
  const auto toy = oracle::planted_toy();
  const std::vector<Tensor> images(4, toy.image);
  auto cfg = oracle::planted_config(4);
  cfg.target.reset();
  const auto report = evaluate_batch(toy.model, images, Mode::Ftc, cfg);
  for (const auto& row : report.rows) {
    EXPECT_EQ(row.phi, report.rows[0].phi);
    EXPECT_EQ(row.pixel_ratio, report.rows[0].pixel_ratio);
    EXPECT_EQ(row.after, report.rows[0].after);
  }
}

TEST(EvaluateBatch, ThreadCountDoesNotChangeRows) {
  const auto toy = oracle::planted_toy();
  std::vector<Tensor> images;
  for (std::uint64_t s = 0; s < 6; ++s) {
    Tensor x = toy.image;
    x[s * 7] = 0.9;
    images.push_back(x);
  }
  auto cfg = oracle::planted_config(4);
  const auto one = evaluate_batch(toy.model, images, Mode::Fntc, cfg, 1);
  const auto three = evaluate_batch(toy.model, images, Mode::Fntc, cfg, 3);
  for (std::size_t i = 0; i < images.size(); ++i) {
    EXPECT_EQ(one.rows[i].index, i);
    EXPECT_EQ(three.rows[i].index, i);
    EXPECT_EQ(one.rows[i].after, three.rows[i].after);
    EXPECT_EQ(one.rows[i].pixel_ratio, three.rows[i].pixel_ratio);
  }
  EXPECT_EQ(one.phi_mean, three.phi_mean);
}

TEST(EvaluateBatch, FailuresAreReportedNotThrown) {
  const auto toy = oracle::planted_toy();
  const std::vector<Tensor> images{toy.image, Tensor({8, 8, 3})};
  const auto report = evaluate_batch(toy.model, images, Mode::Ftc, oracle::planted_config(4));
  EXPECT_EQ(report.failures, 1u);
  EXPECT_FALSE(report.rows[0].error.has_value());
  EXPECT_TRUE(report.rows[1].error.has_value());
  EXPECT_EQ(report.phi_per_image.size(), 1u);
  EXPECT_THROW(evaluate_batch(toy.model, std::vector<Tensor>{}, Mode::Ftc, {}), Error);
}

TEST(EvaluateBatch, ReferenceSuiteFtc) {
  const auto& net = reference::model();
  std::vector<Tensor> images;
  for (const auto& s : reference::eval_set()) images.push_back(s.image);
  const auto report = evaluate_batch(net, images, Mode::Ftc, {});
  EXPECT_EQ(report.failures, 0u);
  double sum = 0.0;
  for (double v : report.phi_per_image) sum += v;
  EXPECT_DOUBLE_EQ(report.phi_mean, sum / 100.0);
  for (double r : report.pixel_ratio_per_image) {
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
  }
  EXPECT_GT(report.phi_mean, 0.0);
  EXPECT_LT(report.pixel_ratio_mean, 0.10);
  EXPECT_GE(report.improved, 90u);
}
