#include "support.hpp"

using namespace undesirable;
using test::random_tensor;

TEST(Tensor, RejectsLengthMismatchAndZeroExtent) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.sum(), 9.0);
}

TEST(Tensor, RowMajorIndexing) {
  Tensor t({2, 3, 2});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  EXPECT_EQ(t(1, 2, 1), 11.0);
  EXPECT_EQ(t(0, 1, 0), 2.0);
  EXPECT_THROW(t.reshaped({5}), ShapeError);
  EXPECT_EQ(t.reshaped({12})[7], 7.0);
}

// Direct nested-loop cross-correlation, independent of ops::conv2d.
static Tensor conv_oracle_valid(const Tensor& x, const Tensor& k) {
  const std::size_t kh = k.extent(0), kw = k.extent(1), ci = k.extent(2), co = k.extent(3);
  const std::size_t oh = x.extent(0) - kh + 1, ow = x.extent(1) - kw + 1;
  Tensor y({oh, ow, co});
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t o = 0; o < co; ++o) {
        double s = 0.0;
        for (std::size_t a = 0; a < kh; ++a)
          for (std::size_t b = 0; b < kw; ++b)
            for (std::size_t c = 0; c < ci; ++c)
              s += x(i + a, j + b, c) * k[((a * kw + b) * ci + c) * co + o];
        y(i, j, o) = s;
      }
  return y;
}

TEST(Conv2d, IdentityKernelLeavesInputUnchanged) {
  const Tensor x = random_tensor(1, {3, 3, 1});
  const Tensor k({1, 1, 1, 1}, 1.0);
  EXPECT_EQ(ops::conv2d(x, k, ops::Padding::SameReplicate), x);
  EXPECT_EQ(ops::conv2d(x, k, ops::Padding::Valid), x);
}

TEST(Conv2d, ConstantInputNormalizedKernelSameReplicate) {
  const Tensor x({6, 5, 1}, 0.37);
  const Tensor k({3, 3, 1, 1}, 1.0 / 9.0);
  const Tensor y = ops::conv2d(x, k, ops::Padding::SameReplicate);
  for (double v : y.values()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(Conv2d, SameReplicateOnConstantGivesKernelSumTimesConstant) {
  const Tensor x({5, 5, 2}, 0.8);
  const Tensor k = random_tensor(2, {3, 3, 2, 3});
  const Tensor y = ops::conv2d(x, k, ops::Padding::SameReplicate);
  for (std::size_t o = 0; o < 3; ++o) {
    double ksum = 0.0;
    for (std::size_t i = 0; i < 18; ++i) ksum += k[i * 3 + o];
    for (std::size_t p = 0; p < 25; ++p) EXPECT_NEAR(y[p * 3 + o], ksum * 0.8, 1e-14);
  }
}

TEST(Conv2d, ValidMatchesNestedLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor(10 + seed, {5, 5, 1});
    const Tensor k = random_tensor(20 + seed, {3, 3, 1, 1});
    EXPECT_LE(test::max_abs_diff(ops::conv2d(x, k, ops::Padding::Valid),
                                 conv_oracle_valid(x, k)),
              1e-12);
  }
}

TEST(Conv2d, SameReplicateMatchesOracleOnPaddedInput) {
  const Tensor x = random_tensor(3, {4, 5, 2});
  const Tensor k = random_tensor(4, {3, 3, 2, 2});
  Tensor padded({6, 7, 2});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      for (std::size_t c = 0; c < 2; ++c) {
        const std::size_t si = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(i) - 1, 0, 3);
        const std::size_t sj = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(j) - 1, 0, 4);
        padded(i, j, c) = x(si, sj, c);
      }
  EXPECT_LE(test::max_abs_diff(ops::conv2d(x, k, ops::Padding::SameReplicate),
                               conv_oracle_valid(padded, k)),
            1e-12);
}

TEST(Conv2d, Errors) {
  const Tensor x({4, 4, 3});
  EXPECT_THROW(ops::conv2d(x, Tensor({3, 3, 2, 1}), ops::Padding::Valid), ShapeError);
  EXPECT_THROW(ops::conv2d(x, Tensor({2, 3, 3, 1}), ops::Padding::Valid), ShapeError);
  EXPECT_THROW(ops::conv2d_vjp(x, Tensor({3, 3, 3, 1}), ops::Padding::Valid, Tensor({4, 4, 1})),
               ShapeError);
}

TEST(Dense, MatchesHandComputation) {
  const Tensor w({2, 3}, std::vector<double>{1, 2, 3, -1, 0, 1});
  const Tensor b({2}, std::vector<double>{0.5, -0.5});
  const Tensor x({3}, std::vector<double>{1, 1, 2});
  const Tensor y = ops::dense(x, w, b);
  EXPECT_EQ(y[0], 9.5);
  EXPECT_EQ(y[1], 0.5);
  EXPECT_THROW(ops::dense(Tensor({4}), w, b), ShapeError);
  EXPECT_THROW(ops::dense_vjp(x, w, Tensor({3})), ShapeError);
}

TEST(Relu, VjpAtMixedSigns) {
  const Tensor x({2}, std::vector<double>{-1.0, 2.0});
  const Tensor d = ops::relu_vjp(x, Tensor({2}, 1.0));
  EXPECT_EQ(d[0], 0.0);
  EXPECT_EQ(d[1], 1.0);
}

TEST(Relu, GradientAtZeroIsZero) {
  const Tensor d = ops::relu_vjp(Tensor({1}, 0.0), Tensor({1}, 1.0));
  EXPECT_EQ(d[0], 0.0);
}

TEST(Relu, CotangentShapeMismatch) {
  EXPECT_THROW(ops::relu_vjp(Tensor({2}), Tensor({3})), ShapeError);
}

TEST(Avgpool2, AveragesBlocks) {
  Tensor x({2, 4, 1});
  for (std::size_t i = 0; i < 8; ++i) x[i] = static_cast<double>(i);
  const Tensor y = ops::avgpool2(x);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 1}));
  EXPECT_EQ(y[0], (0 + 1 + 4 + 5) / 4.0);
  EXPECT_EQ(y[1], (2 + 3 + 6 + 7) / 4.0);
  EXPECT_THROW(ops::avgpool2(Tensor({3, 4, 1})), ShapeError);
  EXPECT_THROW(ops::avgpool2_vjp({4, 4, 1}, Tensor({1, 2, 1})), ShapeError);
}

TEST(Softmax, VjpOfOnesIsZero) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor z = random_tensor(seed, {7}, -5, 5);
    const auto p = ops::softmax(z.values());
    const std::vector<double> ones(7, 1.0);
    for (double d : ops::softmax_vjp(p, ones)) EXPECT_EQ(d, 0.0);
  }
}

TEST(Softmax, NonnegativeAndSumsToOne) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor z = random_tensor(seed, {10}, -30, 30);
    const auto p = ops::softmax(z.values());
    double s = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, SubtractsMaxBeforeExp) {
  const std::vector<double> z{1000.0, 1001.0};
  const auto p = ops::softmax(z);
  EXPECT_TRUE(std::isfinite(p[0]) && std::isfinite(p[1]));
  EXPECT_NEAR(p[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_THROW(ops::softmax_vjp(p, std::vector<double>(3)), ShapeError);
}

TEST(Elementwise, VjpShapesAndValues) {
  const Tensor a = random_tensor(1, {2, 3}), b = random_tensor(2, {2, 3});
  const Tensor c = random_tensor(3, {2, 3});
  auto [da, db] = ops::mul_vjp(a, b, c);
  EXPECT_EQ(da, ops::mul(b, c));
  EXPECT_EQ(db, ops::mul(a, c));
  EXPECT_THROW(ops::mul(a, Tensor({3, 2})), ShapeError);
  EXPECT_THROW(ops::mul_vjp(a, b, Tensor({6})), ShapeError);
  EXPECT_EQ(ops::sum_vjp({2, 2}, 3.0), Tensor({2, 2}, 3.0));
  EXPECT_EQ(ops::l2_norm_vjp(Tensor({3}), 1.0), Tensor({3}));
  EXPECT_DOUBLE_EQ(ops::l2_norm(Tensor({2}, std::vector<double>{3, 4})), 5.0);
}

TEST(Elementwise, AllFiniteOnFiniteInputs) {
  const Tensor a = random_tensor(5, {4, 4}, -1e3, 1e3);
  EXPECT_TRUE(ops::relu(a).all_finite());
  EXPECT_TRUE(ops::softmax(a.reshaped({16})).all_finite());
  EXPECT_TRUE(ops::scale(1e-3, a).all_finite());
}

// Every registered primitive against central differences, step 1e-5.
class PrimitiveGradcheck : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradcheck, MatchesFiniteDifferences) {
  const auto reg = gradcheck_registry();
  const auto it = std::find_if(reg.begin(), reg.end(),
                               [&](const GradcheckEntry& e) { return e.name == GetParam(); });
  ASSERT_NE(it, reg.end());
  CounterRng rng(42, 0xF00D);
  for (std::size_t t = 0; t < 10; ++t) {
    const Probe p = it->make(rng, t);
    EXPECT_LE(probe_error(p, 1e-5), 1e-6) << GetParam() << " trial " << t;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Registry, PrimitiveGradcheck,
    ::testing::Values("conv2d", "bias_add", "dense", "relu", "avgpool2", "softmax", "mul",
                      "add", "scale", "sum", "l2_norm", "l1_deviation", "tv_norm",
                      "bilinear_upsample", "gaussian_blur", "mask_apply"));

TEST(Gradcheck, RegistryCoversPrimitivesAndAllModes) {
  std::vector<std::string> names;
  for (const auto& e : gradcheck_registry()) names.push_back(e.name);
  for (const char* n : {"conv2d", "dense", "relu", "avgpool2", "softmax", "mul", "add",
                        "scale", "sum", "l1_deviation", "tv_norm", "l2_norm",
                        "bilinear_upsample", "gaussian_blur", "loss:plain", "loss:ftc",
                        "loss:fntc"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), n), names.end()) << n;
  }
}

TEST(Gradcheck, CorruptedVjpIsDetected) {
  GradcheckOptions opt;
  opt.trials = 2;
  opt.corrupt = "softmax";
  for (const auto& row : run_gradcheck(opt)) {
    if (row.name == "softmax") {
      EXPECT_GT(row.max_error, 1e-5);
    } else {
      EXPECT_LE(row.max_error, 1e-6) << row.name;
    }
  }
  opt.corrupt = "no-such-check";
  EXPECT_THROW(run_gradcheck(opt), Error);
}

TEST(Gradcheck, RelativeErrorConvention) {
  const std::vector<double> a{3, 4}, b{3, 4}, z{0, 0};
  EXPECT_EQ(relative_error(a, b), 0.0);
  EXPECT_EQ(relative_error(z, z), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(a, z), 1.0);
}

TEST(CounterRng, DeterministicAndStreamSeparated) {
  CounterRng a(9, 1), b(9, 1), c(9, 2);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
  CounterRng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
    EXPECT_LT(u.below(7), 7u);
  }
}
