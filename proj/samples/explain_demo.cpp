// Explains the demo image in all three modes and prints the learned masks.
//
//   explain_demo [model.undw]
//
// Without a weight file the reference CNN is trained first (a few seconds).

#include <cstdio>
#include <fstream>
#include <iterator>

#include "undesirable/undesirable.hpp"

using namespace undesirable;

int main(int argc, char** argv) {
  std::unique_ptr<Classifier> model;
  if (argc > 1) {
    std::ifstream in(argv[1], std::ios::binary);
    if (!in) {
      std::fprintf(stderr, "cannot read %s\n", argv[1]);
      return 1;
    }
    model = load_weights(Bytes(std::istreambuf_iterator<char>(in), {}));
  } else {
    std::puts("training reference CNN...");
    auto data = clean_images(generate_synthetic_dataset(kTrainSamples, kTrainSeed));
    model = std::make_unique<ReferenceCnn>(train_reference(data, {}).model);
  }

  const SyntheticSample demo = demo_sample();
  std::printf("label %zu, confuser of class %zu at rows %zu-%zu, cols %zu-%zu\n",
              demo.label, demo.confuser_label, demo.confuser.row,
              demo.confuser.row + demo.confuser.height - 1, demo.confuser.col,
              demo.confuser.col + demo.confuser.width - 1);

  for (Mode mode : {Mode::Plain, Mode::Ftc, Mode::Fntc}) {
    ExplainConfig cfg;
    cfg.mode = mode;
    const auto r = explain(*model, demo.image, cfg);
    std::printf("\n%s: p(%zu) %.3f -> %.3f, phi %.1f, pixel ratio %.4f\n", mode_name(mode),
                r.target, r.before_prob(), r.after_prob(),
                phi(r.before_prob(), r.after_prob()), pixel_ratio(r.upsampled_mask));
    // 1 - M per cell, 0 = untouched
    for (std::size_t i = 0; i < r.mask.extent(0); ++i) {
      for (std::size_t j = 0; j < r.mask.extent(1); ++j) {
        std::printf(" %4.2f", 1.0 - r.mask(i, j));
      }
      std::printf("\n");
    }
  }
}
