// Acceptance run: prints one line per criterion and exits nonzero if any
// criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "reference.hpp"
#include "toy_oracle.hpp"

namespace fs = std::filesystem;
using namespace undesirable;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. every registered VJP and all loss modes against central differences
Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  const auto rows = run_gradcheck({});
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  std::size_t losses = 0;
  bool enough_trials = true;
  for (const auto& r : rows) {
    if (r.max_error >= worst) {
      worst = r.max_error;
      worst_name = r.name;
    }
    losses += r.name == "loss:plain" || r.name == "loss:ftc" || r.name == "loss:fntc";
    enough_trials = enough_trials && r.trials >= 10;
  }
  const bool pass = worst <= 1e-6 && losses == 3 && enough_trials && secs < 30.0;
  return {pass, fmt("%zu checks, worst %s %.2e, %.1f s", rows.size(), worst_name.c_str(), worst, secs)};
}

// 2. Q(M'=1) = X and Q(M'=0) = h(X) bit for bit; convexity on 1000 pixels
Verdict masking_identities() {
  CounterRng rng(2, 0xACC);
  bool exact = true;
  for (int t = 0; t < 5; ++t) {
    const Tensor x = synthetic_sample(kEvalSeed, std::size_t(t)).image;
    const Tensor h = gaussian_blur(x, BlurConfig::desk_scale());
    exact = exact && mask_apply(x, Tensor({32, 32}, 1.0), h) == x;
    exact = exact && mask_apply(x, Tensor({32, 32}, 0.0), h) == h;
  }
  std::size_t violations = 0;
  for (int p = 0; p < 1000; ++p) {
    const Tensor x = detail::random_tensor(rng, {8, 8, 3}, 0.0, 1.0);
    const Tensor h = gaussian_blur(x, BlurConfig::desk_scale());
    const Tensor m = detail::random_tensor(rng, {8, 8}, 0.0, 1.0);
    const Tensor q = mask_apply(x, m, h);
    const std::size_t i = rng.below(q.size());
    const double lo = std::min(x[i], h[i]), hi = std::max(x[i], h[i]);
    violations += !(q[i] >= lo && q[i] <= hi);
  }
  return {exact && violations == 0,
          fmt("identities %s, %zu/1000 convexity violations", exact ? "exact" : "broken", violations)};
}

// 3. R_M, R_ftc, R_fntc vanish at the all-ones mask
Verdict regularizer_zeros() {
  bool zero = true;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto net = ReferenceCnn::initialized(10, 32, 32, 100 + s);
    const Tensor x = synthetic_sample(kEvalSeed, s).image;
    const PerturbationContext ctx(net, x, BlurConfig::desk_scale());
    const Tensor ones({8, 8}, 1.0);
    for (FtcReading reading : {FtcReading::Literal, FtcReading::Vector}) {
      RegWeights w;
      w.ftc_reading = reading;
      for (Mode mode : {Mode::Plain, Mode::Ftc, Mode::Fntc}) {
        const auto e = loss(mode, net, ctx, ones, s, w, false);
        zero = zero && e.terms.tv == 0.0 && e.terms.l1 == 0.0 && e.terms.extra == 0.0;
      }
      const Tensor q = ctx.perturb(ones);
      zero = zero && r_ftc(net, x, q, s, w.gamma, reading) == 0.0 && r_fntc(net, x, q, s, w.gamma) == 0.0;
    }
  }
  return {zero, zero ? "all exactly 0" : "nonzero regularizer at identity"};
}

// 4. planted negative-weight region on the linear toy
Verdict oracle_recovery() {
  const auto t0 = Clock::now();
  const auto toy = oracle::planted_toy();
  const auto r = explain(toy.model, toy.image, oracle::planted_config(4));
  const auto [in, out] = oracle::inside_outside(r.upsampled_mask, toy.region);

  const auto cfg = oracle::planted_config(2);
  const auto r2 = explain(toy.model, toy.image, cfg);
  const PerturbationContext ctx(toy.model, toy.image, cfg.blur);
  const double adam = loss(cfg.mode, toy.model, ctx, r2.mask, 0, cfg.weights, false).total;
  const double brute = oracle::brute_force_binary(toy.model, ctx, 2, 2, cfg.mode, 0, cfg.weights);
  const double secs = seconds_since(t0);
  const bool pass = in >= 4.0 * out && adam <= brute + 1e-3 && secs < 10.0;
  return {pass, fmt("inside %.4f vs outside %.4f (%.1fx), adam %.5f vs brute force %.5f, %.1f s", in,
                    out, out > 0 ? in / out : INFINITY, adam, brute, secs)};
}

struct SuiteRun {
  MetricReport ftc, fntc;
};

const SuiteRun& reference_suite() {
  static const SuiteRun run = [] {
    const auto& net = reference::model();
    std::vector<Tensor> images;
    for (const auto& s : reference::eval_set(100)) images.push_back(s.image);
    return SuiteRun{evaluate_batch(net, images, Mode::Ftc, {}),
                    evaluate_batch(net, images, Mode::Fntc, {})};
  }();
  return run;
}

// 5. FTC raises the top-1 probability
Verdict accuracy_improvement() {
  const auto& r = reference_suite().ftc;
  const bool pass = r.failures == 0 && r.improved >= 90 && r.phi_mean > 0.0;
  return {pass, fmt("improved %zu/100, phi_mean %.2f", r.improved, r.phi_mean)};
}

// 6. sparse masks
Verdict sparsity() {
  const auto& s = reference_suite();
  const bool pass = s.ftc.pixel_ratio_mean < 0.10 && s.fntc.pixel_ratio_mean < 0.10;
  return {pass, fmt("mean pixel ratio ftc %.4f, fntc %.4f", s.ftc.pixel_ratio_mean,
                    s.fntc.pixel_ratio_mean)};
}

// 7. seed consistency versus the plain objective. An image whose masks in a
// mode include a constant one has no defined correlation and is not a win.
Verdict consistency() {
  const auto t0 = Clock::now();
  const auto& net = reference::model();
  const auto samples = reference::eval_set(20);
  std::size_t ftc_wins = 0, fntc_wins = 0, undefined = 0;
  double mean[3] = {0.0, 0.0, 0.0};
  for (const auto& s : samples) {
    auto score = [&](Mode mode) -> std::optional<double> {
      std::vector<Tensor> masks;
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ExplainConfig cfg;
        cfg.mode = mode;
        cfg.seed = seed;
        masks.push_back(explain(net, s.image, cfg).mask);
      }
      try {
        return consistency_score(masks);
      } catch (const Error&) {
        return std::nullopt;
      }
    };
    const auto plain = score(Mode::Plain), ftc = score(Mode::Ftc), fntc = score(Mode::Fntc);
    undefined += !plain || !ftc || !fntc;
    if (plain && ftc && fntc) {
      mean[0] += *plain;
      mean[1] += *ftc;
      mean[2] += *fntc;
    }
    ftc_wins += plain && ftc && *ftc > *plain;
    fntc_wins += plain && fntc && *fntc > *plain;
  }
  const double secs = seconds_since(t0);
  const bool pass = ftc_wins >= 16 && fntc_wins >= 16 && secs < 300.0;
  const double defined = double(samples.size() - undefined);
  return {pass, fmt("ftc beats plain on %zu/20, fntc on %zu/20 (need 16), %zu undefined; "
                    "mean score plain %.4f ftc %.4f fntc %.4f; %.0f s",
                    ftc_wins, fntc_wins, undefined, mean[0] / defined, mean[1] / defined,
                    mean[2] / defined, secs)};
}

// 8. every CLI command twice with identical seeds, outputs compared byte for byte
int sh(const std::string& args) {
  const std::string cmd = std::string("\"") + UNDESIR_BIN + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Verdict determinism() {
  const fs::path work = ACCEPTANCE_WORK;
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path model = work / "model", data = work / "data";
  if (sh("train --samples 300 --epochs 1 --out " + q(model)) != 0 ||
      sh("dataset --n 4 --out " + q(data)) != 0) {
    return {false, "setup commands failed"};
  }
  const std::string w = " --weights " + q(model / "model.undw");
  const std::string img = " --image " + q(data / "img_0001.ppm");
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train --samples 300 --epochs 1 --seed 3"},
      {"dataset", "dataset --n 4 --seed 9"},
      {"explain", "explain --mode fntc --seed 2" + img + w},
      {"eval", "eval --n 4 --mode ftc --dataset " + q(data) + w},
      {"gradcheck", "gradcheck --trials 2"},
      // few iterations keep the weak model's masks away from constant
      {"consistency", "consistency --trials 3 --mode plain --iterations 2" + img + w},
  };
  std::size_t files = 0;
  for (const auto& [name, args] : commands) {
    const fs::path a = work / (name + "_a"), b = work / (name + "_b");
    if (sh(args + " --out " + q(a)) != 0 || sh(args + " --out " + q(b)) != 0) {
      return {false, name + " failed to run"};
    }
    for (const auto& entry : fs::directory_iterator(a)) {
      const fs::path other = b / entry.path().filename();
      if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) {
        return {false, name + ": " + entry.path().filename().string() + " differs"};
      }
      ++files;
    }
    if (std::distance(fs::directory_iterator(b), fs::directory_iterator{}) !=
        std::distance(fs::directory_iterator(a), fs::directory_iterator{})) {
      return {false, name + ": different file sets"};
    }
  }
  return {true, fmt("%zu commands, %zu files byte-identical", commands.size(), files)};
}

// 9. metric arithmetic
Verdict metric_arithmetic() {
  bool ok = phi(0.6, 0.8) == 50.0;
  CounterRng rng(9, 0x9);
  for (int t = 0; t < 20; ++t) {
    const Tensor up = detail::random_tensor(rng, {32, 32}, 0.0, 1.0);
    double prev = 1.0;
    for (int i = 0; i <= 100; ++i) {
      const double r = pixel_ratio(up, i / 100.0);
      ok = ok && r <= prev;
      prev = r;
    }
    const Tensor m = detail::random_tensor(rng, {8, 8}, 0.0, 1.0);
    Tensor inv = m;
    for (double& v : inv.values()) v = 1.0 - v;
    const std::vector<Tensor> same{m, m}, opposite{m, inv};
    ok = ok && consistency_score(same) == 1.0 && consistency_score(opposite) == -1.0;
  }
  return {ok, fmt("phi(0.6, 0.8) = %.17g", phi(0.6, 0.8))};
}

}  // namespace

int main() {
  const std::vector<std::function<Verdict()>> criteria{
      gradient_fidelity, masking_identities, regularizer_zeros,
      oracle_recovery,   accuracy_improvement, sparsity,
      consistency,       determinism,        metric_arithmetic};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i]();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("criterion %zu: %s  %s\n", i + 1, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
