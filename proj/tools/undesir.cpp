// undesir: train the reference model, export data, explain images, evaluate
// batches, self-check gradients and measure seed consistency.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "undesirable/undesirable.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace undesirable;

namespace {

constexpr int kSchema = 1;

Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

// Temp file + rename so readers never see a partial file.
void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) {
  const std::string s = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

json read_json(const fs::path& path) {
  const Bytes b = read_file(path);
  return json::parse(b.begin(), b.end());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create directory " + dir.string());
}

json box_json(const Box& b) {
  return {{"row", b.row}, {"col", b.col}, {"height", b.height}, {"width", b.width}};
}

const char* reading_name(FtcReading r) {
  return r == FtcReading::Literal ? "literal" : "vector";
}

const char* scaling_name(RegScaling s) {
  return s == RegScaling::PerCell ? "per-cell" : "sum";
}

json config_json(const ExplainConfig& c) {
  json j;
  j["mode"] = mode_name(c.mode);
  j["target"] = c.target ? json(*c.target) : json("top1");
  j["lambda1"] = c.weights.lambda1;
  j["lambda2"] = c.weights.lambda2;
  j["beta"] = c.weights.beta;
  j["gamma"] = c.weights.gamma;
  j["ftc_reading"] = reading_name(c.weights.ftc_reading);
  j["reg_scaling"] = scaling_name(c.weights.scaling);
  j["sigma"] = c.blur.sigma;
  j["kernel_size"] = c.blur.kernel_size;
  j["mask_rows"] = c.mask_rows;
  j["mask_cols"] = c.mask_cols;
  j["lr"] = c.lr;
  j["iterations"] = c.iterations;
  j["seed"] = c.seed;
  j["init_lo"] = c.init_lo;
  j["init_hi"] = c.init_hi;
  return j;
}

/// One manifest per output directory. Wall-clock time is printed, and only
/// stored when asked, so repeated runs produce identical bytes.
class Manifest {
 public:
  Manifest(std::string command, bool record_time)
      : record_time_(record_time), start_(std::chrono::steady_clock::now()) {
    j_["schema"] = kSchema;
    j_["tool"] = "undesir";
    j_["tool_version"] = kVersion;
    j_["command"] = std::move(command);
  }

  json& operator[](const char* key) { return j_[key]; }

  void write(const fs::path& dir) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (record_time_) j_["wall_clock_seconds"] = secs;
    write_json(dir / "manifest.json", j_);
    std::fprintf(stderr, "elapsed %.2f s\n", secs);
  }

 private:
  json j_;
  bool record_time_;
  std::chrono::steady_clock::time_point start_;
};

// ----------------------------------------------------------------------------
// Shared explanation flags.

struct ExplainFlags {
  std::string mode = "ftc";
  std::string target = "top1";
  std::string reading = "literal";
  std::string scaling = "per-cell";
  ExplainConfig config = ExplainConfig::desk_scale();

  void add(CLI::App* app, bool with_target = true) {
    app->add_option("--mode", mode, "plain | ftc | fntc")->capture_default_str();
    if (with_target) {
      app->add_option("--target", target, "class index or top1")->capture_default_str();
    }
    auto& w = config.weights;
    app->add_option("--lambda1", w.lambda1, "TV weight")->capture_default_str();
    app->add_option("--lambda2", w.lambda2, "l1 weight")->capture_default_str();
    app->add_option("--beta", w.beta, "TV exponent")->capture_default_str();
    app->add_option("--gamma", w.gamma, "FTC/FNTC penalty weight")->capture_default_str();
    app->add_option("--ftc-reading", reading, "literal | vector")->capture_default_str();
    app->add_option("--reg-scaling", scaling, "per-cell | sum")->capture_default_str();
    app->add_option("--sigma", config.blur.sigma, "blur sigma")->capture_default_str();
    app->add_option("--kernel-size", config.blur.kernel_size, "blur kernel size")
        ->capture_default_str();
    app->add_option("--mask-rows", config.mask_rows)->capture_default_str();
    app->add_option("--mask-cols", config.mask_cols)->capture_default_str();
    app->add_option("--lr", config.lr, "Adam learning rate")->capture_default_str();
    app->add_option("--iterations", config.iterations)->capture_default_str();
    app->add_option("--seed", config.seed, "mask initialisation seed")->capture_default_str();
  }

  ExplainConfig resolve() const {
    ExplainConfig c = config;
    const auto m = parse_mode(mode);
    if (!m) throw Error("unknown mode '" + mode + "' (plain | ftc | fntc)");
    c.mode = *m;
    if (target == "top1") {
      c.target.reset();
    } else {
      std::size_t used = 0;
      unsigned long k = 0;
      try {
        k = std::stoul(target, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != target.size()) throw Error("--target must be a class index or top1");
      c.target = k;
    }
    if (reading == "literal") {
      c.weights.ftc_reading = FtcReading::Literal;
    } else if (reading == "vector") {
      c.weights.ftc_reading = FtcReading::Vector;
    } else {
      throw Error("unknown --ftc-reading '" + reading + "'");
    }
    if (scaling == "per-cell") {
      c.weights.scaling = RegScaling::PerCell;
    } else if (scaling == "sum") {
      c.weights.scaling = RegScaling::Sum;
    } else {
      throw Error("unknown --reg-scaling '" + scaling + "'");
    }
    c.validate();
    return c;
  }
};

std::unique_ptr<Classifier> load_model(const fs::path& path) {
  return load_weights(read_file(path));
}

std::optional<double> phi_or_null(double before, double after) {
  if (before >= 1.0) return std::nullopt;
  return phi(before, after);
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ----------------------------------------------------------------------------
// Commands.

struct TrainArgs {
  fs::path out;
  std::size_t samples = kTrainSamples;
  std::uint64_t data_seed = kTrainSeed;
  TrainOptions opt;
  bool record_time = false;
};

int cmd_train(const TrainArgs& a) {
  make_dir(a.out);
  Manifest manifest("train", a.record_time);
  const auto data = clean_images(generate_synthetic_dataset(a.samples, a.data_seed));
  if (a.opt.epochs == 0) std::fprintf(stderr, "warning: untrained model (epochs = 0)\n");
  const auto result = train_reference(data, a.opt);
  write_file(a.out / "model.undw", save_weights(result.model));
  std::printf("train accuracy %.4f\n", result.train_accuracy);

  manifest["config"] = {{"samples", a.samples},
                        {"data_seed", a.data_seed},
                        {"epochs", a.opt.epochs},
                        {"lr", a.opt.lr},
                        {"batch_size", a.opt.batch_size},
                        {"label_smoothing", a.opt.label_smoothing}};
  manifest["seeds"] = {{"data", a.data_seed}, {"init", a.opt.seed}};
  manifest["outputs"] = {"model.undw"};
  manifest["train_accuracy"] = result.train_accuracy;
  manifest["epoch_loss"] = result.epoch_loss;
  if (a.opt.epochs == 0) manifest["warning"] = "untrained model";
  manifest.write(a.out);
  return 0;
}

struct DatasetArgs {
  fs::path out;
  std::size_t n = 100;
  std::uint64_t seed = kEvalSeed;
  SyntheticOptions opt;
  bool demo = false;
  bool record_time = false;
};

int cmd_dataset(const DatasetArgs& a) {
  make_dir(a.out);
  Manifest manifest("dataset", a.record_time);
  std::vector<SyntheticSample> samples;
  if (a.demo) {
    samples.push_back(demo_sample());
  } else {
    if (a.n == 0) throw Error("--n must be >= 1");
    samples = generate_synthetic_dataset(a.n, a.seed, a.opt);
  }
  json index;
  index["schema"] = kSchema;
  index["images"] = json::array();
  char name[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    std::snprintf(name, sizeof name, "img_%04zu.ppm", i);
    write_file(a.out / name, encode_ppm(s.image));
    index["images"].push_back({{"file", name},
                               {"label", s.label},
                               {"confuser_label", s.confuser_label},
                               {"patch", box_json(s.patch)},
                               {"confuser", box_json(s.confuser)}});
  }
  write_json(a.out / "index.json", index);
  manifest["config"] = {{"n", samples.size()},
                        {"seed", a.demo ? kEvalSeed : a.seed},
                        {"demo", a.demo},
                        {"image_size", a.opt.image_size},
                        {"patch_size", a.opt.patch_size},
                        {"confuser_size", a.demo ? 7 : a.opt.confuser_size}};
  manifest["outputs"] = {"index.json", "img_*.ppm"};
  manifest.write(a.out);
  std::printf("wrote %zu images to %s\n", samples.size(), a.out.string().c_str());
  return 0;
}

struct ExplainArgs {
  fs::path image, weights, out;
  ExplainFlags flags;
  bool record_time = false;
};

int cmd_explain(const ExplainArgs& a) {
  const ExplainConfig config = a.flags.resolve();
  const auto model = load_model(a.weights);
  const Tensor image = decode_netpbm(read_file(a.image));
  make_dir(a.out);
  Manifest manifest("explain", a.record_time);
  const auto r = explain(*model, image, config);

  Tensor heat = r.upsampled_mask;
  for (double& v : heat.values()) v = 1.0 - v;
  write_file(a.out / "mask.pgm", encode_pgm(heat));
  write_file(a.out / "mask.f64", encode_mask_f64(r.mask));
  write_file(a.out / "perturbed.ppm", encode_ppm(r.perturbed));

  const double ratio = pixel_ratio(r.upsampled_mask);
  const auto ph = phi_or_null(r.before_prob(), r.after_prob());
  json res;
  res["schema"] = kSchema;
  res["mode"] = mode_name(config.mode);
  res["target"] = r.target;
  res["seed"] = r.seed;
  res["before_prob"] = r.before_prob();
  res["after_prob"] = r.after_prob();
  res["phi"] = optional_json(ph);
  res["pixel_ratio"] = ratio;
  res["before_probs"] = r.before.probs;
  res["after_probs"] = r.after.probs;
  res["trace"] = r.trace;
  write_json(a.out / "result.json", res);

  manifest["config"] = config_json(r.config);
  manifest["seeds"] = {{"mask_init", config.seed}};
  manifest["inputs"] = {{"image", a.image.string()}, {"weights", a.weights.string()}};
  manifest["outputs"] = {"mask.pgm", "mask.f64", "perturbed.ppm", "result.json"};
  manifest.write(a.out);

  std::printf("target %zu: p %.4f -> %.4f, phi %s, pixel ratio %.4f\n", r.target,
              r.before_prob(), r.after_prob(),
              ph ? std::to_string(*ph).c_str() : "n/a", ratio);
  return 0;
}

struct EvalArgs {
  fs::path dataset, weights, out;
  std::size_t n = 100;
  ExplainFlags flags;
  bool record_time = false;
};

std::size_t thread_budget() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("UNDESIR_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || cap == 0) {
      throw Error("UNDESIR_THREADS must be a positive integer");
    }
    n = std::min<std::size_t>(n, cap);
  }
  return n;
}

int cmd_eval(const EvalArgs& a) {
  const ExplainConfig config = a.flags.resolve();
  const auto model = load_model(a.weights);
  const json index = read_json(a.dataset / "index.json");
  const auto& entries = index.at("images");
  const std::size_t n = std::min(a.n, entries.size());
  if (n == 0) throw Error("no images selected");
  std::vector<Tensor> images;
  std::vector<std::string> files;
  for (std::size_t i = 0; i < n; ++i) {
    files.push_back(entries[i].at("file").get<std::string>());
    images.push_back(decode_netpbm(read_file(a.dataset / files.back())));
  }
  make_dir(a.out);
  Manifest manifest("eval", a.record_time);
  const auto report = evaluate_batch(*model, images, config.mode, config, thread_budget());

  json rep;
  rep["schema"] = kSchema;
  rep["mode"] = mode_name(report.mode);
  rep["n"] = n;
  rep["rows"] = json::array();
  for (const auto& row : report.rows) {
    json r;
    r["index"] = row.index;
    r["file"] = files[row.index];
    if (row.error) {
      r["error"] = *row.error;
    } else {
      r["target"] = row.target;
      r["before_prob"] = row.before;
      r["after_prob"] = row.after;
      r["phi"] = row.phi;
      r["pixel_ratio"] = row.pixel_ratio;
    }
    rep["rows"].push_back(r);
  }
  rep["phi_per_image"] = report.phi_per_image;
  rep["pixel_ratio_per_image"] = report.pixel_ratio_per_image;
  rep["phi_mean"] = report.phi_mean;
  rep["pixel_ratio_mean"] = report.pixel_ratio_mean;
  rep["improved"] = report.improved;
  rep["failures"] = report.failures;
  rep["config"] = config_json(report.config);
  write_json(a.out / "report.json", rep);

  manifest["config"] = config_json(report.config);
  manifest["seeds"] = {{"mask_init", config.seed}};
  manifest["inputs"] = {{"dataset", a.dataset.string()}, {"weights", a.weights.string()}};
  manifest["outputs"] = {"report.json"};
  manifest.write(a.out);

  for (const auto& row : report.rows) {
    if (row.error) std::fprintf(stderr, "image %zu failed: %s\n", row.index, row.error->c_str());
  }
  std::printf("%s: phi_mean %.3f, pixel ratio %.4f, improved %zu/%zu, failures %zu\n",
              mode_name(report.mode), report.phi_mean, report.pixel_ratio_mean,
              report.improved, n, report.failures);
  return report.failures == n ? 1 : 0;
}

struct GradcheckArgs {
  GradcheckOptions opt;
  std::string corrupt;
  double threshold = 1e-6;
  fs::path out;
};

int cmd_gradcheck(GradcheckArgs a) {
  if (!a.corrupt.empty()) a.opt.corrupt = a.corrupt;
  const auto rows = run_gradcheck(a.opt);
  bool ok = true;
  json table = json::array();
  std::printf("%-20s %-9s %-12s %s\n", "check", "kind", "max rel err", "status");
  for (const auto& r : rows) {
    const bool pass = r.max_error <= a.threshold;
    ok = ok && pass;
    std::printf("%-20s %-9s %-12.3e %s\n", r.name.c_str(), r.is_loss ? "loss" : "primitive",
                r.max_error, pass ? "ok" : "FAIL");
    table.push_back({{"name", r.name},
                     {"kind", r.is_loss ? "loss" : "primitive"},
                     {"max_rel_error", r.max_error},
                     {"trials", r.trials},
                     {"pass", pass}});
  }
  if (!a.out.empty()) {
    make_dir(a.out);
    Manifest manifest("gradcheck", false);
    json rep;
    rep["schema"] = kSchema;
    rep["seed"] = a.opt.seed;
    rep["trials"] = a.opt.trials;
    rep["threshold"] = a.threshold;
    rep["checks"] = table;
    rep["pass"] = ok;
    write_json(a.out / "gradcheck.json", rep);
    manifest["config"] = {{"seed", a.opt.seed}, {"trials", a.opt.trials}};
    manifest["outputs"] = {"gradcheck.json"};
    manifest.write(a.out);
  }
  std::printf("%s\n", ok ? "all checks passed" : "gradient check FAILED");
  return ok ? 0 : 1;
}

struct ConsistencyArgs {
  fs::path image, weights, out;
  std::size_t trials = 5;
  bool same_seed = false;
  ExplainFlags flags;
  bool record_time = false;
};

int cmd_consistency(const ConsistencyArgs& a) {
  if (a.trials < 2) throw Error("--trials must be >= 2");
  const ExplainConfig base = a.flags.resolve();
  const auto model = load_model(a.weights);
  const Tensor image = decode_netpbm(read_file(a.image));
  make_dir(a.out);
  Manifest manifest("consistency", a.record_time);

  std::vector<Tensor> masks;
  json seeds = json::array(), files = json::array();
  char name[32];
  for (std::size_t t = 0; t < a.trials; ++t) {
    ExplainConfig c = base;
    c.seed = a.same_seed ? base.seed : base.seed + t;
    masks.push_back(explain(*model, image, c).mask);
    std::snprintf(name, sizeof name, "mask_%02zu.f64", t);
    write_file(a.out / name, encode_mask_f64(masks.back()));
    seeds.push_back(c.seed);
    files.push_back(name);
  }
  const double score = consistency_score(masks);
  json res;
  res["schema"] = kSchema;
  res["mode"] = mode_name(base.mode);
  res["trials"] = a.trials;
  res["seeds"] = seeds;
  res["masks"] = files;
  res["consistency"] = score;
  write_json(a.out / "consistency.json", res);

  manifest["config"] = config_json(base);
  manifest["config"]["trials"] = a.trials;
  manifest["config"]["same_seed"] = a.same_seed;
  manifest["seeds"] = seeds;
  manifest["inputs"] = {{"image", a.image.string()}, {"weights", a.weights.string()}};
  manifest["outputs"] = files;
  manifest["outputs"].push_back("consistency.json");
  manifest.write(a.out);
  std::printf("%s consistency over %zu trials: %.4f\n", mode_name(base.mode), a.trials, score);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Find undesirable pixels for a target class with learned perturbation masks"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  bool record_time = false;
  app.add_flag("--record-time", record_time, "store wall-clock time in manifests");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train the reference CNN on synthetic data");
  t->add_option("--out", train.out, "output directory")->required();
  t->add_option("--samples", train.samples)->capture_default_str();
  t->add_option("--data-seed", train.data_seed)->capture_default_str();
  t->add_option("--seed", train.opt.seed, "weight init / shuffle seed")->capture_default_str();
  t->add_option("--epochs", train.opt.epochs)->capture_default_str();
  t->add_option("--lr", train.opt.lr)->capture_default_str();
  t->add_option("--batch-size", train.opt.batch_size)->capture_default_str();
  t->add_option("--label-smoothing", train.opt.label_smoothing)->capture_default_str();

  DatasetArgs data;
  auto* d = app.add_subcommand("dataset", "export synthetic images with confuser boxes");
  d->add_option("--out", data.out, "output directory")->required();
  d->add_option("--n", data.n)->capture_default_str();
  d->add_option("--seed", data.seed)->capture_default_str();
  d->add_option("--confuser-size", data.opt.confuser_size)->capture_default_str();
  d->add_flag("--demo", data.demo, "export only the demo image");

  ExplainArgs ex;
  auto* e = app.add_subcommand("explain", "learn a mask for one image");
  e->add_option("--image", ex.image, "PPM or PGM input")->required()->check(CLI::ExistingFile);
  e->add_option("--weights", ex.weights)->required()->check(CLI::ExistingFile);
  e->add_option("--out", ex.out, "output directory")->required();
  ex.flags.add(e);

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "explain a dataset and aggregate metrics");
  v->add_option("--dataset", ev.dataset, "directory with index.json")
      ->required()
      ->check(CLI::ExistingDirectory);
  v->add_option("--weights", ev.weights)->required()->check(CLI::ExistingFile);
  v->add_option("--out", ev.out, "output directory")->required();
  v->add_option("--n", ev.n, "number of images")->capture_default_str();
  ev.flags.add(v, /*with_target=*/false);

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "compare every VJP and loss gradient with finite differences");
  g->add_option("--seed", gc.opt.seed)->capture_default_str();
  g->add_option("--trials", gc.opt.trials)->capture_default_str();
  g->add_option("--out", gc.out, "optional output directory for gradcheck.json");
  g->add_option("--corrupt", gc.corrupt)->group("");

  ConsistencyArgs co;
  auto* c = app.add_subcommand("consistency", "mask correlation across seeds");
  c->add_option("--image", co.image)->required()->check(CLI::ExistingFile);
  c->add_option("--weights", co.weights)->required()->check(CLI::ExistingFile);
  c->add_option("--out", co.out, "output directory")->required();
  c->add_option("--trials", co.trials)->capture_default_str();
  c->add_flag("--same-seed", co.same_seed, "reuse --seed for every trial");
  co.flags.add(c);

  CLI11_PARSE(app, argc, argv);
  train.record_time = data.record_time = ex.record_time = ev.record_time =
      co.record_time = record_time;

  try {
    if (*t) return cmd_train(train);
    if (*d) return cmd_dataset(data);
    if (*e) return cmd_explain(ex);
    if (*v) return cmd_eval(ev);
    if (*g) return cmd_gradcheck(gc);
    if (*c) return cmd_consistency(co);
  } catch (const OptimizationError& err) {
    std::fprintf(stderr, "error: %s (iteration %zu)\n", err.what(), err.iteration());
    return 1;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
  return 0;
}
