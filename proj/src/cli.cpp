#include "atd/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "atd/image.hpp"
#include "atd/ops.hpp"
#include "atd/sparse.hpp"
#include "atd/suites.hpp"
#include "atd/training.hpp"

namespace atd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Precedence for every setting: built-in default < --config file < flag.
struct Common {
  std::uint64_t seed = 0;
  std::string config_path;
  std::string outdir = "./out";
  json config = json::object();

  json section(const char* name) const { return config.contains(name) ? config.at(name) : json::object(); }
};

struct ModelFlags {
  std::optional<std::string> preset;
  std::optional<std::string> variant;
  std::optional<std::size_t> scale;

  void add(CLI::App* sub) {
    sub->add_option("--preset", preset, "micro, light or full");
    sub->add_option("--variant", variant, "baseline, tdca, tdca_acmsa or full");
    sub->add_option("--scale", scale, "SR factor: 2, 3 or 4");
  }
  ModelConfig resolve(const Common& c) const {
    json m = c.section("model");
    if (preset) m["preset"] = *preset;
    ModelConfig cfg = ModelConfig::from_json(m);
    if (variant) cfg.set_variant(*variant);
    if (scale) cfg.scale = *scale;
    cfg.validate();
    return cfg;
  }
};

std::string fmt(double v, const char* spec = "%.6f") {
  if (std::isnan(v)) return "null";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

Image as_rgb(Image img) {
  if (img.channels == 3) return img;
  auto rgb = Image::zeros(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.height * img.width; ++i)
    for (std::size_t c = 0; c < 3; ++c) rgb.data[i * 3 + c] = img.data[i];
  return rgb;
}

// Largest top-left region whose extents divide by the scale.
Image crop_to_multiple(const Image& img, std::size_t scale) {
  const std::size_t h = img.height / scale * scale, w = img.width / scale * scale;
  if (h == 0 || w == 0) throw ShapeError("image smaller than the SR scale");
  if (h == img.height && w == img.width) return img;
  auto out = Image::zeros(h, w, img.channels);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, x, c);
  return out;
}

ChannelMode channel_mode(const std::string& s) {
  if (s == "y") return ChannelMode::kY;
  if (s == "rgb") return ChannelMode::kRgb;
  throw Error("--channel must be 'y' or 'rgb'");
}

std::string metric_line(const std::string& image, const MetricResult& m) {
  return "{\"image\":" + json(image).dump() + ",\"psnr\":" + psnr_json(m.psnr_db) + ",\"ssim\":" + fmt(m.ssim) + "}";
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  return os;
}

// train ---------------------------------------------------------------------------

struct TrainCmd {
  ModelFlags model;
  std::optional<std::size_t> steps, patch, patches, checkpoint_every;
  std::optional<double> lr, beta2;
  std::optional<std::string> loss;
  std::vector<std::string> inputs;

  void add(CLI::App* sub) {
    model.add(sub);
    sub->add_option("--steps", steps, "optimizer steps");
    sub->add_option("--lr", lr, "initial learning rate");
    sub->add_option("--beta2", beta2, "second-moment decay");
    sub->add_option("--patch", patch, "HQ patch side for synthetic data");
    sub->add_option("--patches", patches, "number of synthetic patches");
    sub->add_option("--loss", loss, "l1 or charbonnier");
    sub->add_option("--checkpoint-every", checkpoint_every, "steps between checkpoints (0 = off)");
    sub->add_option("--input", inputs, "HQ PNG training images (synthetic patches when absent)");
  }

  int run(const Common& c, std::ostream& out) const {
    const ModelConfig mc = model.resolve(c);
    TrainConfig tc = TrainConfig::from_json(c.section("train"));
    if (steps) tc.steps = *steps;
    if (patch) tc.patch = *patch;
    if (patches) tc.patches = *patches;
    if (checkpoint_every) tc.checkpoint_every = *checkpoint_every;
    if (lr) tc.optim.lr = *lr;
    if (beta2) tc.optim.beta2 = *beta2;
    if (loss) tc = TrainConfig::from_json(json{{"loss", *loss}}, tc);

    std::vector<SrPair> data;
    for (const auto& path : inputs)
      data.push_back(make_pair(crop_to_multiple(as_rgb(read_png(path)), mc.scale), mc.scale));
    if (data.empty()) data = synthetic_dataset(tc.patches, tc.patch, mc.scale, c.seed);

    const fs::path dir(c.outdir);
    fs::create_directories(dir);
    {
      auto os = open_out(dir / "config.json");
      os << json{{"seed", c.seed}, {"model", mc.to_json()}, {"train", tc.to_json()}}.dump(2) << '\n';
    }
    auto model = AtdModel::create(mc, c.seed);
    auto log = open_out(dir / "train_log.jsonl");
    TrainHooks hooks{&log, tc.checkpoint_every ? (dir / "checkpoints").string() : "", nullptr};
    auto r = train_micro(model, data, tc, hooks);
    save_checkpoint((dir / "model.atdc").string(), model);
    out << json{{"params", model.count_params()},
                {"steps", tc.steps},
                {"initial_loss", r.initial_loss},
                {"final_loss", r.final_loss},
                {"final_psnr", std::isinf(r.final_psnr) ? json("inf") : json(r.final_psnr)},
                {"checkpoint", (dir / "model.atdc").string()}}
               .dump()
        << '\n';
    return 0;
  }
};

// eval / infer --------------------------------------------------------------------

struct EvalCmd {
  std::string ckpt;
  std::vector<std::string> inputs;
  std::size_t count = 4, patch = 32, crop_border = 0;
  std::string channel = "y";

  void add(CLI::App* sub) {
    sub->add_option("--ckpt", ckpt, "checkpoint file")->required();
    sub->add_option("--input", inputs, "HQ PNG images; LQ inputs are bicubic downscales");
    sub->add_option("--count", count, "synthetic patches when no --input is given");
    sub->add_option("--patch", patch, "synthetic HQ patch side");
    sub->add_option("--crop-border", crop_border, "pixels removed from each edge before scoring");
    sub->add_option("--channel", channel, "y or rgb");
  }

  int run(const Common& c, std::ostream& out) const {
    const auto mode = channel_mode(channel);
    const auto model = load_checkpoint(ckpt);
    const std::size_t scale = model.config.scale;
    std::vector<std::pair<std::string, SrPair>> items;
    for (const auto& path : inputs)
      items.push_back({path, make_pair(crop_to_multiple(as_rgb(read_png(path)), scale), scale)});
    if (inputs.empty()) {
      auto data = synthetic_dataset(count, patch, scale, c.seed);
      for (std::size_t i = 0; i < data.size(); ++i) items.push_back({"synthetic_" + std::to_string(i), data[i]});
    }
    auto os = open_out(fs::path(c.outdir) / "metrics.jsonl");
    NoGradGuard guard;
    double psnr_sum = 0, ssim_sum = 0;
    for (const auto& [name, pair] : items) {
      auto m = evaluate(tensor_to_image(forward_sr(pair.lq, model)), tensor_to_image(pair.hq), mode, crop_border);
      const auto line = metric_line(name, m);
      out << line << '\n';
      os << line << '\n';
      psnr_sum += m.psnr_db;
      ssim_sum += m.ssim;
    }
    if (!items.empty()) {
      MetricResult mean{psnr_sum / items.size(), ssim_sum / items.size(), mode};
      out << metric_line("mean", mean) << '\n';
    }
    return 0;
  }
};

struct InferCmd {
  std::string ckpt, input, output, ref;
  std::optional<std::size_t> scale;
  std::size_t crop_border = 0;
  std::string channel = "y";

  void add(CLI::App* sub) {
    sub->add_option("--ckpt", ckpt, "checkpoint file")->required();
    sub->add_option("--input", input, "LQ PNG")->required();
    sub->add_option("--output", output, "SR PNG (default <outdir>/sr.png)");
    sub->add_option("--scale", scale, "expected SR factor; must match the checkpoint");
    sub->add_option("--ref", ref, "ground-truth PNG to score against");
    sub->add_option("--crop-border", crop_border, "pixels removed from each edge before scoring");
    sub->add_option("--channel", channel, "y or rgb");
  }

  int run(const Common& c, std::ostream& out) const {
    const auto mode = channel_mode(channel);
    const auto model = load_checkpoint(ckpt);
    if (scale && *scale != model.config.scale)
      throw Error("scale mismatch: checkpoint is x" + std::to_string(model.config.scale) + ", requested x" +
                  std::to_string(*scale));
    const auto lq = as_rgb(read_png(input));
    Tensor sr;
    {
      NoGradGuard guard;
      sr = forward_sr(image_to_tensor(lq), model);
    }
    const fs::path dest = output.empty() ? fs::path(c.outdir) / "sr.png" : fs::path(output);
    if (!dest.parent_path().empty()) fs::create_directories(dest.parent_path());
    write_png(dest.string(), tensor_to_image(sr));
    json summary{{"output", dest.string()}, {"height", sr.dim(0)}, {"width", sr.dim(1)}};
    if (!ref.empty()) {
      // Score what was written, after 8-bit quantization.
      auto m = evaluate(read_png(dest.string()), as_rgb(read_png(ref)), mode, crop_border);
      summary["psnr"] = std::isinf(m.psnr_db) ? json("inf") : json(m.psnr_db);
      summary["ssim"] = std::isnan(m.ssim) ? json(nullptr) : json(m.ssim);
    }
    out << summary.dump() << '\n';
    return 0;
  }
};

// inspect-attn --------------------------------------------------------------------

struct InspectCmd {
  ModelFlags model;
  std::string ckpt, input;
  std::size_t layer = 0, bins = 10, size = 32;

  void add(CLI::App* sub) {
    model.add(sub);
    sub->add_option("--ckpt", ckpt, "checkpoint (random init from --preset and --seed when absent)");
    sub->add_option("--input", input, "LQ PNG (synthetic patch when absent)");
    sub->add_option("--layer", layer, "layer index counted across blocks");
    sub->add_option("--bins", bins, "histogram bins over [1/M, 1]");
    sub->add_option("--size", size, "synthetic input side");
  }

  int run(const Common& c, std::ostream& out) const {
    const auto m = ckpt.empty() ? AtdModel::create(model.resolve(c), c.seed) : load_checkpoint(ckpt);
    Tensor img;
    if (!input.empty()) {
      img = image_to_tensor(as_rgb(read_png(input)));
    } else {
      Rng rng(c.seed);
      img = image_to_tensor(synthetic_patch(size, rng));
    }
    ForwardTrace trace;
    {
      NoGradGuard guard;
      forward_sr(img, m, &trace);
    }
    if (trace.layers.empty()) throw Error("model variant '" + m.config.variant() + "' has no dictionary attention");
    if (layer >= trace.layers.size())
      throw Error("layer " + std::to_string(layer) + " out of range (model has " +
                  std::to_string(trace.layers.size()) + " layers)");
    const auto& lt = trace.layers[layer];
    const std::size_t entries = m.config.dict_size;
    const fs::path dir(c.outdir);
    fs::create_directories(dir);
    {
      auto os = open_out(dir / "max_weight_hist.csv");
      write_histogram_csv(os, max_weight_histogram(lt.max_weight, entries, bins));
    }
    write_category_png((dir / "category_map.png").string(), lt.argmax_idx, lt.grid_h, lt.grid_w);
    {
      auto os = open_out(dir / "category_map.csv");
      write_category_csv(os, lt.argmax_idx, lt.grid_h, lt.grid_w);
    }
    {
      auto os = open_out(dir / "groups.csv");
      write_group_csv(os, make_assignment(lt.argmax_idx, m.config.group_size), lt.grid_w);
    }
    auto sorted = lt.max_weight;
    std::sort(sorted.begin(), sorted.end());
    const double uniform = 1.0 / static_cast<double>(entries);
    const auto above = std::count_if(sorted.begin(), sorted.end(), [&](float w) { return w > 2.0 * uniform; });
    out << json{{"layer", layer},
                {"tokens", sorted.size()},
                {"grid", {lt.grid_h, lt.grid_w}},
                {"uniform_weight", uniform},
                {"median_max_weight", sorted[sorted.size() / 2]},
                {"fraction_above_2_over_m", static_cast<double>(above) / sorted.size()}}
               .dump()
        << '\n';
    return 0;
  }
};

// bench ---------------------------------------------------------------------------

struct BenchCmd {
  ModelFlags model;
  std::vector<std::size_t> sizes{64, 128};
  std::size_t repeats = 3, global_limit = 4096;

  void add(CLI::App* sub) {
    model.add(sub);
    sub->add_option("--sizes", sizes, "token grid sides, e.g. 64,128")->delimiter(',');
    sub->add_option("--repeats", repeats, "timing repeats; the fastest is kept");
    sub->add_option("--global-max-tokens", global_limit, "time global attention only up to this many tokens");
  }

  int run(const Common& c, std::ostream& out) const {
    const ModelConfig mc = model.resolve(c);
    if (sizes.empty()) throw Error("--sizes is empty");
    auto os = open_out(fs::path(c.outdir) / "bench.csv");
    os << "side,tokens,acmsa_attn_flops,acmsa_total_flops,global_attn_flops,global_total_flops,acmsa_ms,global_ms\n";
    out << "side  tokens  acmsa_flops  global_flops  acmsa_ms  global_ms  flops_ratio  global_ratio  time_ratio\n";
    std::optional<BenchRow> first;
    for (std::size_t side : sizes) {
      if (side == 0) throw Error("bench sizes must be positive");
      auto r = bench_attention(side, mc, repeats, c.seed, side * side <= global_limit);
      if (!first) first = r;
      os << r.side << ',' << r.tokens << ',' << fmt(r.acmsa.core(), "%.0f") << ',' << fmt(r.acmsa.total(), "%.0f")
         << ',' << fmt(r.global.core(), "%.0f") << ',' << fmt(r.global.total(), "%.0f") << ','
         << fmt(r.acmsa_ms, "%.4f") << ',' << fmt(r.global_ms, "%.4f") << '\n';
      char line[256];
      std::snprintf(line, sizeof line, "%-5zu %-7zu %-12.4g %-13.4g %-9.3f %-10s %-12.4g %-13.4g %.3f\n", r.side,
                    r.tokens, double(r.acmsa.core()), double(r.global.core()), r.acmsa_ms,
                    fmt(r.global_ms, "%.3f").c_str(), double(r.acmsa.core()) / first->acmsa.core(),
                    double(r.global.core()) / first->global.core(), r.acmsa_ms / first->acmsa_ms);
      out << line;
    }
    return 0;
  }
};

// gradcheck / oracle ----------------------------------------------------------------

struct GradcheckCmd {
  ModelFlags model;
  double tolerance = 2e-2;
  bool model_only = false;

  void add(CLI::App* sub) {
    model.add(sub);
    sub->add_option("--tolerance", tolerance, "relative error bound");
    sub->add_flag("--model-only", model_only, "skip the per-op checks");
  }

  int run(const Common& c, std::ostream& out, std::ostream& err) const {
    auto r = run_gradient_suite(model.resolve(c), c.seed, tolerance, !model_only);
    auto os = open_out(fs::path(c.outdir) / "gradcheck.csv");
    os << "op,parameter,rel_error,noise_floor,checked,passed\n";
    for (const auto& e : r.entries) {
      os << e.op << ',' << e.result.name << ',' << e.result.rel_error << ',' << e.result.noise_floor << ','
         << e.result.checked << ',' << (e.result.passed ? 1 : 0) << '\n';
      if (!e.result.passed)
        err << "FAIL " << e.op << " " << e.result.name << " rel err " << e.result.rel_error << '\n';
    }
    if (r.shift_invariant_max >= 1e-5)
      err << "FAIL shift-invariant key bias gradient " << r.shift_invariant_max << " (expected 0)\n";
    const auto* w = r.worst_entry();
    out << json{{"checks", r.entries.size()},
                {"tolerance", tolerance},
                {"worst_rel_error", r.worst()},
                {"worst", w ? w->op + ":" + w->result.name : ""},
                {"shift_invariant_params", r.shift_invariant.size()},
                {"shift_invariant_max_grad", r.shift_invariant_max},
                {"passed", r.passed()}}
               .dump()
        << '\n';
    return r.passed() ? 0 : 1;
  }
};

struct OracleCmd {
  bool demo = false;
  std::size_t problems = 100, iters = 500, analogy = 0, atoms = 16, dim = 8;
  double lambda = 0.1, tau_prime = 2.0;

  void add(CLI::App* sub) {
    sub->add_flag("--demo", demo, "print the closed-form orthonormal example");
    sub->add_option("--problems", problems, "random problems per check");
    sub->add_option("--iters", iters, "ISTA iterations");
    sub->add_option("--analogy", analogy, "signals for the lasso vs attention report (0 = skip)");
    sub->add_option("--atoms", atoms, "dictionary entries for the analogy report");
    sub->add_option("--dim", dim, "signal width for the analogy report");
    sub->add_option("--lambda", lambda, "lasso penalty for the analogy report");
    sub->add_option("--tau-prime", tau_prime, "attention temperature for the analogy report (>= 1)");
  }

  int run(const Common& c, std::ostream& out, std::ostream& err) const {
    if (demo) {
      // Orthonormal D with y = 2 d_1 and lambda = 0.5: alpha_1 = 2 - 0.5 / 2.
      std::vector<double> eye(4 * 4, 0.0);
      for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
      auto p = SparseCodingProblem::create(eye, eye, 4, 4, {2.0, 0.0, 0.0, 0.0}, 0.5);
      auto a = lasso_solve(p, iters);
      out << "demo: y = 2*d1, lambda = 0.5, alpha = [";
      for (std::size_t i = 0; i < a.size(); ++i) out << (i ? ", " : "") << fmt(a[i]);
      out << "]\nalpha_1 = " << fmt(a[0]) << " (closed form 1.750000)\n";
    }
    auto r = run_oracle_suite(problems, iters, c.seed);
    for (const auto& f : r.failures) err << "FAIL " << f << '\n';
    out << json{{"problems", r.problems},
                {"iterations", r.iterations},
                {"fixture_alpha_1", r.fixture_alpha},
                {"closed_form_max_err", r.closed_form_max_err},
                {"worst_objective_increase", r.worst_increase},
                {"passed", r.passed()}}
               .dump()
        << '\n';
    if (analogy) {
      if (tau_prime < 1.0) throw Error("--tau-prime must be at least 1");
      Rng rng(c.seed);
      auto dict = TokenDictionary::create(atoms, dim, dim, rng);
      for (auto& v : dict.entries.mutable_data()) v = std::normal_distribution<float>(0.0f, 1.0f)(rng);
      dict.tau.mutable_data()[0] = atoms > 1 ? static_cast<float>((tau_prime - 1.0) / std::log(double(atoms))) : 0.0f;
      AnalogyOptions opt;
      opt.lambda = lambda;
      opt.iters = iters;
      opt.seed = c.seed;
      auto rows = analogy_report(analogy, dict, opt);
      auto os = open_out(fs::path(c.outdir) / "analogy.csv");
      write_analogy_csv(os, rows);
      out << "analogy report: " << rows.size() << " signals -> " << (fs::path(c.outdir) / "analogy.csv").string()
          << '\n';
    }
    return r.passed() ? 0 : 1;
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adaptive token dictionary super-resolution: training, inference and self-checks", "atd"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "RNG seed for initialization and synthetic data");
  app.add_option("--config", common.config_path, "JSON file with optional 'seed', 'outdir', 'model', 'train'")
      ->check(CLI::ExistingFile);
  app.add_option("--outdir", common.outdir, "artifact directory");

  TrainCmd train;
  EvalCmd eval;
  InferCmd infer;
  InspectCmd inspect;
  BenchCmd bench;
  GradcheckCmd gradcheck;
  OracleCmd oracle;
  auto* s_train = app.add_subcommand("train", "train on synthetic patches or HQ PNGs");
  auto* s_eval = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on bicubic-degraded images");
  auto* s_infer = app.add_subcommand("infer", "upscale one PNG");
  auto* s_inspect = app.add_subcommand("inspect-attn", "dictionary attention statistics and category maps");
  auto* s_bench = app.add_subcommand("bench", "analytic FLOPs and wall time of category attention");
  auto* s_grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  auto* s_oracle = app.add_subcommand("oracle", "sparse-coding solver checks");
  train.add(s_train);
  eval.add(s_eval);
  infer.add(s_infer);
  inspect.add(s_inspect);
  bench.add(s_bench);
  gradcheck.add(s_grad);
  oracle.add(s_oracle);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (!common.config_path.empty()) {
      std::ifstream is(common.config_path);
      try {
        common.config = json::parse(is);
      } catch (const json::exception& e) {
        throw Error("config " + common.config_path + ": " + e.what());
      }
      if (!common.config.is_object()) throw Error("config: top level must be an object");
      for (const auto& [key, v] : common.config.items())
        if (key != "seed" && key != "outdir" && key != "model" && key != "train")
          throw Error("config: unknown top-level key '" + key + "'");
      if (common.config.contains("seed") && app.get_option("--seed")->count() == 0)
        common.seed = common.config.at("seed").get<std::uint64_t>();
      if (common.config.contains("outdir") && app.get_option("--outdir")->count() == 0)
        common.outdir = common.config.at("outdir").get<std::string>();
    }
    if (*s_train) return train.run(common, out);
    if (*s_eval) return eval.run(common, out);
    if (*s_infer) return infer.run(common, out);
    if (*s_inspect) return inspect.run(common, out);
    if (*s_bench) return bench.run(common, out);
    if (*s_grad) return gradcheck.run(common, out, err);
    if (*s_oracle) return oracle.run(common, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace atd
