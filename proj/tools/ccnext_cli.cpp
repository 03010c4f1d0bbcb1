// ccnext: synthetic data generation, training, inference, evaluation, FLOP
// accounting and model comparison from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "ccnext/attention.hpp"
#include "ccnext/dataset.hpp"
#include "ccnext/parallel.hpp"
#include "ccnext/stats.hpp"
#include "ccnext/train.hpp"

using namespace ccnext;
namespace fs = std::filesystem;
using F = float;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct GenArgs {
  int n = 10;
  std::string out;
  int width = 128;
  int height = 64;
  int max_disparity = 16;
  int layers = 4;
  int octaves = 3;
};

struct ModelArgs {
  std::string preset = "toy";
  double d_min = 0.1;
  double d_max = 100.0;
};

struct TrainArgs {
  std::string manifest;
  std::string heldout;
  std::string out = "model.ckpt";
  std::string trace;
  std::string terms;
  int batch = 4;
  int epochs = 30;
  double lr = 1e-4;
  int lr_decay_epoch = -1;  // -1: half of epochs
  double lr_after_decay = 1e-5;
  int max_steps = 0;
  int eval_every = 0;
  double grad_clip = 0;
  double alpha = 0.85;
  double gamma = 1e-3;
  int scales = 4;
  bool automask = true;
};

struct InferArgs {
  std::string manifest;
  std::string checkpoint;
  std::string out;
  std::string convention = "direct";
  std::string view = "left";
};

struct EvalArgs {
  std::string manifest;
  std::string pred;
  std::string out;
  bool garg_crop = true;
  double min_depth = 1e-3;
  double max_depth = 80.0;
};

struct FlopsArgs {
  std::string shape = "1,64,144,320";
  std::string window = "full";
  std::int64_t c_in = 0;
  std::string mac = "one";
  std::string out;
};

struct CompareArgs {
  std::vector<std::string> reports;
  std::vector<std::string> names;
  double alpha = 0.05;
  std::size_t reference = 0;
  std::string out;
};

// Fills options the command line left unset from key=value pairs; keys are
// long option names without the dashes.
void apply_config(const std::string& path, CLI::App& app, CLI::App& sub) {
  const auto kv = KeyValueFile::load(path);
  for (const auto& [key, value] : kv.entries()) {
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (!opt) opt = app.get_option_no_throw("--" + key);
    if (!opt || key == "config")
      throw IoError(path + ": key '" + key + "' is not an option of '" + sub.get_name() + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

// Required values may come from the config file, so they are checked after
// it has been applied rather than by the parser.
void require(const std::string& value, const char* cmd, const char* flag) {
  if (value.empty()) throw DomainError(std::string(cmd) + ": " + flag + " is required");
}

std::vector<std::int64_t> parse_ints(const std::string& s, const std::string& what) {
  std::vector<std::int64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw DomainError(what + ": '" + s + "' is not a comma-separated integer list");
    }
  }
  return out;
}

ModelConfig model_config(const ModelArgs& m, int h, int w, const StereoCamera& cam) {
  ModelConfig c;
  if (m.preset == "toy")
    c = ModelConfig::toy();
  else if (m.preset == "pico")
    c = ModelConfig::pico();
  else
    throw DomainError("unknown preset '" + m.preset + "' (toy, pico)");
  c.input_h = h;
  c.input_w = w;
  c.max_disparity_px = cam.focal_baseline() / m.d_min;
  c.validate();
  return c;
}

std::vector<SamplePair<F>> load_all(const std::string& manifest) {
  std::vector<SamplePair<F>> out;
  for (const auto& d : load_manifest(manifest)) out.push_back(load_sample<F>(d));
  if (out.empty()) throw DomainError("manifest '" + manifest + "' lists no samples");
  return out;
}

// ---------------------------------------------------------------- commands

int cmd_gen(const Globals& g, const GenArgs& a) {
  require(a.out, "gen", "--out");
  SyntheticSceneConfig base;
  base.width = a.width;
  base.height = a.height;
  base.max_disparity = a.max_disparity;
  base.num_layers = a.layers;
  base.texture_octaves = a.octaves;
  base.validate();
  if (a.n < 1) throw DomainError("gen: --n must be >= 1");
  fs::create_directories(a.out);
  std::ofstream manifest(fs::path(a.out) / "manifest.txt");
  if (!manifest) throw IoError("gen: cannot write manifest in '" + a.out + "'");
  double occ_sum = 0, occ_max = 0;
  for (int i = 0; i < a.n; ++i) {
    SyntheticSceneConfig c = base;
    c.seed = g.seed + static_cast<std::uint64_t>(i);
    const auto s = generate_synthetic_pair<F>(c);
    char id[32];
    std::snprintf(id, sizeof id, "pair%06d", i);
    const std::string stem = id;
    write_png_rgb((fs::path(a.out) / (stem + "_left.png")).string(), s.left);
    write_png_rgb((fs::path(a.out) / (stem + "_right.png")).string(), s.right);
    write_png_gray16((fs::path(a.out) / (stem + "_gt.png")).string(), encode_disparity16(*s.gt_disparity));
    SampleDescriptor d;
    d.id = stem;
    d.left = stem + "_left.png";
    d.right = stem + "_right.png";
    d.gt_disparity = stem + "_gt.png";
    d.fx = s.camera.fx;
    d.cx = s.camera.cx;
    d.cy = s.camera.cy;
    d.baseline_m = s.camera.baseline_m;
    manifest << manifest_line(d) << '\n';
    const double occ = occlusion_fraction(s);
    occ_sum += occ;
    occ_max = std::max(occ_max, occ);
  }
  write_camera_file((fs::path(a.out) / "camera.txt").string(), synthetic_camera(a.width, a.height, a.max_disparity));
  std::printf("pairs %d  occlusion mean %.4f max %.4f  out %s\n", a.n, occ_sum / a.n, occ_max, a.out.c_str());
  return 0;
}

int cmd_train(const Globals& g, const ModelArgs& m, const TrainArgs& a) {
  require(a.manifest, "train", "--manifest");
  const auto data = load_all(a.manifest);
  std::vector<SamplePair<F>> held;
  if (!a.heldout.empty()) held = load_all(a.heldout);
  TrainConfig tc;
  tc.batch_size = a.batch;
  tc.epochs = a.epochs;
  tc.lr = a.lr;
  tc.lr_decay_epoch = a.lr_decay_epoch < 0 ? a.epochs / 2 : a.lr_decay_epoch;
  tc.lr_after_decay = a.lr_after_decay;
  tc.seed = g.seed;
  tc.max_steps = a.max_steps;
  tc.eval_every = a.eval_every;
  tc.grad_clip = a.grad_clip;
  tc.loss.alpha = a.alpha;
  tc.loss.gamma = a.gamma;
  tc.loss.num_scales = a.scales;
  tc.loss.automask = a.automask;
  tc.range = DepthRange::make(m.d_min, m.d_max);
  CCNeXt<F> model(model_config(m, data[0].left.dim(2), data[0].left.dim(3), data[0].camera), g.seed);
  const auto r = train(model, data, tc, held, [](const LossRecord& rec) {
    if (rec.step % 50 == 0) std::printf("step %ld epoch %d loss %.6f mask %.3f\n", rec.step, rec.epoch, rec.total, rec.mask_fraction);
  });
  save_parameters(model.parameters(), a.out);
  if (!a.trace.empty()) write_loss_trace_csv(a.trace, r.trace);
  if (!a.terms.empty()) write_loss_terms_csv(a.terms, r.trace);
  for (const auto& e : r.evals) std::printf("eval step %ld epe %.4f\n", e.step, e.epe);
  std::printf("steps %zu final loss %.6f checkpoint %s\n", r.trace.size(), r.trace.empty() ? 0.0 : r.trace.back().total,
              a.out.c_str());
  return 0;
}

int cmd_infer(const Globals& g, const ModelArgs& m, const InferArgs& a) {
  require(a.manifest, "infer", "--manifest");
  require(a.checkpoint, "infer", "--checkpoint");
  require(a.out, "infer", "--out");
  const auto descs = load_manifest(a.manifest);
  if (descs.empty()) throw DomainError("infer: manifest lists no samples");
  DepthConvention conv;
  if (a.convention == "direct")
    conv = DepthConvention::direct;
  else if (a.convention == "kitti")
    conv = DepthConvention::kitti;
  else
    throw DomainError("infer: --convention must be direct or kitti");
  if (a.view != "left" && a.view != "right") throw DomainError("infer: --view must be left or right");
  const View view = a.view == "left" ? View::left : View::right;
  const auto first = load_sample<F>(descs[0]);
  CCNeXt<F> model(model_config(m, first.left.dim(2), first.left.dim(3), first.camera), g.seed);
  load_parameters(model.parameters(), a.checkpoint);
  const DepthRange range = DepthRange::make(m.d_min, m.d_max);
  fs::create_directories(a.out);
  for (const auto& d : descs) {
    const auto s = load_sample<F>(d);
    const auto r = infer(model, s.left, s.right, s.camera, range, conv, view);
    write_png_gray16((fs::path(a.out) / (d.id + "_disp.png")).string(), encode_disparity16(r.disparity));
    write_pfm((fs::path(a.out) / (d.id + "_depth.pfm")).string(), r.depth.meters);
  }
  std::printf("inferred %zu pairs into %s\n", descs.size(), a.out.c_str());
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  require(a.manifest, "eval", "--manifest");
  require(a.pred, "eval", "--pred");
  require(a.out, "eval", "--out");
  const auto descs = load_manifest(a.manifest);
  if (descs.empty()) throw DomainError("eval: manifest lists no samples");
  // --pred is either a directory of <id>_disp.{png,pfm} files or a manifest
  // whose ground truth serves as the prediction
  std::map<std::string, fs::path> pred_files;
  if (fs::is_regular_file(a.pred)) {
    for (const auto& d : load_manifest(a.pred)) {
      if (!d.gt_disparity) throw DomainError("eval: prediction manifest entry '" + d.id + "' has no gt_disparity");
      pred_files[d.id] = *d.gt_disparity;
    }
  } else if (!fs::is_directory(a.pred)) {
    throw IoError("eval: --pred '" + a.pred + "' is neither a directory nor a manifest");
  }
  auto pred_path = [&](const std::string& id) {
    if (!pred_files.empty()) {
      auto it = pred_files.find(id);
      if (it == pred_files.end()) throw DomainError("eval: no prediction for '" + id + "'");
      return it->second;
    }
    for (const char* ext : {"_disp.png", "_disp.pfm"}) {
      const fs::path p = fs::path(a.pred) / (id + ext);
      if (fs::exists(p)) return p;
    }
    throw IoError("eval: no prediction file for '" + id + "' in '" + a.pred + "'");
  };
  const EvalRange range{a.min_depth, a.max_depth};
  std::vector<MetricRow> rows(descs.size());
  std::vector<std::string> errors(descs.size());
  parallel_for(descs.size(), [&](std::size_t i) {
    try {
      const auto& d = descs[i];
      if (!d.gt_disparity) throw DomainError("eval: sample '" + d.id + "' has no ground truth");
      const Tensor<double> gt = load_disparity<double>(*d.gt_disparity);
      const Tensor<double> pred = load_disparity<double>(pred_path(d.id));
      if (pred.shape() != gt.shape())
        throw ShapeError("eval: prediction for '" + d.id + "' is " + to_string(pred.shape()) + ", ground truth " +
                         to_string(gt.shape()));
      const StereoCamera cam{d.fx, d.cx, d.cy, d.baseline_m, gt.dim(3), gt.dim(2)};
      const Tensor<double> crop = garg_crop_mask<double>(gt.dim(2), gt.dim(3), a.garg_crop);
      const Tensor<double> gt_depth = disparity_depth_convert(gt, cam, Conversion::disparity_to_depth);
      const Tensor<double> pred_depth =
          clamp_depth(disparity_depth_convert(pred, cam, Conversion::disparity_to_depth), range);
      MetricRow row;
      row.image = d.id;
      row.depth = depth_metrics(pred_depth, gt_depth, mul(depth_valid_mask(gt_depth, range), crop));
      row.disparity = disparity_metrics(pred, gt, mul(gt_valid_mask(gt), crop));
      rows[i] = row;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (const auto& e : errors)
    if (!e.empty()) throw Error(e);
  MetricReport rep;
  for (auto& r : rows) rep.add(std::move(r));
  rep.write_csv(a.out);
  std::printf("images %zu  abs_rel median %.6f  epe median %.4f  report %s\n", rep.n_images(), rep.median(0),
              rep.median(7), a.out.c_str());
  return 0;
}

int cmd_flops(const FlopsArgs& a) {
  const auto s = parse_ints(a.shape, "--shape");
  if (s.size() != 4) throw DomainError("flops: --shape needs four integers N,C,H,W");
  for (auto v : s)
    if (v <= 0) throw DomainError("flops: --shape entries must be positive");
  const std::array<std::int64_t, 4> shape{s[0], s[1], s[2], s[3]};
  const std::int64_t c_in = a.c_in > 0 ? a.c_in : shape[1];
  MacConvention mac;
  if (a.mac == "one")
    mac = MacConvention::one_flop;
  else if (a.mac == "two")
    mac = MacConvention::two_flops;
  else if (a.mac == "mixed")
    mac = MacConvention::mixed;
  else
    throw DomainError("flops: --mac must be one, two or mixed");
  std::int64_t window = shape[3];
  if (a.window != "full") {
    const auto w = parse_ints(a.window, "--window");
    if (w.size() != 1) throw DomainError("flops: --window takes 'full' or one integer");
    window = w[0];
  }
  const auto full = flop_count_cross_attention(shape, c_in, shape[3], mac);
  const auto win = flop_count_cross_attention(shape, c_in, window, mac);
  const std::string shape_s = std::to_string(shape[0]) + "x" + std::to_string(shape[1]) + "x" +
                              std::to_string(shape[2]) + "x" + std::to_string(shape[3]);
  std::ostringstream os;
  os << "module,shape,window,convention,projections,qk,av,flops,ratio_to_full\n";
  auto row = [&](const char* module, std::int64_t w, const AttentionFlops& f) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%lld,mac=%s,%.0f,%.0f,%.0f,%.0f,%.9g\n", module, shape_s.c_str(),
                  static_cast<long long>(w), a.mac.c_str(), f.projections, f.qk, f.av, f.total(),
                  f.total() / full.total());
    os << buf;
  };
  row("full_row", shape[3], full);
  row("windowed", window, win);
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream f(a.out);
    if (!(f << os.str())) throw IoError("flops: cannot write '" + a.out + "'");
  }
  return 0;
}

int cmd_compare(const CompareArgs& a) {
  if (a.reports.size() < 2) throw DomainError("compare: need at least two reports");
  std::vector<std::string> names = a.names;
  if (names.empty())
    for (const auto& r : a.reports) names.push_back(fs::path(r).stem().string());
  std::vector<MetricReport> reps;
  for (const auto& r : a.reports) reps.push_back(MetricReport::read_csv(r));
  const auto rows = compare_models(reps, names, a.alpha, a.reference);
  if (a.out.empty()) {
    write_comparison_csv(std::cout, rows);
  } else {
    write_comparison_csv(a.out, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CCNeXt stereo depth: data, training, inference, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();  // globals may follow the subcommand name
  Globals g;
  app.add_option("--config", g.config, "key=value file; command-line flags take precedence")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);

  GenArgs gen;
  auto* sgen = app.add_subcommand("gen", "write synthetic stereo pairs, ground truth and a manifest");
  sgen->add_option("--n", gen.n, "number of pairs");
  sgen->add_option("--out", gen.out, "output directory");
  sgen->add_option("--width", gen.width);
  sgen->add_option("--height", gen.height);
  sgen->add_option("--max-disparity", gen.max_disparity, "largest integer disparity, below width/4");
  sgen->add_option("--layers", gen.layers, "fronto-parallel planes per scene");
  sgen->add_option("--octaves", gen.octaves, "value-noise octaves");

  ModelArgs model;
  auto add_model = [&](CLI::App* s) {
    s->add_option("--preset", model.preset, "toy or pico");
    s->add_option("--d-min", model.d_min, "smallest depth of the sigmoid range");
    s->add_option("--d-max", model.d_max, "largest depth of the sigmoid range");
  };

  TrainArgs tr;
  auto* strain = app.add_subcommand("train", "self-supervised training");
  add_model(strain);
  strain->add_option("--manifest", tr.manifest);
  strain->add_option("--heldout", tr.heldout, "manifest with ground truth for periodic EPE");
  strain->add_option("--out", tr.out, "checkpoint path");
  strain->add_option("--trace", tr.trace, "per-step loss CSV");
  strain->add_option("--terms", tr.terms, "per-step, per-scale, per-view loss CSV");
  strain->add_option("--batch", tr.batch);
  strain->add_option("--epochs", tr.epochs);
  strain->add_option("--lr", tr.lr);
  strain->add_option("--lr-decay-epoch", tr.lr_decay_epoch, "default: half of --epochs");
  strain->add_option("--lr-after-decay", tr.lr_after_decay);
  strain->add_option("--max-steps", tr.max_steps, "0 runs every epoch");
  strain->add_option("--eval-every", tr.eval_every);
  strain->add_option("--grad-clip", tr.grad_clip, "global norm, 0 disables");
  strain->add_option("--alpha", tr.alpha);
  strain->add_option("--gamma", tr.gamma);
  strain->add_option("--scales", tr.scales);
  strain->add_option("--automask", tr.automask);

  InferArgs inf;
  auto* sinfer = app.add_subcommand("infer", "disparity PNGs and depth PFMs for every pair");
  add_model(sinfer);
  sinfer->add_option("--manifest", inf.manifest);
  sinfer->add_option("--checkpoint", inf.checkpoint);
  sinfer->add_option("--out", inf.out);
  sinfer->add_option("--convention", inf.convention, "direct or kitti");
  sinfer->add_option("--view", inf.view, "left or right");

  EvalArgs ev;
  auto* seval = app.add_subcommand("eval", "per-image depth and disparity metrics");
  seval->add_option("--manifest", ev.manifest, "ground truth manifest");
  seval->add_option("--pred", ev.pred, "directory of <id>_disp files, or a manifest");
  seval->add_option("--out", ev.out, "report CSV");
  seval->add_option("--garg-crop", ev.garg_crop);
  seval->add_option("--min-depth", ev.min_depth);
  seval->add_option("--max-depth", ev.max_depth);

  FlopsArgs fl;
  auto* sflops = app.add_subcommand("flops", "cross-attention FLOPs, full row against a window");
  sflops->add_option("--shape", fl.shape, "N,C,H,W");
  sflops->add_option("--window", fl.window, "'full' or candidate count");
  sflops->add_option("--c-in", fl.c_in, "projection width, default C");
  sflops->add_option("--mac", fl.mac, "FLOPs per multiply-add: one, two, or mixed (convs one, attention two)");
  sflops->add_option("--out", fl.out, "CSV path, default stdout");

  CompareArgs cmp;
  auto* scmp = app.add_subcommand("compare", "medians, Wilcoxon and Bonferroni over metric reports");
  scmp->add_option("reports", cmp.reports, "MetricReport CSVs")->required()->check(CLI::ExistingFile);
  scmp->add_option("--names", cmp.names, "comma-separated, one per report")->delimiter(',');
  scmp->add_option("--alpha", cmp.alpha);
  scmp->add_option("--reference", cmp.reference, "index of the reference report");
  scmp->add_option("--out", cmp.out, "CSV path, default stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (!g.config.empty()) apply_config(g.config, app, *sub);
    set_num_threads(g.threads);
    if (sub == sgen) return cmd_gen(g, gen);
    if (sub == strain) return cmd_train(g, model, tr);
    if (sub == sinfer) return cmd_infer(g, model, inf);
    if (sub == seval) return cmd_eval(ev);
    if (sub == sflops) return cmd_flops(fl);
    if (sub == scmp) return cmd_compare(cmp);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
