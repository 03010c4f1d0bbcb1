#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ccnext/checkpoint.hpp"
#include "ccnext/losses.hpp"
#include "ccnext/metrics.hpp"
#include "ccnext/optim.hpp"
#include "ccnext/synthetic.hpp"

namespace ccnext {

struct TrainConfig {
  int batch_size = 8;
  int epochs = 30;
  double lr = 1e-4;
  int lr_decay_epoch = 15;
  double lr_after_decay = 1e-5;
  std::uint64_t seed = 0;
  int eval_every = 0;      // steps between held-out evaluations; 0 disables
  double grad_clip = 0.0;  // global norm; 0 disables
  int max_steps = 0;       // stop early after this many steps; 0 runs all epochs
  LossConfig loss;
  DepthRange range;

  void validate() const {
    if (batch_size < 1) throw DomainError("train config: batch_size must be >= 1");
    if (epochs < 1) throw DomainError("train config: epochs must be >= 1");
    if (!(lr >= 0)) throw DomainError("train config: lr must be >= 0");
    if (!(lr_after_decay >= 0 && lr_after_decay <= lr))
      throw DomainError("train config: lr_after_decay must lie in [0, lr]");
    if (lr_decay_epoch < 0 || lr_decay_epoch > epochs)
      throw DomainError("train config: lr_decay_epoch must lie in [0, epochs]");
    if (!(grad_clip >= 0)) throw DomainError("train config: grad_clip must be >= 0");
    loss.validate();
  }
};

struct LossRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  double total = 0;
  double pe_l = 0;
  double pe_r = 0;
  double smooth_l = 0;
  double smooth_r = 0;
  double mask_fraction = 0;
  std::vector<LossTerm> terms;
};

struct EvalRecord {
  long step = 0;
  double epe = 0;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::vector<EvalRecord> evals;
};

/// Concatenates (1,C,H,W) tensors along the batch axis. No history.
template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw DomainError("stack_batch: no items");
  Shape s = items[0].shape();
  std::vector<T> v;
  v.reserve(items.size() * items[0].size());
  for (const auto& t : items) {
    if (t.shape() != items[0].shape())
      throw ShapeError("stack_batch: " + to_string(t.shape()) + " vs " + to_string(items[0].shape()));
    v.insert(v.end(), t.vec().begin(), t.vec().end());
  }
  s[0] = static_cast<int>(items.size()) * items[0].dim(0);
  return Tensor<T>(std::move(s), std::move(v));
}

template <class T>
struct InferenceResult {
  Tensor<T> disparity;  // (N,1,H,W) pixels at full resolution
  MetricDepth<T> depth;
};

/// Full-resolution disparity and metric depth for one view.
template <class T>
InferenceResult<T> infer(const CCNeXt<T>& model, const Tensor<T>& left, const Tensor<T>& right,
                         const StereoCamera& cam, const DepthRange& range, DepthConvention convention,
                         View view = View::left) {
  if (convention == DepthConvention::kitti && std::abs(cam.baseline_m - 0.1) > 1e-9)
    throw DomainError("infer: the kitti convention expects the 0.1 stand-in baseline, camera has " +
                      std::to_string(cam.baseline_m));
  NoGradGuard ng;
  const auto out = model.forward(left, right, view == View::left, view == View::right);
  const Tensor<T>& sigma = (view == View::left ? out.left : out.right)->sigmoids[0];
  InferenceResult<T> r;
  r.disparity = sigmoid_to_disparity(sigma, cam, range);
  if (convention == DepthConvention::kitti)
    r.depth = kitti_depth_rescale(MetricDepth<T>{sigmoid_to_depth(sigma, range), false});
  else
    r.depth = MetricDepth<T>{disparity_depth_convert(r.disparity, cam, Conversion::disparity_to_depth), false};
  return r;
}

/// Mean per-image EPE of the left-view disparity on samples with ground truth.
template <class T>
double evaluate_epe(const CCNeXt<T>& model, const std::vector<SamplePair<T>>& samples, const DepthRange& range) {
  if (samples.empty()) throw DomainError("evaluate_epe: no samples");
  double total = 0;
  for (const auto& s : samples) {
    if (!s.gt_disparity) throw DomainError("evaluate_epe: sample '" + s.id + "' has no ground truth");
    const auto r = infer(model, s.left, s.right, s.camera, range, DepthConvention::direct);
    total += disparity_metrics(r.disparity, *s.gt_disparity, gt_valid_mask(*s.gt_disparity)).epe;
  }
  return total / static_cast<double>(samples.size());
}

/// Epoch-local visiting order, reproducible from (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch) + 1);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  return epoch < cfg.lr_decay_epoch ? cfg.lr : cfg.lr_after_decay;
}

/// Photometric training over both views. All samples must share one camera.
template <class T>
TrainResult train(CCNeXt<T>& model, const std::vector<SamplePair<T>>& data, const TrainConfig& cfg,
                  const std::vector<SamplePair<T>>& heldout = {},
                  const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw DomainError("train: dataset is empty");
  if (cfg.loss.num_scales > model.config().num_output_scales)
    throw DomainError("train: loss uses more scales than the model outputs");
  const StereoCamera cam = data[0].camera;
  for (const auto& s : data)
    if (s.camera.fx != cam.fx || s.camera.baseline_m != cam.baseline_m)
      throw DomainError("train: sample '" + s.id + "' has a different camera");

  auto& params = model.parameters();
  TrainResult res;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    const auto order = epoch_permutation(data.size(), cfg.seed, epoch);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps && step >= cfg.max_steps) return res;
      std::vector<Tensor<T>> ls, rs;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) {
        ls.push_back(data[order[k]].left);
        rs.push_back(data[order[k]].right);
      }
      const Tensor<T> left = stack_batch(ls), right = stack_batch(rs);
      params.zero_grad();
      LossResult<T> loss;
      try {
        const auto out = model.forward(left, right);
        loss = total_loss(left, right, *out.left, *out.right, cam, cfg.range, cfg.loss);
      } catch (const Error& e) {
        throw Error("train: step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + "): " + e.what());
      }

      LossRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.total = loss.total.item();
      for (const auto& t : loss.terms) {
        (t.view == View::left ? rec.pe_l : rec.pe_r) += t.pe / cfg.loss.num_scales;
        (t.view == View::left ? rec.smooth_l : rec.smooth_r) += t.smooth / cfg.loss.num_scales;
        rec.mask_fraction += t.mask_fraction / static_cast<double>(loss.terms.size());
      }
      rec.terms = loss.terms;
      if (!std::isfinite(rec.total)) {
        std::ostringstream msg;
        msg << "train: non-finite loss at step " << step << " (epoch " << epoch << ")";
        for (const auto& t : loss.terms)
          msg << "; scale " << t.scale << (t.view == View::left ? " left" : " right") << " pe=" << t.pe
              << " smooth=" << t.smooth << " mask=" << t.mask_fraction;
        throw Error(msg.str());
      }
      loss.total.backward();
      if (cfg.grad_clip > 0) clip_grad_norm(params, cfg.grad_clip);
      adam_step(params, AdamOptions{lr});
      res.trace.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
      if (cfg.eval_every > 0 && !heldout.empty() && step % cfg.eval_every == 0)
        res.evals.push_back({step, evaluate_epe(model, heldout, cfg.range)});
    }
  }
  return res;
}

inline void write_loss_trace_csv(const std::string& path, const std::vector<LossRecord>& trace) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write loss trace '" + path + "'");
  os << "step,epoch,lr,total,pe_l,pe_r,smooth_l,smooth_r,mask_fraction\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%ld,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.epoch, r.lr, r.total, r.pe_l,
                  r.pe_r, r.smooth_l, r.smooth_r, r.mask_fraction);
    os << buf;
  }
}

/// One row per step, scale and view.
inline void write_loss_terms_csv(const std::string& path, const std::vector<LossRecord>& trace) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write loss diagnostics '" + path + "'");
  os << "step,scale,view,pe,smooth,mask_fraction\n";
  char buf[160];
  for (const auto& r : trace)
    for (const auto& t : r.terms) {
      std::snprintf(buf, sizeof buf, "%ld,%d,%s,%.9g,%.9g,%.9g\n", r.step, t.scale,
                    t.view == View::left ? "left" : "right", t.pe, t.smooth, t.mask_fraction);
      os << buf;
    }
}

/// Trailing moving average of the total loss.
inline std::vector<double> smoothed_loss(const std::vector<LossRecord>& trace, std::size_t window) {
  std::vector<double> out;
  double acc = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    acc += trace[i].total;
    if (i >= window) acc -= trace[i - window].total;
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

}  // namespace ccnext
