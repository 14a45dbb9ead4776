/* Copyright 2026 The nuseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nuseg/core/parallel.hpp"
#include "nuseg/data/augment.hpp"
#include "nuseg/data/types.hpp"
#include "nuseg/inference/decode.hpp"
#include "nuseg/inference/serialize.hpp"
#include "nuseg/losses/losses.hpp"
#include "nuseg/metrics/metrics.hpp"
#include "nuseg/model/checkpoint.hpp"
#include "nuseg/model/network.hpp"
#include "nuseg/nn/adamw.hpp"
#include "nuseg/targets/heatmap.hpp"

namespace nuseg {

struct InferConfig {
  DecodeConfig decode;
  int tile = 256;
  int overlap = 64;
  double det_radius = 12.0;

  void validate() const {
    if (tile % 32 != 0) throw ConfigError("infer: tile must be a multiple of 32");
    if (overlap < 0 || overlap >= tile) throw ConfigError("infer: overlap must be in [0, tile)");
  }
};

struct TrainConfig {
  int epochs = 100;
  double base_lr = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 8;
  std::vector<int> lr_drop_epochs{80, 90};
  double lr_drop_factor = 0.1;
  uint64_t seed = 0;
  double val_fraction = 0.1;
  double lambda_mask = 1.0;
  float tau = 0.5f;
  double grad_clip = 10.0;
  std::string detector_target = "keypoint-heatmap";  // or centerpoint-map
  std::string detector_loss = "focal";               // or bce
  int workers = 2;
  AugmentConfig augment;

  TargetKind target_kind() const {
    if (detector_target == "keypoint-heatmap") return TargetKind::kKeypointHeatmap;
    if (detector_target == "centerpoint-map") return TargetKind::kCenterpointMap;
    throw ConfigError("unknown detector_target '" + detector_target +
                      "' (keypoint-heatmap|centerpoint-map)");
  }
  DetectorLoss loss_kind() const {
    if (detector_loss == "focal") return DetectorLoss::kFocal;
    if (detector_loss == "bce") return DetectorLoss::kBce;
    throw ConfigError("unknown detector_loss '" + detector_loss + "' (focal|bce)");
  }
  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    for (int e : lr_drop_epochs)
      if (e < 1 || e > epochs)
        throw ConfigError("train: lr drop epoch " + std::to_string(e) + " outside 1.." +
                          std::to_string(epochs));
    if (val_fraction < 0.0 || val_fraction >= 1.0)
      throw ConfigError("train: val_fraction must be in [0,1)");
    if (workers < 1) throw ConfigError("train: workers must be >= 1");
    target_kind();
    loss_kind();
  }
};

/// Step schedule: the base rate multiplied by the drop factor once per drop
/// epoch passed (inclusive). Epochs are 1-based.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.base_lr;
  for (int d : cfg.lr_drop_epochs)
    if (epoch >= d) lr *= cfg.lr_drop_factor;
  return lr;
}

struct EpochLog {
  int epoch = 0;
  double lr = 0.0, keypoint = 0.0, mask = 0.0, total = 0.0, val_bpq = 0.0;
  bool has_val = false;

  std::string line() const {
    std::ostringstream os;
    os << "epoch " << epoch << " lr " << std::setprecision(6) << lr << " keypoint "
       << std::setprecision(8) << keypoint << " mask " << mask << " total " << total;
    if (has_val) os << " val_bpq " << val_bpq;
    return os.str();
  }
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_val_bpq = 0.0;
  int best_epoch = 0;
  std::string best_path, final_path;
};

namespace detail {

inline void pad_to_multiple_of_32(Image& img, InstanceAnnotation& ann) {
  const int h = img.height, w = img.width;
  const int ph = (h + 31) / 32 * 32, pw = (w + 31) / 32 * 32;
  if (ph == h && pw == w) return;
  Image pi(ph, pw);
  InstanceAnnotation pa(ph, pw, ann.num_classes);
  pa.class_of = ann.class_of;
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      const int sy = std::min(y, h - 1), sx = std::min(x, w - 1);
      for (int c = 0; c < 3; ++c) pi.at(y, x, c) = img.at(sy, sx, c);
      if (y < h && x < w) pa.id_at(y, x) = ann.id_at(y, x);
    }
  img = std::move(pi);
  ann = std::move(pa);
}

inline ImagePredictions gt_as_prediction(const Sample& s) {
  ImagePredictions ip;
  ip.height = s.annotation.height;
  ip.width = s.annotation.width;
  ip.label_map = s.annotation.instance_map;
  for (int id = 1; id <= s.annotation.num_instances(); ++id) {
    ip.classes.push_back(s.annotation.class_of[static_cast<size_t>(id) - 1]);
    ip.scores.push_back(1.0f);
    const auto [cx, cy] = instance_center(s.annotation.mask_of(id));
    ip.centers.emplace_back(static_cast<float>(cx), static_cast<float>(cy));
  }
  return ip;
}

}  // namespace detail

/// Sliding-window inference + metric aggregation over a dataset. With
/// gt_identity the ground truth is fed through as the prediction, which
/// exercises the full metric path and must score 1.0 everywhere.
inline EvalReport evaluate(const Network& net, const Dataset& ds, const InferConfig& icfg,
                           bool gt_identity = false) {
  icfg.validate();
  if (ds.samples.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (net.config().num_classes != ds.num_classes())
    throw ConfigError("evaluate: checkpoint has " + std::to_string(net.config().num_classes) +
                      " classes but the dataset manifest lists " +
                      std::to_string(ds.num_classes()));
  SlidingConfig scfg;
  scfg.tile = icfg.tile;
  scfg.overlap = icfg.overlap;
  scfg.decode = icfg.decode;
  std::vector<ImagePredictions> preds(ds.samples.size());
  parallel_chunks(static_cast<int>(ds.samples.size()), worker_count(),
                  [&](int, int begin, int end) {
                    for (int i = begin; i < end; ++i) {
                      const Sample& s = ds.samples[static_cast<size_t>(i)];
                      if (gt_identity) {
                        preds[static_cast<size_t>(i)] = detail::gt_as_prediction(s);
                        continue;
                      }
                      auto fwd = [&](const Tensor& t) { return net.forward_infer(t); };
                      auto instances = predict_sliding(s.image, fwd, scfg);
                      preds[static_cast<size_t>(i)] =
                          to_image_predictions(instances, s.image.height, s.image.width);
                    }
                  });
  EvalConfig ecfg;
  ecfg.pairing_radius = icfg.det_radius;
  return build_eval_report(preds, ds, ecfg);
}

inline EvalReport evaluate(const LoadedCheckpoint& ckpt, const Dataset& ds,
                           const InferConfig& icfg, bool gt_identity = false) {
  return evaluate(*ckpt.net, ds, icfg, gt_identity);
}

/// AdamW optimization with the step schedule, per-epoch validation bPQ, and
/// best/final checkpointing. Deterministic for a fixed config: sample order,
/// augmentation draws, and gradient reduction order depend only on the seed
/// (gradients from the two replicas are summed in replica order).
inline TrainResult train(const Dataset& ds, const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const InferConfig& icfg, const std::string& out_dir,
                         const std::map<std::string, std::string>& run_echo = {},
                         std::ostream* console = nullptr, const std::string& resume_path = "") {
  cfg.validate();
  icfg.validate();
  if (ds.samples.empty()) throw std::invalid_argument("train: empty dataset");
  ModelConfig mcfg = model_cfg;
  if (mcfg.num_classes != ds.num_classes())
    throw ConfigError("train: model num_classes " + std::to_string(mcfg.num_classes) +
                      " != dataset classes " + std::to_string(ds.num_classes()));
  std::filesystem::create_directories(out_dir);

  // --- train / validation split (deterministic in the seed) ---
  std::vector<int> order(ds.samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng split_rng(splitmix64(cfg.seed ^ 0x5eedULL));
  split_rng.shuffle(order);
  const int val_count = std::min<int>(static_cast<int>(order.size()) - 1,
                                      static_cast<int>(std::floor(order.size() * cfg.val_fraction)));
  Dataset train_ds, val_ds;
  train_ds.class_names = val_ds.class_names = ds.class_names;
  for (size_t i = 0; i < order.size(); ++i) {
    const Sample& s = ds.samples[static_cast<size_t>(order[i])];
    if (static_cast<int>(i) < static_cast<int>(order.size()) - val_count)
      train_ds.samples.push_back(s);
    else
      val_ds.samples.push_back(s);
  }

  // --- model replicas (identical init) + optimizer ---
  int start_epoch = 1;
  nn::AdamW opt;
  std::unique_ptr<Network> net_a, net_b;
  if (!resume_path.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume_path);
    mcfg = ck.net->config();
    net_a = std::move(ck.net);
    opt.state() = std::move(ck.adam_state);
    opt.set_step_count(ck.meta.adam_step);
    start_epoch = ck.meta.epoch + 1;
  } else {
    net_a = std::make_unique<Network>(mcfg);
  }
  net_b = std::make_unique<Network>(mcfg);
  nn::ParamList params_a = net_a->params();
  nn::ParamList params_b = net_b->params();
  auto sync_b = [&] {
    for (size_t i = 0; i < params_a.size(); ++i)
      std::copy(params_a[i].value->ptr(), params_a[i].value->ptr() + params_a[i].value->numel(),
                params_b[i].value->ptr());
  };
  sync_b();

  std::ofstream log_file(std::filesystem::path(out_dir) / "training_log.txt", std::ios::app);

  TrainResult result;
  result.best_path = (std::filesystem::path(out_dir) / "best.ckpt").string();
  result.final_path = (std::filesystem::path(out_dir) / "final.ckpt").string();
  result.best_val_bpq = -1.0;

  Network* nets[2] = {net_a.get(), net_b.get()};
  nn::ParamList* plists[2] = {&params_a, &params_b};
  const int replicas = std::min(2, std::max(1, cfg.workers));

  for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    std::vector<int> epoch_order(train_ds.samples.size());
    for (size_t i = 0; i < epoch_order.size(); ++i) epoch_order[i] = static_cast<int>(i);
    Rng epoch_rng = Rng(cfg.seed).split(0xE70C0000ULL + static_cast<uint64_t>(epoch));
    epoch_rng.shuffle(epoch_order);

    double sum_k = 0.0, sum_m = 0.0, sum_t = 0.0;
    int64_t batches = 0;

    for (size_t begin = 0; begin < epoch_order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(epoch_order.size(), begin + static_cast<size_t>(cfg.batch_size));
      const int batch_n = static_cast<int>(end - begin);
      nn::zero_grads(params_a);
      nn::zero_grads(params_b);

      struct WorkerOut {
        double k = 0.0, m = 0.0, t = 0.0;
        std::exception_ptr error;
      };
      WorkerOut wout[2];

      auto run_range = [&](int replica, size_t lo, size_t hi) {
        try {
          Network& net = *nets[replica];
          for (size_t bi = lo; bi < hi; ++bi) {
            const int sample_idx = epoch_order[bi];
            const Sample& s = train_ds.samples[static_cast<size_t>(sample_idx)];
            Rng srng = Rng(cfg.seed).split(0xA0000000ULL +
                                           static_cast<uint64_t>(epoch) * 1000003ULL +
                                           static_cast<uint64_t>(bi));
            auto [img, ann] = cfg.augment.anything_enabled()
                                  ? augment(s.image, s.annotation, cfg.augment, srng)
                                  : std::make_pair(s.image, s.annotation);
            detail::pad_to_multiple_of_32(img, ann);
            HeatmapTarget target = render_heatmap(ann, img.height, img.width, mcfg.stride,
                                                  cfg.tau, cfg.target_kind());
            Tensor x = img.to_tensor();
            NetworkOutput out = net.forward(x);

            Tensor dheat(out.heatmap.shape());
            const double kl = keypoint_loss(cfg.loss_kind(), out.heatmap, target.y, &dheat);
            double ml = 0.0;
            const float gscale = 1.0f / static_cast<float>(batch_n);
            const float mscale = static_cast<float>(cfg.lambda_mask) / static_cast<float>(batch_n);
            for (int64_t i = 0; i < dheat.numel(); ++i) dheat[i] *= gscale;
            if (out.uses_dynamic_masks()) {
              Tensor dk(out.kernels.shape()), df(out.feature.shape());
              ml = mask_loss_dynamic(out.kernels, out.feature, target, ann, &dk, &df);
              for (int64_t i = 0; i < dk.numel(); ++i) dk[i] *= mscale;
              for (int64_t i = 0; i < df.numel(); ++i) df[i] *= mscale;
              net.backward(out, dheat, dk, df);
            } else {
              Tensor dstack(out.standard_logits.shape());
              ml = mask_loss_standard(out.standard_logits, out.stride, target, ann, &dstack);
              for (int64_t i = 0; i < dstack.numel(); ++i) dstack[i] *= mscale;
              net.backward(out, dheat, Tensor(), Tensor(), dstack);
            }
            const double total = kl + cfg.lambda_mask * ml;
            if (!std::isfinite(total))
              throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) +
                                   " sample " + s.name + " (keypoint " + std::to_string(kl) +
                                   ", mask " + std::to_string(ml) + ")");
            wout[replica].k += kl;
            wout[replica].m += ml;
            wout[replica].t += total;
          }
        } catch (...) {
          wout[replica].error = std::current_exception();
        }
      };

      if (replicas == 2 && batch_n > 1) {
        const size_t mid = begin + static_cast<size_t>((batch_n + 1) / 2);
        std::thread tb(run_range, 1, mid, end);
        run_range(0, begin, mid);
        tb.join();
      } else {
        run_range(0, begin, end);
      }
      for (const auto& w : wout)
        if (w.error) std::rethrow_exception(w.error);

      // ordered reduction: replica 0 then replica 1
      for (size_t i = 0; i < params_a.size(); ++i) {
        const Tensor& gb = *(*plists[1])[i].grad;
        Tensor& ga = *(*plists[0])[i].grad;
        for (int64_t j = 0; j < ga.numel(); ++j) ga[j] += gb[j];
      }
      if (cfg.grad_clip > 0.0) nn::clip_grad_norm(params_a, cfg.grad_clip);
      opt.step(params_a, lr, cfg.weight_decay);
      sync_b();

      sum_k += (wout[0].k + wout[1].k) / batch_n;
      sum_m += (wout[0].m + wout[1].m) / batch_n;
      sum_t += (wout[0].t + wout[1].t) / batch_n;
      ++batches;
    }

    EpochLog el;
    el.epoch = epoch;
    el.lr = lr;
    el.keypoint = sum_k / std::max<int64_t>(1, batches);
    el.mask = sum_m / std::max<int64_t>(1, batches);
    el.total = sum_t / std::max<int64_t>(1, batches);
    if (!val_ds.samples.empty()) {
      el.has_val = true;
      el.val_bpq = evaluate(*net_a, val_ds, icfg).bpq;
      if (el.val_bpq > result.best_val_bpq) {
        result.best_val_bpq = el.val_bpq;
        result.best_epoch = epoch;
        CheckpointMeta meta;
        meta.epoch = epoch;
        meta.best_val_bpq = el.val_bpq;
        meta.run_echo = run_echo;
        save_checkpoint(result.best_path, *net_a, meta);
      }
    }
    result.log.push_back(el);
    if (log_file) log_file << el.line() << "\n" << std::flush;
    if (console) (*console) << el.line() << "\n";
  }

  CheckpointMeta meta;
  meta.epoch = cfg.epochs;
  meta.best_val_bpq = std::max(0.0, result.best_val_bpq);
  meta.run_echo = run_echo;
  save_checkpoint(result.final_path, *net_a, meta, &opt);
  if (val_ds.samples.empty()) {
    result.best_val_bpq = 0.0;
    result.best_epoch = cfg.epochs;
    std::filesystem::copy_file(result.final_path, result.best_path,
                               std::filesystem::copy_options::overwrite_existing);
  }
  return result;
}

}  // namespace nuseg
