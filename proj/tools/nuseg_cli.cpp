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
#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "nuseg/config.hpp"
#include "nuseg/data/io.hpp"
#include "nuseg/data/pannuke.hpp"
#include "nuseg/data/synthetic.hpp"
#include "nuseg/inference/serialize.hpp"
#include "nuseg/overlay.hpp"
#include "nuseg/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace nuseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

/// Output directories are staged in a sibling temp dir and swapped in only
/// on success, so a failing rerun never leaves a half-written result.
class StagedDir {
 public:
  explicit StagedDir(const std::string& target)
      : final_(target), tmp_(target + ".tmp-" + std::to_string(::getpid())) {
    if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~StagedDir() {
    std::error_code ec;
    fs::remove_all(tmp_, ec);
  }
  const fs::path& dir() const { return tmp_; }
  std::string file(const std::string& name) const { return (tmp_ / name).string(); }
  void commit() {
    if (fs::exists(final_)) fs::remove_all(final_);
    fs::rename(tmp_, final_);
  }

 private:
  fs::path final_, tmp_;
};

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!config_path.empty()) load_config_file(cfg, config_path);
  for (const std::string& kv : overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_key(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

void write_echo(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  out << echo_config(cfg);
  if (!out) throw IoError("cannot write config echo: " + path);
}

std::vector<std::string> collect_images(const std::string& input) {
  std::vector<std::string> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".png") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  } else if (fs::exists(input)) {
    files.push_back(input);
  } else {
    throw IoError("input not found: " + input);
  }
  if (files.empty()) throw IoError("no .png images under " + input);
  return files;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data_root, const std::string& out_dir,
              const std::string& resume) {
  RunConfig cfg = resolve_config(config_path, overrides);
  WarningSink warnings;
  Dataset ds = load_dataset(data_root, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

  ModelConfig mcfg = make_model_config(cfg, ds.num_classes());
  TrainConfig tcfg = make_train_config(cfg);
  InferConfig icfg = make_infer_config(cfg);

  StagedDir staged(out_dir);
  write_echo(cfg, staged.file("config_echo.txt"));
  TrainResult result = train(ds, mcfg, tcfg, icfg, staged.dir().string(), config_as_map(cfg),
                             &std::cout, resume);
  std::cout << "best epoch " << result.best_epoch << " val_bpq " << result.best_val_bpq << "\n"
            << "checkpoints: " << fs::path(out_dir) / "best.ckpt" << ", "
            << fs::path(out_dir) / "final.ckpt" << "\n";
  staged.commit();
  return kExitOk;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& overrides,
             const std::string& ckpt_path, const std::string& data_root,
             const std::string& out_dir, bool gt_identity) {
  RunConfig cfg = resolve_config(config_path, overrides);
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  WarningSink warnings;
  Dataset ds = load_dataset(data_root, &warnings);

  EvalReport report = evaluate(*ckpt.net, ds, make_infer_config(cfg), gt_identity);
  StagedDir staged(out_dir);
  write_echo(cfg, staged.file("config_echo.txt"));
  {
    std::ofstream t(staged.file("report.txt"));
    t << report_to_text(report);
    std::ofstream k(staged.file("report.kv"));
    k << report_to_kv(report);
    if (!t || !k) throw IoError("cannot write reports under " + out_dir);
  }
  std::cout << report_to_text(report);
  staged.commit();
  return kExitOk;
}

int cmd_infer(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& ckpt_path, const std::string& input, const std::string& out_dir,
              bool no_nms) {
  RunConfig cfg = resolve_config(config_path, overrides);
  if (no_nms) cfg.use_nms = false;
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  InferConfig icfg = make_infer_config(cfg);
  SlidingConfig scfg;
  scfg.tile = icfg.tile;
  scfg.overlap = icfg.overlap;
  scfg.decode = icfg.decode;

  const std::vector<std::string> files = collect_images(input);
  StagedDir staged(out_dir);
  write_echo(cfg, staged.file("config_echo.txt"));
  for (const std::string& file : files) {
    const std::string stem = fs::path(file).stem().string();
    Image img = read_png_rgb(file);
    auto fwd = [&](const Tensor& t) { return ckpt.net->forward_infer(t); };
    std::vector<InstancePrediction> preds = predict_sliding(img, fwd, scfg);
    save_predictions(staged.file(stem), preds, img.height, img.width);
    std::vector<int> classes;
    for (const auto& p : preds) classes.push_back(p.cls);
    Image overlay = render_overlay(img, render_label_map(preds, img.height, img.width), classes);
    write_png_rgb(staged.file(stem + "_overlay.png"), overlay);
    std::cout << stem << ": " << preds.size() << " instances\n";
  }
  staged.commit();
  return kExitOk;
}

int cmd_bench(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& ckpt_path, int size, int repeats, const std::string& out_path) {
  RunConfig cfg = resolve_config(config_path, overrides);
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  InferConfig icfg = make_infer_config(cfg);
  SlidingConfig scfg;
  scfg.tile = icfg.tile;
  scfg.overlap = icfg.overlap;
  scfg.decode = icfg.decode;

  Rng rng(cfg.seed);
  Image img(size, size);
  for (auto& v : img.rgb) v = static_cast<float>(rng.uniform(0.0, 1.0));

  using Clock = std::chrono::steady_clock;
  std::vector<double> total_s(static_cast<size_t>(repeats)), forward_s(static_cast<size_t>(repeats));
  for (int r = 0; r < repeats; ++r) {
    double fwd_time = 0.0;
    auto fwd = [&](const Tensor& t) {
      const auto t0 = Clock::now();
      NetworkOutput out = ckpt.net->forward_infer(t);
      fwd_time += std::chrono::duration<double>(Clock::now() - t0).count();
      return out;
    };
    const auto t0 = Clock::now();
    auto preds = predict_sliding(img, fwd, scfg);
    total_s[static_cast<size_t>(r)] = std::chrono::duration<double>(Clock::now() - t0).count();
    forward_s[static_cast<size_t>(r)] = fwd_time;
    (void)preds;
  }
  auto stats = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::make_pair(mean, std::sqrt(var / static_cast<double>(v.size())));
  };
  std::ostringstream os;
  const auto [tm, ts] = stats(total_s);
  const auto [fm, fsd] = stats(forward_s);
  std::vector<double> decode_s(total_s.size());
  for (size_t i = 0; i < total_s.size(); ++i) decode_s[i] = total_s[i] - forward_s[i];
  const auto [dm, dsd] = stats(decode_s);
  os.precision(4);
  os << std::fixed;
  os << "image " << size << "x" << size << ", repeats " << repeats << "\n";
  os << "total   mean " << tm << " s  stddev " << ts << " s\n";
  os << "forward mean " << fm << " s  stddev " << fsd << " s\n";
  os << "decode  mean " << dm << " s  stddev " << dsd << " s\n";
  std::cout << os.str();
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << echo_config(cfg) << "\n" << os.str();
    if (!out) throw IoError("cannot write bench output: " + out_path);
  }
  return kExitOk;
}

int cmd_synth(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
  RunConfig cfg = resolve_config(config_path, overrides);
  WarningSink warnings;
  Dataset ds = generate_synthetic(make_synth_config(cfg), &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  StagedDir staged(out_dir);
  write_echo(cfg, staged.file("config_echo.txt"));
  save_dataset(staged.dir().string(), ds);
  int64_t instances = 0;
  for (const auto& s : ds.samples) instances += s.annotation.num_instances();
  std::cout << "wrote " << ds.samples.size() << " images, " << instances << " instances to "
            << out_dir << "\n";
  staged.commit();
  return kExitOk;
}

int cmd_import_pannuke(const std::string& images_npy, const std::string& masks_npy,
                       const std::string& out_dir) {
  StagedDir staged(out_dir);
  Dataset ds = import_pannuke(images_npy, masks_npy, staged.dir().string());
  int64_t instances = 0;
  for (const auto& s : ds.samples) instances += s.annotation.num_instances();
  std::cout << "imported " << ds.samples.size() << " images, " << instances << " instances\n";
  staged.commit();
  return kExitOk;
}

int cmd_render_overlay(const std::string& image_path, const std::string& instances_path,
                       const std::string& sidecar_path, const std::string& out_path,
                       const std::string& gt_instances_path, const std::string& gt_classes_path) {
  Image img = read_png_rgb(image_path);
  std::string base = instances_path;
  if (base.size() > 4 && base.substr(base.size() - 4) == ".png") base.resize(base.size() - 4);
  ImagePredictions pred = load_predictions(base);
  (void)sidecar_path;  // path derived from the instances stem
  Image overlay = render_overlay(img, pred.label_map, pred.classes);
  if (!gt_instances_path.empty()) {
    int h = 0, w = 0;
    std::vector<int32_t> gt_map = read_png_gray16(gt_instances_path, &h, &w);
    std::vector<uint8_t> gt_cls = read_png_gray8(gt_classes_path, &h, &w);
    int32_t max_id = 0;
    for (int32_t v : gt_map) max_id = std::max(max_id, v);
    std::vector<int> class_of(static_cast<size_t>(max_id), 1);
    for (size_t i = 0; i < gt_map.size(); ++i)
      if (gt_map[i] > 0 && gt_cls[i] > 0) class_of[static_cast<size_t>(gt_map[i]) - 1] = gt_cls[i];
    Image gt_overlay = render_overlay(img, gt_map, class_of);
    overlay = side_by_side(gt_overlay, overlay);
  }
  write_png_rgb(out_path, overlay);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keypoint-driven nuclei instance segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, data_root, out_dir, ckpt_path, input, resume;
  std::vector<std::string> overrides;
  bool gt_identity = false, no_nms = false;
  int bench_size = 1000, bench_repeats = 10;
  std::string bench_out;
  std::string images_npy, masks_npy;
  std::string image_path, instances_path, sidecar_path, gt_instances, gt_classes;

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key = value lines)");
    cmd->add_option("--set", overrides, "override a config key (key=value, repeatable)");
  };

  CLI::App* t = app.add_subcommand("train", "train a model on a dataset directory");
  add_config_opts(t);
  t->add_option("--data", data_root, "dataset root")->required();
  t->add_option("--out", out_dir, "output directory")->required();
  t->add_option("--resume", resume, "checkpoint to resume from");

  CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_config_opts(e);
  e->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  e->add_option("--data", data_root, "dataset root")->required();
  e->add_option("--out", out_dir, "output directory")->required();
  e->add_flag("--gt-identity", gt_identity, "bypass the model: score ground truth against itself");

  CLI::App* i = app.add_subcommand("infer", "run inference on an image or directory");
  add_config_opts(i);
  i->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  i->add_option("--input", input, "png file or directory of pngs")->required();
  i->add_option("--out", out_dir, "output directory")->required();
  i->add_flag("--no-nms", no_nms, "disable matrix NMS");

  CLI::App* b = app.add_subcommand("bench", "time sliding-window inference");
  add_config_opts(b);
  b->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  b->add_option("--size", bench_size, "square image size")->default_val(1000);
  b->add_option("--repeats", bench_repeats, "number of timed runs")->default_val(10);
  b->add_option("--out", bench_out, "also write results to this file");

  CLI::App* s = app.add_subcommand("synth", "generate a synthetic dataset");
  add_config_opts(s);
  s->add_option("--out", out_dir, "output dataset directory")->required();

  CLI::App* p = app.add_subcommand("import-pannuke", "convert patch blobs to the dataset format");
  p->add_option("--images", images_npy, "images .npy (N,H,W,3)")->required();
  p->add_option("--masks", masks_npy, "masks .npy (N,H,W,C+1)")->required();
  p->add_option("--out", out_dir, "output dataset directory")->required();

  CLI::App* r = app.add_subcommand("render-overlay", "draw prediction boundaries over an image");
  r->add_option("--image", image_path, "input image png")->required();
  r->add_option("--instances", instances_path, "prediction label map png")->required();
  r->add_option("--sidecar", sidecar_path, "prediction sidecar tsv");
  r->add_option("--out", out_dir, "output png path")->required();
  r->add_option("--gt-instances", gt_instances, "gt label map png for a side-by-side panel");
  r->add_option("--gt-classes", gt_classes, "gt class map png for the panel");

  try {
    app.parse(argc, argv);
    if (t->parsed()) return cmd_train(config_path, overrides, data_root, out_dir, resume);
    if (e->parsed())
      return cmd_eval(config_path, overrides, ckpt_path, data_root, out_dir, gt_identity);
    if (i->parsed()) return cmd_infer(config_path, overrides, ckpt_path, input, out_dir, no_nms);
    if (b->parsed())
      return cmd_bench(config_path, overrides, ckpt_path, bench_size, bench_repeats, bench_out);
    if (s->parsed()) return cmd_synth(config_path, overrides, out_dir);
    if (p->parsed()) return cmd_import_pannuke(images_npy, masks_npy, out_dir);
    if (r->parsed())
      return cmd_render_overlay(image_path, instances_path, sidecar_path, out_dir, gt_instances,
                                gt_classes);
    return kExitConfig;
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kExitOk : kExitConfig;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& err) {
    std::cerr << "numerical abort: " << err.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& err) {
    std::cerr << "io error: " << err.what() << "\n";
    return kExitIo;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitIo;
  }
}
