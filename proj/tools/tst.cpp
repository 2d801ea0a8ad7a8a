// Command-line surface: train, evaluate, profile, benchmark, predict, and a
// built-in selftest. Exit codes: 0 success, 1 usage/configuration, 2
// data/format, 3 numerical failure.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "tst/reference.hpp"
#include "tst/train.hpp"

namespace fs = std::filesystem;
using namespace tst;

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::config:
      return 1;
    case ErrorKind::data:
      return 2;
    case ErrorKind::numeric:
      return 3;
  }
  return 1;
}

std::pair<int64_t, int64_t> parse_shape(const std::string& text) {
  const size_t x = text.find('x');
  TST_REQUIRE(x != std::string::npos && x > 0 && x + 1 < text.size(), usage,
              "shape must look like HxW, e.g. 480x640");
  try {
    return {std::stoll(text.substr(0, x)), std::stoll(text.substr(x + 1))};
  } catch (...) {
    fail(ErrorKind::usage, "shape must look like HxW, e.g. 480x640");
  }
}

// Dataset specs: either "synth:count=16,h=64,w=64,seed=2000,max_depth=10"
// or a directory of paired "<stem>.rgb.tstf" / "<stem>.depth.tstf" files
// (with optional "<stem>.mask.tstf").
std::vector<DepthSample<float>> load_samples(const std::string& spec,
                                             double max_depth) {
  std::vector<DepthSample<float>> out;
  if (spec.rfind("synth:", 0) == 0) {
    std::string text = spec.substr(6);
    for (auto& c : text)
      if (c == ',') c = '\n';
    KeyValueConfig kv = KeyValueConfig::from_text(text);
    const int64_t count = kv.get_int("count", 8);
    const int64_t h = kv.get_int("h", 64);
    const int64_t w = kv.get_int("w", 64);
    const uint64_t seed = uint64_t(kv.get_int("seed", 2000));
    const double md = kv.get_double("max_depth", max_depth);
    TST_REQUIRE(count > 0, data, "synthetic dataset needs count >= 1");
    for (int64_t i = 0; i < count; ++i)
      out.push_back(synth_scene<float>(seed + uint64_t(i), h, w, md));
    return out;
  }

  TST_REQUIRE(fs::is_directory(spec), data,
              "dataset path is neither a synth: spec nor a directory: " +
                  spec);
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(spec)) {
    const std::string name = e.path().filename().string();
    const std::string suffix = ".rgb.tstf";
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      stems.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(stems.begin(), stems.end());
  TST_REQUIRE(!stems.empty(), data,
              "no *.rgb.tstf samples found under " + spec);
  for (const std::string& stem : stems) {
    const std::string base = spec + "/" + stem;
    DepthSample<float> s;
    s.rgb = read_tensor_raw<float>(base + ".rgb.tstf");
    s.depth = read_tensor_raw<float>(base + ".depth.tstf");
    TST_REQUIRE(s.rgb.rank() == 3 && s.rgb.dim(0) == 3, data,
                base + ".rgb.tstf: expected a [3,H,W] tensor");
    TST_REQUIRE(s.depth.rank() == 3 && s.depth.dim(0) == 1 &&
                    s.depth.dim(1) == s.rgb.dim(1) &&
                    s.depth.dim(2) == s.rgb.dim(2),
                data, base + ".depth.tstf: expected a matching [1,H,W] map");
    if (fs::exists(base + ".mask.tstf")) {
      s.mask = read_tensor_raw<float>(base + ".mask.tstf");
      TST_REQUIRE(s.mask.shape() == s.depth.shape(), data,
                  base + ".mask.tstf: mask/depth shape mismatch");
    } else {
      s.mask = Tensor<float>(s.depth.shape(), 1.0f);
    }
    out.push_back(std::move(s));
  }
  return out;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
  TrainConfig cfg = train_config_from_kv(KeyValueConfig::from_file(config_path));
  Trainer trainer(cfg);
  if (!resume.empty()) trainer.resume_from(read_checkpoint(resume));
  std::printf("training %s: %lld epochs, %lld scenes, batch %lld -> %s\n",
              cfg.model.variant.c_str(), (long long)cfg.epochs,
              (long long)cfg.train_scenes, (long long)cfg.batch_size,
              cfg.out_dir.c_str());
  std::vector<EpochLog> logs = trainer.run();
  for (const EpochLog& l : logs) {
    std::string val;
    if (l.has_val) val = "  val_rmse " + std::to_string(l.val.rmse);
    std::printf("epoch %3lld  lr %.3e  loss %.5f%s\n", (long long)l.epoch,
                l.lr, l.train_loss, val.c_str());
  }
  std::printf("final checkpoint: %s/final.tst\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_spec,
             const std::string& crop, double min_depth, double max_depth) {
  Checkpoint ck = read_checkpoint(ckpt_path);
  TSTModel<float> model = model_from_checkpoint(ck);
  EvalProtocol proto;
  proto.min_depth = min_depth;
  proto.max_depth = max_depth > 0 ? max_depth : model.cfg.max_depth;
  if (crop == "eigen")
    proto.crop = CropMode::eigen;
  else
    TST_REQUIRE(crop == "none", usage, "--crop must be none or eigen");

  std::vector<DepthSample<float>> samples =
      load_samples(data_spec, proto.max_depth);
  MetricsAccumulator<float> acc(proto);
  for (const DepthSample<float>& s : samples) {
    Batch<float> b = stack_samples<float>({&s});
    acc.add(model.forward(b.rgb, false), b.depth, b.mask);
  }
  Metrics m = acc.result();
  std::printf("%s\n%s\n", Metrics::csv_header().c_str(),
              m.csv_row(model.cfg.variant).c_str());
  return 0;
}

int cmd_profile(const std::string& variant, const std::string& shape,
                int64_t batch, bool csv) {
  auto [h, w] = parse_shape(shape);
  TSTModel<float> model(ModelConfig::preset(variant));
  ProfileReport rep = model.profile(batch, h, w);
  if (csv)
    std::fputs(rep.csv().c_str(), stdout);
  else
    std::fputs(rep.table().c_str(), stdout);
  std::printf("params %.6gM, macs %.6gG at %lldx3x%lldx%lld\n",
              double(rep.total_params()) / 1e6, double(rep.total_macs()) / 1e9,
              (long long)batch, (long long)h, (long long)w);
  return 0;
}

int cmd_bench(const std::string& variant, const std::string& shape,
              int iters, int warmup, bool csv) {
  auto [h, w] = parse_shape(shape);
  TSTModel<float> model(ModelConfig::preset(variant));
  Rng rng(7);
  Tensor<float> x = Tensor<float>::rand_uniform({1, 3, h, w}, rng);
  model.forward(x, false);  // shape/path validation before timing
  BenchResult r = benchmark_fps([&] { model.forward(x, false); }, warmup,
                                iters);
  if (csv) {
    std::fputs(r.csv().c_str(), stdout);
  } else {
    std::printf("%s at 1x3x%lldx%lld: %.3f fps (mean %.2f ms, p50 %.2f ms, "
                "p95 %.2f ms, %d warmup + %d timed)\n",
                variant.c_str(), (long long)h, (long long)w, r.fps,
                r.mean_ms(), r.percentile_ms(0.50), r.percentile_ms(0.95),
                r.warmup, r.iters);
  }
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& image_path,
                const std::string& out_path) {
  Checkpoint ck = read_checkpoint(ckpt_path);
  TSTModel<float> model = model_from_checkpoint(ck);
  Tensor<float> img = read_tensor_raw<float>(image_path);
  if (img.rank() == 3) img = reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)});
  TST_REQUIRE(img.rank() == 4 && img.dim(0) == 1 && img.dim(1) == 3, data,
              image_path + ": expected a [3,H,W] or [1,3,H,W] rgb tensor");
  const int64_t h = img.dim(2), w = img.dim(3);
  TST_REQUIRE(h % 32 == 0 && w % 32 == 0 && h >= model.cfg.min_input() &&
                  w >= model.cfg.min_input(),
              data,
              image_path + ": sides must be multiples of 32 and at least " +
                  std::to_string(model.cfg.min_input()));
  Tensor<float> pred = model.forward(img, false);
  Tensor<float> plane({1, h, w});
  std::copy(pred.values().begin(), pred.values().end(),
            plane.values().begin());
  if (out_path.size() > 5 &&
      out_path.compare(out_path.size() - 5, 5, ".tstf") == 0)
    write_tensor_raw(out_path, plane);
  else
    write_depth_pgm(out_path, plane);
  std::printf("wrote %s (%lldx%lld depth map)\n", out_path.c_str(),
              (long long)h, (long long)w);
  return 0;
}

// Compact runtime self-check: gradients, kernel oracles, and the frozen
// numeric anchors, printed one line per group.
int cmd_selftest() {
  int failures = 0;
  auto gate = [&](const char* name, bool ok) {
    std::printf("%s %s\n", ok ? "ok  " : "FAIL", name);
    failures += ok ? 0 : 1;
  };

  {
    Rng rng(31);
    auto x = Tensor<double>::randn({2, 3, 7, 7}, rng).set_requires_grad(true);
    auto k = Tensor<double>::randn({4, 3, 3, 3}, rng, 0.3).set_requires_grad(true);
    auto rep = ref::check_gradients({x, k}, [&] {
      return mean(conv2d(x, k, {}, 2, 1, 1));
    });
    gate("conv gradients vs finite differences", rep.ok(1e-3));
  }
  {
    Rng rng(32);
    auto x = Tensor<double>::randn({1, 6, 5, 5}, rng).set_requires_grad(true);
    auto k = Tensor<double>::randn({6, 1, 3, 3}, rng, 0.3).set_requires_grad(true);
    auto rep = ref::check_gradients({x, k}, [&] {
      return mean(conv2d(x, k, {}, 1, 1, 6));
    });
    gate("depthwise conv gradients", rep.ok(1e-3));
  }
  {
    auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<double> up = bilinear_upsample(x, 4, 4);
    const std::vector<double> want = {1,    1.25, 1.75, 2,    1.5,  1.75,
                                      2.25, 2.5,  2.5,  2.75, 3.25, 3.5,
                                      3,    3.25, 3.75, 4};
    bool ok = true;
    for (size_t i = 0; i < want.size(); ++i)
      ok = ok && std::abs(up.values()[i] - want[i]) < 1e-12;
    gate("bilinear interpolation anchor", ok);
  }
  {
    auto pred = Tensor<double>::from_data({1, 1, 1, 2},
                                          {std::exp(1.0), std::exp(2.0)});
    auto gt = Tensor<double>::from_data({1, 1, 1, 2}, {1.0, 1.0});
    Tensor<double> mask(gt.shape(), 1.0);
    const double got = silog_loss(pred, gt, mask, 0.85, 10.0).item();
    gate("scale-invariant loss anchor",
         std::abs(got - 10.0 * std::sqrt(0.5875)) < 1e-12);
  }
  {
    auto gt = Tensor<double>::from_data({1, 1, 1, 3}, {2.0, 4.0, 8.0});
    auto pred = Tensor<double>::from_data({1, 1, 1, 3}, {2.0, 5.0, 4.0});
    Tensor<double> mask(gt.shape(), 1.0);
    Metrics m = compute_metrics(pred, gt, mask, EvalProtocol{});
    gate("threshold metric anchor",
         std::abs(m.delta1 - 1.0 / 3) < 1e-12 &&
             std::abs(m.delta2 - 2.0 / 3) < 1e-12 &&
             std::abs(m.rmse - std::sqrt(17.0 / 3)) < 1e-12);
  }
  {
    bool ok = true;
    for (int it = 0; it < 10 && ok; ++it) {
      Rng rng(100 + uint64_t(it));
      auto p = Tensor<double>::rand_uniform({1, 1, 16, 16}, rng, 0.2, 9.8);
      auto g = Tensor<double>::rand_uniform({1, 1, 16, 16}, rng, 0.2, 9.8);
      Tensor<double> mask(p.shape(), 1.0);
      std::vector<double> pv(p.values().begin(), p.values().end());
      std::vector<double> gv(g.values().begin(), g.values().end());
      std::vector<double> mv(mask.values().begin(), mask.values().end());
      ok = ok && std::abs(silog_loss(p, g, mask).item() -
                          ref::silog(pv, gv, mv, 0.85, 10.0)) < 1e-10;
      ref::RefMetrics rm = ref::metrics(pv, gv);
      Metrics m = compute_metrics(p, g, mask, EvalProtocol{});
      ok = ok && std::abs(m.rmse - rm.rmse) < 1e-10 &&
           std::abs(m.delta2 - rm.delta2) < 1e-10;
    }
    gate("loss and metrics vs loop oracles", ok);
  }
  {
    ModelConfig cfg;
    cfg.local_channels = {8, 12, 16};
    cfg.global_channels = 32;
    cfg.heads = {1, 1, 1};
    cfg.qk_dim = 4;
    cfg.v_dim = 4;
    cfg.decoder_channels = 8;
    TSTModel<float> tiny(cfg);
    Rng rng(33);
    Tensor<float> x = Tensor<float>::rand_uniform({1, 3, 64, 64}, rng);
    auto chk = macs_oracle_check(tiny.profile(1, 64, 64).total_macs(),
                                 [&] { tiny.forward(x, false); });
    gate("instrumented compute count matches the analytic table",
         chk.discrepancy() == 0);
  }
  {
    bool ok = std::abs(lr_schedule(0, 3e-4, 10, 2, 0.5) - 3e-4) < 1e-12 &&
              std::abs(lr_schedule(5, 3e-4, 10, 2, 0.5) - 1.5e-4) < 1e-12 &&
              std::abs(lr_schedule(30, 3e-4, 10, 2, 0.5) - 7.5e-5) < 1e-12;
    gate("schedule anchors", ok);
  }

  if (failures) {
    std::printf("%d selftest group(s) failed\n", failures);
    return 3;
  }
  std::puts("all selftest groups passed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-sharing monocular depth estimation toolkit"};
  app.require_subcommand(1);

  std::string config_path, resume_path;
  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "key = value experiment file")
      ->required();
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  std::string ckpt, data_spec, crop = "none";
  double min_depth = 1e-3, max_depth = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
  eval->add_option("--data", data_spec,
                   "synth:k=v,... spec or a sample directory")
      ->required();
  eval->add_option("--crop", crop, "evaluation crop: none|eigen");
  eval->add_option("--min-depth", min_depth, "lower clamp in meters");
  eval->add_option("--max-depth", max_depth,
                   "upper clamp in meters (default: model range)");

  std::string variant = "tst", shape = "480x640";
  int64_t batch = 1;
  bool csv = false;
  auto* profile = app.add_subcommand("profile",
                                     "analytic parameter and compute table");
  profile->add_option("--variant", variant, "tst or tst-s");
  profile->add_option("--shape", shape, "input shape HxW");
  profile->add_option("--batch", batch, "batch size");
  profile->add_flag("--csv", csv, "emit CSV instead of a table");

  std::string bvariant = "tst", bshape = "480x640";
  int iters = 200, warmup = 20;
  bool bcsv = false;
  auto* bench = app.add_subcommand("bench", "wall-clock throughput harness");
  bench->add_option("--variant", bvariant, "tst or tst-s");
  bench->add_option("--shape", bshape, "input shape HxW");
  bench->add_option("--iters", iters, "timed iterations");
  bench->add_option("--warmup", warmup, "untimed warmup iterations");
  bench->add_flag("--csv", bcsv, "emit CSV instead of text");

  std::string image_path, out_path;
  std::string pckpt;
  auto* predict = app.add_subcommand("predict",
                                     "run one image through a checkpoint");
  predict->add_option("--ckpt", pckpt, "checkpoint path")->required();
  predict->add_option("--image", image_path, "rgb tensor (.tstf)")->required();
  predict->add_option("--out", out_path, "output depth map (.pgm or .tstf)")
      ->required();

  app.add_subcommand("selftest", "run gradient and oracle spot checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, resume_path);
    if (eval->parsed())
      return cmd_eval(ckpt, data_spec, crop, min_depth, max_depth);
    if (profile->parsed()) return cmd_profile(variant, shape, batch, csv);
    if (bench->parsed()) return cmd_bench(bvariant, bshape, iters, warmup, bcsv);
    if (predict->parsed()) return cmd_predict(pckpt, image_path, out_path);
    return cmd_selftest();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
