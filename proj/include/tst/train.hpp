#pragma once

// Training loop machinery: the warm-restart cosine schedule, a bias-corrected
// adaptive-moment optimizer, binary checkpoints, and the epoch driver that
// ties data generation, augmentation, loss, and evaluation together.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tst/config.hpp"
#include "tst/data.hpp"
#include "tst/loss_metrics.hpp"
#include "tst/model.hpp"
#include "tst/ops.hpp"

namespace tst {

// Cosine annealing with warm restarts at epoch granularity. Cycle k has
// length t0*tmult^k and peak base_lr*gamma^k; within a cycle the rate decays
// from the peak to zero along a half cosine.
inline double lr_schedule(double epoch, double base_lr, double t0,
                          double tmult, double gamma) {
  TST_REQUIRE(epoch >= 0 && base_lr > 0 && t0 >= 1 && tmult >= 1 &&
                  gamma > 0 && gamma <= 1,
              config, "lr_schedule: bad arguments");
  double len = t0;
  double amp = base_lr;
  double t = epoch;
  while (t >= len) {
    t -= len;
    len *= tmult;
    amp *= gamma;
  }
  return amp * (1.0 + std::cos(M_PI * t / len)) / 2.0;
}

// Cumulative epochs at which new cycles begin, up to a horizon.
inline std::vector<int64_t> restart_epochs(double t0, double tmult,
                                           int64_t horizon) {
  std::vector<int64_t> out;
  double at = t0, len = t0;
  while (at <= double(horizon)) {
    out.push_back(int64_t(at));
    len *= tmult;
    at += len;
  }
  return out;
}

// Bias-corrected adaptive-moment optimizer over a parameter store. Moments
// are held per learnable tensor, keyed by registry name.
template <typename T>
class Adam {
 public:
  Adam(ParamStore<T>& params, double beta1 = 0.9, double beta2 = 0.99,
       double eps = 1e-8)
      : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& e : params.entries())
      if (e.learnable) {
        m_[e.name] = Tensor<T>(e.tensor.shape());
        v_[e.name] = Tensor<T>(e.tensor.shape());
      }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (const auto& e : params_->entries()) {
      if (!e.learnable || !e.tensor.has_grad()) continue;
      Tensor<T> w = e.tensor;
      Tensor<T>& m = m_.at(e.name);
      Tensor<T>& v = v_.at(e.name);
      auto g = w.grad();
      for (int64_t i = 0; i < w.numel(); ++i) {
        const double gi = double(g[size_t(i)]);
        TST_REQUIRE(std::isfinite(gi), numeric,
                    "non-finite gradient in parameter " + e.name);
        double mi = beta1_ * double(m.values()[size_t(i)]) +
                    (1.0 - beta1_) * gi;
        double vi = beta2_ * double(v.values()[size_t(i)]) +
                    (1.0 - beta2_) * gi * gi;
        m.values()[size_t(i)] = T(mi);
        v.values()[size_t(i)] = T(vi);
        const double mhat = mi / c1;
        const double vhat = vi / c2;
        w.values()[size_t(i)] -= T(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  int64_t steps() const { return t_; }
  void set_steps(int64_t t) { t_ = t; }
  std::map<std::string, Tensor<T>>& first_moments() { return m_; }
  std::map<std::string, Tensor<T>>& second_moments() { return v_; }

 private:
  ParamStore<T>* params_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, Tensor<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "TST1", a self-describing header (variant, architecture
// digest and text, seed, epoch, optimizer step), then a named-tensor
// directory with offsets into a little-endian f32 payload. Every registry
// tensor appears exactly once; optimizer moments are an optional section.

namespace detail {

inline void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, uint32_t(v & 0xffffffffu));
  put_u32(os, uint32_t(v >> 32));
}

inline uint64_t take_u64(const std::vector<unsigned char>& buf, size_t at) {
  return uint64_t(take_u32(buf, at)) |
         (uint64_t(take_u32(buf, at + 4)) << 32);
}

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

}  // namespace detail

struct CheckpointEntry {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  uint32_t version = 1;
  std::string variant;
  uint64_t digest = 0;
  std::string config_text;
  uint64_t seed = 0;
  int64_t epoch = 0;
  int64_t adam_steps = 0;
  bool has_optimizer = false;
  std::map<std::string, CheckpointEntry> tensors;
};

template <typename T>
void gather_checkpoint_tensors(const ParamStore<T>& params, Adam<T>* opt,
                               Checkpoint& ck) {
  auto put = [&](const std::string& name, const Tensor<T>& t) {
    CheckpointEntry e;
    e.shape = t.shape();
    e.values.reserve(size_t(t.numel()));
    for (T v : t.values()) e.values.push_back(float(v));
    ck.tensors["model." + name] = std::move(e);
  };
  for (const auto& e : params.entries()) put(e.name, e.tensor);
  if (opt) {
    ck.has_optimizer = true;
    ck.adam_steps = opt->steps();
    for (auto& [name, t] : opt->first_moments()) {
      CheckpointEntry e;
      e.shape = t.shape();
      for (T v : t.values()) e.values.push_back(float(v));
      ck.tensors["opt.m." + name] = std::move(e);
    }
    for (auto& [name, t] : opt->second_moments()) {
      CheckpointEntry e;
      e.shape = t.shape();
      for (T v : t.values()) e.values.push_back(float(v));
      ck.tensors["opt.v." + name] = std::move(e);
    }
  }
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  if (const auto dir = std::filesystem::path(path).parent_path();
      !dir.empty())
    std::filesystem::create_directories(dir);
  std::ofstream os(path, std::ios::binary);
  TST_REQUIRE(os.good(), data, "cannot open " + path + " for writing");
  os.write("TST1", 4);
  detail::put_u32(os, ck.version);
  detail::put_str(os, ck.variant);
  detail::put_u64(os, ck.digest);
  detail::put_str(os, ck.config_text);
  detail::put_u64(os, ck.seed);
  detail::put_u64(os, uint64_t(ck.epoch));
  detail::put_u64(os, uint64_t(ck.adam_steps));
  detail::put_u32(os, ck.has_optimizer ? 1 : 0);
  detail::put_u32(os, uint32_t(ck.tensors.size()));
  uint64_t offset = 0;
  for (const auto& [name, e] : ck.tensors) {
    detail::put_str(os, name);
    detail::put_u32(os, uint32_t(e.shape.size()));
    for (int64_t d : e.shape) detail::put_u32(os, uint32_t(d));
    detail::put_u64(os, offset);
    offset += uint64_t(e.values.size()) * 4;
  }
  detail::put_u64(os, offset);
  for (const auto& [name, e] : ck.tensors)
    os.write(reinterpret_cast<const char*>(e.values.data()),
             std::streamsize(e.values.size() * 4));
  TST_REQUIRE(os.good(), data, "short write to " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  const std::vector<unsigned char> buf = detail::read_file_bytes(path);
  size_t off = 0;
  auto need = [&](size_t n) {
    TST_REQUIRE(buf.size() >= off + n, data,
                path + ": truncated at offset " + std::to_string(off) +
                    ", need " + std::to_string(n) + " more bytes");
  };
  auto u32 = [&]() {
    need(4);
    const uint32_t v = detail::take_u32(buf, off);
    off += 4;
    return v;
  };
  auto u64 = [&]() {
    need(8);
    const uint64_t v = detail::take_u64(buf, off);
    off += 8;
    return v;
  };
  auto str = [&]() {
    const uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + off), n);
    off += n;
    return s;
  };

  need(4);
  TST_REQUIRE(std::memcmp(buf.data(), "TST1", 4) == 0, data,
              path + ": bad checkpoint magic at offset 0");
  off = 4;
  Checkpoint ck;
  ck.version = u32();
  TST_REQUIRE(ck.version == 1, data,
              path + ": unsupported checkpoint version " +
                  std::to_string(ck.version));
  ck.variant = str();
  ck.digest = u64();
  ck.config_text = str();
  ck.seed = u64();
  ck.epoch = int64_t(u64());
  ck.adam_steps = int64_t(u64());
  ck.has_optimizer = u32() != 0;
  const uint32_t count = u32();
  struct Dir {
    std::string name;
    Shape shape;
    uint64_t offset;
    int64_t numel;
  };
  std::vector<Dir> dir;
  for (uint32_t i = 0; i < count; ++i) {
    Dir d;
    d.name = str();
    const uint32_t rank = u32();
    TST_REQUIRE(rank >= 1 && rank <= 8, data,
                path + ": implausible tensor rank in directory");
    d.numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      d.shape.push_back(int64_t(u32()));
      d.numel *= d.shape.back();
    }
    d.offset = u64();
    dir.push_back(std::move(d));
  }
  const uint64_t payload = u64();
  need(size_t(payload));
  for (const Dir& d : dir) {
    TST_REQUIRE(d.offset + uint64_t(d.numel) * 4 <= payload, data,
                path + ": tensor " + d.name + " overruns the payload");
    CheckpointEntry e;
    e.shape = d.shape;
    e.values.resize(size_t(d.numel));
    std::memcpy(e.values.data(), buf.data() + off + d.offset,
                size_t(d.numel) * 4);
    ck.tensors[d.name] = std::move(e);
  }
  return ck;
}

// Builds a checkpoint snapshot of a model (and optionally its optimizer).
inline Checkpoint snapshot(const TSTModel<float>& model, int64_t epoch,
                           Adam<float>* opt = nullptr) {
  Checkpoint ck;
  ck.variant = model.cfg.variant;
  ck.digest = model.cfg.digest();
  ck.config_text = model.cfg.canonical();
  ck.seed = model.cfg.seed;
  ck.epoch = epoch;
  gather_checkpoint_tensors(model.params, opt, ck);
  return ck;
}

// Restores tensors into an existing model; the architecture digest must
// match and every registry tensor must be present with its exact shape.
inline void restore(const Checkpoint& ck, TSTModel<float>& model,
                    Adam<float>* opt = nullptr) {
  TST_REQUIRE(ck.digest == model.cfg.digest(), data,
              "checkpoint was built for a different architecture (digest "
              "mismatch)");
  auto load_into = [&](const std::string& key, Tensor<float> t) {
    auto it = ck.tensors.find(key);
    TST_REQUIRE(it != ck.tensors.end(), data,
                "checkpoint is missing tensor " + key);
    TST_REQUIRE(it->second.shape == t.shape(), data,
                "checkpoint tensor " + key + " has the wrong shape");
    std::copy(it->second.values.begin(), it->second.values.end(),
              t.values().begin());
  };
  for (const auto& e : model.params.entries())
    load_into("model." + e.name, e.tensor);
  if (opt) {
    TST_REQUIRE(ck.has_optimizer, data,
                "checkpoint carries no optimizer state to resume from");
    opt->set_steps(ck.adam_steps);
    for (auto& [name, t] : opt->first_moments()) load_into("opt.m." + name, t);
    for (auto& [name, t] : opt->second_moments())
      load_into("opt.v." + name, t);
  }
}

// Rebuilds a model purely from a checkpoint's embedded architecture text.
inline TSTModel<float> model_from_checkpoint(const Checkpoint& ck) {
  ModelConfig cfg = model_config_from_kv(KeyValueConfig::from_text(
      ck.config_text + "seed=" + std::to_string(ck.seed) + "\n"));
  TST_REQUIRE(cfg.digest() == ck.digest, data,
              "checkpoint architecture text does not match its digest");
  TSTModel<float> model(cfg);
  restore(ck, model);
  return model;
}

// ---------------------------------------------------------------------------
// Epoch driver.

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  bool has_val = false;
  Metrics val;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_(cfg), model_(cfg.model), opt_(model_.params, cfg.beta1,
                                           cfg.beta2, cfg.adam_eps) {
    cfg_.validate();
    model_.params.set_requires_grad(true);
    for (int64_t i = 0; i < cfg_.train_scenes; ++i)
      train_.push_back(synth_scene<float>(cfg_.data_seed + uint64_t(i),
                                          cfg_.scene_h, cfg_.scene_w,
                                          cfg_.model.max_depth));
    for (int64_t i = 0; i < cfg_.val_scenes; ++i)
      val_.push_back(synth_scene<float>(cfg_.data_seed + 0x100000 +
                                            uint64_t(i),
                                        cfg_.scene_h, cfg_.scene_w,
                                        cfg_.model.max_depth));
  }

  // Resumes epoch counting and optimizer state from a checkpoint.
  void resume_from(const Checkpoint& ck) {
    restore(ck, model_, &opt_);
    start_epoch_ = ck.epoch;
  }

  double epoch_lr(int64_t epoch) const {
    if (!cfg_.cosine_schedule) return cfg_.lr;
    return lr_schedule(double(epoch), cfg_.lr, cfg_.t0, cfg_.tmult,
                       cfg_.lr_gamma);
  }

  // Runs one epoch; returns the mean batch loss. Sample order and
  // augmentation draws depend only on (seed, epoch), so training resumed
  // from any boundary replays the identical stream.
  double run_epoch(int64_t epoch) {
    Rng er = Rng(cfg_.seed).fork("epoch" + std::to_string(epoch));
    std::vector<size_t> order(train_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(er.uniform_int(0, int64_t(i) - 1))]);

    const double lr = epoch_lr(epoch);
    double loss_sum = 0;
    int64_t batches = 0;
    for (size_t at = 0; at < order.size(); at += size_t(cfg_.batch_size)) {
      const size_t end = std::min(order.size(), at + size_t(cfg_.batch_size));
      std::vector<DepthSample<float>> staged;
      staged.reserve(end - at);
      for (size_t i = at; i < end; ++i) {
        if (cfg_.augment_enabled)
          staged.push_back(augment(train_[order[i]], er, cfg_.augment));
        else
          staged.push_back(train_[order[i]]);
      }
      std::vector<const DepthSample<float>*> ptrs;
      for (const auto& s : staged) ptrs.push_back(&s);
      Batch<float> b = stack_samples(ptrs);

      model_.params.zero_grad();
      double batch_loss = 0;
      {
        TapeScope<float> tape;
        Tensor<float> pred = model_.forward(b.rgb, true);
        Tensor<float> loss = silog_loss(pred, b.depth, b.mask,
                                        cfg_.loss_lambda, cfg_.loss_alpha);
        batch_loss = double(loss.item());
        TST_REQUIRE(std::isfinite(batch_loss), numeric,
                    "loss diverged at epoch " + std::to_string(epoch) +
                        "; the last saved checkpoint is preserved");
        backward(loss);
      }
      opt_.step(lr);
      loss_sum += batch_loss;
      ++batches;
    }
    return loss_sum / double(std::max<int64_t>(batches, 1));
  }

  Metrics evaluate(const std::vector<DepthSample<float>>& samples) {
    TST_REQUIRE(!samples.empty(), data, "evaluate: empty dataset");
    EvalProtocol proto;
    proto.max_depth = cfg_.model.max_depth;
    MetricsAccumulator<float> acc(proto);
    for (const auto& s : samples) {
      Batch<float> b = stack_samples<float>({&s});
      Tensor<float> pred = model_.forward(b.rgb, false);
      acc.add(pred, b.depth, b.mask);
    }
    return acc.result();
  }

  // Full run: trains, logs, checkpoints at restart boundaries and the end.
  std::vector<EpochLog> run() {
    std::filesystem::create_directories(cfg_.out_dir);
    std::ofstream log(cfg_.out_dir + "/train_log.csv",
                      start_epoch_ > 0 ? std::ios::app : std::ios::out);
    if (start_epoch_ == 0)
      log << "epoch,lr,train_loss," << Metrics::csv_header() << "\n";
    std::vector<int64_t> boundaries =
        restart_epochs(cfg_.t0, cfg_.tmult, cfg_.epochs);
    std::vector<EpochLog> logs;
    for (int64_t e = start_epoch_; e < cfg_.epochs; ++e) {
      EpochLog l;
      l.epoch = e;
      l.lr = epoch_lr(e);
      l.train_loss = run_epoch(e);
      if (!val_.empty()) {
        l.has_val = true;
        l.val = evaluate(val_);
      }
      log << l.epoch << ',' << l.lr << ',' << l.train_loss << ','
          << (l.has_val ? l.val.csv_row(cfg_.model.variant)
                        : Metrics{}.csv_row(cfg_.model.variant))
          << "\n";
      log.flush();
      logs.push_back(l);
      const bool boundary = std::find(boundaries.begin(), boundaries.end(),
                                      e + 1) != boundaries.end();
      if (boundary && e + 1 < cfg_.epochs)
        save(cfg_.out_dir + "/ckpt_epoch" + std::to_string(e + 1) + ".tst",
             e + 1);
    }
    save(cfg_.out_dir + "/final.tst", cfg_.epochs);
    return logs;
  }

  void save(const std::string& path, int64_t epoch) {
    write_checkpoint(path, snapshot(model_, epoch, &opt_));
  }

  TSTModel<float>& model() { return model_; }
  Adam<float>& optimizer() { return opt_; }
  const std::vector<DepthSample<float>>& train_set() const { return train_; }
  const std::vector<DepthSample<float>>& val_set() const { return val_; }

 private:
  TrainConfig cfg_;
  TSTModel<float> model_;
  Adam<float> opt_;
  std::vector<DepthSample<float>> train_, val_;
  int64_t start_epoch_ = 0;
};

}  // namespace tst
