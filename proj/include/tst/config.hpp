#pragma once

// Flat key=value configuration text: one `key = value` pair per line, `#`
// starts a comment, whitespace around tokens is ignored. The same syntax is
// used for experiment files on disk and for the canonical architecture
// description embedded in checkpoints.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "tst/common.hpp"
#include "tst/data.hpp"
#include "tst/model.hpp"

namespace tst {

class KeyValueConfig {
 public:
  static KeyValueConfig from_text(const std::string& text) {
    KeyValueConfig kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const size_t eq = trimmed.find('=');
      TST_REQUIRE(eq != std::string::npos, config,
                  "config line " + std::to_string(lineno) +
                      ": expected key = value, got '" + trimmed + "'");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      TST_REQUIRE(!key.empty(), config,
                  "config line " + std::to_string(lineno) + ": empty key");
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream is(path);
    TST_REQUIRE(is.good(), config, "cannot open config file " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return from_text(os.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key,
                         const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t used = 0;
      const int64_t v = std::stoll(it->second, &used);
      TST_REQUIRE(used == it->second.size(), config, "");
      return v;
    } catch (...) {
      fail(ErrorKind::config,
           "config key '" + key + "': expected integer, got '" + it->second +
               "'");
    }
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t used = 0;
      const double v = std::stod(it->second, &used);
      TST_REQUIRE(used == it->second.size(), config, "");
      return v;
    } catch (...) {
      fail(ErrorKind::config,
           "config key '" + key + "': expected number, got '" + it->second +
               "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    fail(ErrorKind::config, "config key '" + key +
                                "': expected true/false, got '" + it->second +
                                "'");
  }

  const std::map<std::string, std::string>& items() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  std::map<std::string, std::string> values_;
};

namespace detail {

inline std::vector<int64_t> parse_triple(const std::string& text,
                                         const std::string& key) {
  std::vector<int64_t> out(3, 0);
  std::istringstream is(text);
  std::string tok;
  for (int i = 0; i < 3; ++i) {
    TST_REQUIRE(std::getline(is, tok, ','), config,
                "config key '" + key + "': expected three integers");
    out[size_t(i)] = std::stoll(tok);
  }
  TST_REQUIRE(!std::getline(is, tok, ','), config,
              "config key '" + key + "': expected exactly three integers");
  return out;
}

}  // namespace detail

// Rebuilds a ModelConfig from key=value text; keys follow the canonical
// serialization, all optional on top of the variant preset.
inline ModelConfig model_config_from_kv(const KeyValueConfig& kv) {
  ModelConfig c = ModelConfig::preset(kv.get_string("variant", "tst"));
  if (kv.has("local_channels"))
    c.local_channels = detail::parse_triple(
        kv.get_string("local_channels", ""), "local_channels");
  c.global_channels = kv.get_int("global_channels", c.global_channels);
  if (kv.has("heads"))
    c.heads = detail::parse_triple(kv.get_string("heads", ""), "heads");
  c.qk_dim = kv.get_int("qk_dim", c.qk_dim);
  c.v_dim = kv.get_int("v_dim", c.v_dim);
  c.ffn_expansion = kv.get_int("ffn_expansion", c.ffn_expansion);
  c.decoder_channels = kv.get_int("decoder_channels", c.decoder_channels);
  c.max_depth = kv.get_double("max_depth", c.max_depth);
  c.attention_mode =
      attention_mode_from(kv.get_string("attention", "cross"));
  c.bn_momentum = kv.get_double("bn_momentum", c.bn_momentum);
  c.bn_eps = kv.get_double("bn_eps", c.bn_eps);
  c.global_stride = kv.get_int("global_stride", c.global_stride);
  c.seed = uint64_t(kv.get_int("seed", int64_t(c.seed)));
  c.validate();
  return c;
}

struct TrainConfig {
  ModelConfig model;
  int64_t epochs = 30;
  int64_t batch_size = 8;
  uint64_t seed = 1;

  // Synthetic dataset geometry.
  int64_t train_scenes = 64;
  int64_t val_scenes = 8;
  int64_t scene_h = 64, scene_w = 64;
  uint64_t data_seed = 1000;

  // Loss.
  double loss_lambda = 0.85;
  double loss_alpha = 10.0;

  // Optimizer and schedule.
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.99, adam_eps = 1e-8;
  bool cosine_schedule = true;
  double t0 = 10, tmult = 2, lr_gamma = 0.5;

  AugmentConfig augment;
  bool augment_enabled = true;

  std::string out_dir = "runs/default";

  void validate() const {
    TST_REQUIRE(epochs > 0 && batch_size > 0, config,
                "train config: epochs and batch size must be positive");
    TST_REQUIRE(train_scenes > 0 && val_scenes >= 0, config,
                "train config: need at least one training scene");
    TST_REQUIRE(t0 >= 1 && tmult >= 1, config,
                "train config: schedule requires t0 >= 1 and tmult >= 1");
    TST_REQUIRE(lr_gamma > 0 && lr_gamma <= 1, config,
                "train config: lr gamma must lie in (0, 1]");
    TST_REQUIRE(lr > 0, config, "train config: lr must be positive");
    model.validate();
  }
};

inline TrainConfig train_config_from_kv(const KeyValueConfig& kv) {
  TrainConfig c;
  c.model = model_config_from_kv(kv);
  c.epochs = kv.get_int("epochs", c.epochs);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.seed = uint64_t(kv.get_int("seed", int64_t(c.seed)));
  c.model.seed = c.seed;
  c.train_scenes = kv.get_int("train_scenes", c.train_scenes);
  c.val_scenes = kv.get_int("val_scenes", c.val_scenes);
  c.scene_h = kv.get_int("scene_h", c.scene_h);
  c.scene_w = kv.get_int("scene_w", c.scene_w);
  c.data_seed = uint64_t(kv.get_int("data_seed", int64_t(c.data_seed)));
  c.loss_lambda = kv.get_double("loss_lambda", c.loss_lambda);
  c.loss_alpha = kv.get_double("loss_alpha", c.loss_alpha);
  c.lr = kv.get_double("lr", c.lr);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
  c.cosine_schedule = kv.get_bool("cosine_schedule", c.cosine_schedule);
  c.t0 = kv.get_double("t0", c.t0);
  c.tmult = kv.get_double("tmult", c.tmult);
  c.lr_gamma = kv.get_double("lr_gamma", c.lr_gamma);
  c.augment.p_hflip = kv.get_double("p_hflip", c.augment.p_hflip);
  c.augment.p_color = kv.get_double("p_color", c.augment.p_color);
  c.augment.p_cutdepth = kv.get_double("p_cutdepth", c.augment.p_cutdepth);
  c.augment.crop_h = kv.get_int("crop_h", c.augment.crop_h);
  c.augment.crop_w = kv.get_int("crop_w", c.augment.crop_w);
  c.augment.max_depth = c.model.max_depth;
  c.augment_enabled = kv.get_bool("augment", c.augment_enabled);
  c.out_dir = kv.get_string("out_dir", c.out_dir);
  c.validate();
  return c;
}

}  // namespace tst
