#pragma once

// The depth network: an inverted-residual encoder pyramid, a token-sharing
// connection that refines each pyramid level by attending over one shared
// low-resolution token map, and a gated-fusion decoder that regresses a
// bounded depth map at input resolution.

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "tst/nn.hpp"

namespace tst {

enum class AttentionMode { cross, self, none };

inline const char* attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::cross: return "cross";
    case AttentionMode::self: return "self";
    case AttentionMode::none: return "none";
  }
  return "?";
}

inline AttentionMode attention_mode_from(const std::string& s) {
  if (s == "cross") return AttentionMode::cross;
  if (s == "self") return AttentionMode::self;
  if (s == "none") return AttentionMode::none;
  fail(ErrorKind::config, "unknown attention mode: " + s);
}

struct ModelConfig {
  std::string variant = "tst";
  std::vector<int64_t> local_channels = {64, 128, 160};
  int64_t global_channels = 256;
  std::vector<int64_t> heads = {2, 4, 5};
  int64_t qk_dim = 16;
  int64_t v_dim = 32;
  int64_t ffn_expansion = 2;
  int64_t decoder_channels = 64;
  double max_depth = 10.0;
  AttentionMode attention_mode = AttentionMode::cross;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  int global_stride = 64;  // 64: pooled shared token; 32: same grid as F3
  uint64_t seed = 1;

  static ModelConfig preset(const std::string& variant) {
    ModelConfig c;
    if (variant == "tst") {
      c.local_channels = {64, 128, 160};
    } else if (variant == "tst-s") {
      c.local_channels = {48, 96, 128};
    } else {
      fail(ErrorKind::config, "unknown variant: " + variant +
                                  " (expected tst or tst-s)");
    }
    c.variant = variant;
    return c;
  }

  void validate() const {
    TST_REQUIRE(local_channels.size() == 3 && heads.size() == 3, config,
                "config: expected three pyramid levels");
    for (int i = 0; i < 3; ++i)
      TST_REQUIRE(local_channels[size_t(i)] >= 1 && heads[size_t(i)] >= 1,
                  config, "config: channels and heads must be positive");
    TST_REQUIRE(global_channels >= 1 && qk_dim >= 1 && v_dim >= 1 &&
                    ffn_expansion >= 1 && decoder_channels >= 1,
                config, "config: dims must be positive");
    TST_REQUIRE(max_depth > 0, config, "config: max_depth must be positive");
    TST_REQUIRE(global_stride == 32 || global_stride == 64, config,
                "config: global_stride must be 32 or 64");
    TST_REQUIRE(bn_momentum > 0 && bn_momentum < 1 && bn_eps > 0, config,
                "config: bad batch norm constants");
  }

  // Canonical architecture description; its hash guards checkpoint loads.
  // Seed is deliberately excluded: it affects initialization, not shape.
  std::string canonical() const {
    auto num = [](double v) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    std::string s;
    s += "variant=" + variant + "\n";
    s += "local_channels=" + std::to_string(local_channels[0]) + "," +
         std::to_string(local_channels[1]) + "," +
         std::to_string(local_channels[2]) + "\n";
    s += "global_channels=" + std::to_string(global_channels) + "\n";
    s += "heads=" + std::to_string(heads[0]) + "," + std::to_string(heads[1]) +
         "," + std::to_string(heads[2]) + "\n";
    s += "qk_dim=" + std::to_string(qk_dim) + "\n";
    s += "v_dim=" + std::to_string(v_dim) + "\n";
    s += "ffn_expansion=" + std::to_string(ffn_expansion) + "\n";
    s += "decoder_channels=" + std::to_string(decoder_channels) + "\n";
    s += "max_depth=" + num(max_depth) + "\n";
    s += "attention=" + std::string(attention_mode_name(attention_mode)) +
         "\n";
    s += "bn_momentum=" + num(bn_momentum) + "\n";
    s += "bn_eps=" + num(bn_eps) + "\n";
    s += "global_stride=" + std::to_string(global_stride) + "\n";
    return s;
  }

  uint64_t digest() const { return fnv1a64(canonical()); }

  int64_t min_input() const { return global_stride == 64 ? 64 : 32; }
};

// Spatial sizes of the pyramid taps for a given input, shared between the
// forward pass and the analytic profile.
struct PyramidSizes {
  int64_t h1, w1, h2, w2, h3, w3, hg, wg;
};

inline PyramidSizes pyramid_sizes(const ModelConfig& cfg, int64_t h,
                                  int64_t w) {
  PyramidSizes s;
  s.h1 = h / 8;
  s.w1 = w / 8;
  s.h2 = h / 16;
  s.w2 = w / 16;
  s.h3 = h / 32;
  s.w3 = w / 32;
  s.hg = cfg.global_stride == 64 ? s.h3 / 2 : s.h3;
  s.wg = cfg.global_stride == 64 ? s.w3 / 2 : s.w3;
  return s;
}

template <typename T>
struct EncoderFeatures {
  Tensor<T> f1, f2, f3, g;
};

// Five-stage pyramid: a strided stem, then inverted-residual stages tapping
// features at strides 8, 16 and 32, and a final stage producing the shared
// token map (average-pooled to stride 64 by default).
template <typename T>
struct Encoder {
  ConvBNAct<T> stem;
  std::vector<InvertedResidual<T>> s1, s2, s3, s4;
  InvertedResidual<T> s5;
  int global_stride = 64;

  Encoder() = default;

  Encoder(ParamStore<T>& store, const std::string& prefix,
          const ModelConfig& cfg, Rng& rng)
      : global_stride(cfg.global_stride) {
    const T mom = T(cfg.bn_momentum), eps = T(cfg.bn_eps);
    const int64_t c1 = cfg.local_channels[0], c2 = cfg.local_channels[1],
                  c3 = cfg.local_channels[2], cg = cfg.global_channels;
    stem = ConvBNAct<T>(store, prefix + ".stem", 3, 16, 3, 2, 1, 1, true,
                        rng, mom, eps);
    auto stage = [&](std::vector<InvertedResidual<T>>& blocks,
                     const std::string& name, int64_t cin, int64_t cout,
                     int repeats, int first_stride) {
      blocks.emplace_back(store, prefix + "." + name + ".b0", cin, cout, 4,
                          first_stride, rng, mom, eps);
      for (int i = 1; i < repeats; ++i)
        blocks.emplace_back(store,
                            prefix + "." + name + ".b" + std::to_string(i),
                            cout, cout, 4, 1, rng, mom, eps);
    };
    stage(s1, "s1", 16, 24, 3, 2);
    stage(s2, "s2", 24, c1, 5, 2);
    stage(s3, "s3", c1, c2, 2, 2);
    stage(s4, "s4", c2, c3, 2, 2);
    s5 = InvertedResidual<T>(store, prefix + ".s5.b0", c3, cg, 4, 1, rng,
                             mom, eps);
  }

  EncoderFeatures<T> forward(const Tensor<T>& x, bool training) const {
    Tensor<T> h = stem.forward(x, training);
    for (const auto& b : s1) h = b.forward(h, training);
    EncoderFeatures<T> out;
    for (const auto& b : s2) h = b.forward(h, training);
    out.f1 = h;
    for (const auto& b : s3) h = b.forward(h, training);
    out.f2 = h;
    for (const auto& b : s4) h = b.forward(h, training);
    out.f3 = h;
    if (global_stride == 64)
      h = adaptive_avg_pool(h, h.dim(2) / 2, h.dim(3) / 2);
    out.g = s5.forward(h, training);
    return out;
  }

  void profile(const std::string& prefix, int64_t n, int64_t h, int64_t w,
               ProfileReport& rep) const {
    stem.profile(prefix + ".stem", n, h, w, rep);
    auto run = [&](const std::vector<InvertedResidual<T>>& blocks,
                   const std::string& name) {
      for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].profile(prefix + "." + name + ".b" + std::to_string(i), n,
                          h, w, rep);
    };
    run(s1, "s1");
    run(s2, "s2");
    run(s3, "s3");
    run(s4, "s4");
    if (global_stride == 64) {
      h /= 2;
      w /= 2;
      rep.add(prefix + ".s5.pool", "pool", 0, 0);
    }
    s5.profile(prefix + ".s5.b0", n, h, w, rep);
  }
};

// Per-level token refinement. Each pyramid level is pooled onto the shared
// token grid, mixed by a transformer block whose keys and values come from
// the shared token map (mode cross), from the level's own pooled tokens
// (mode self), or not at all (mode none), and the refinement is upsampled
// and added back to the level.
template <typename T>
struct Connection {
  AttentionMode mode = AttentionMode::cross;
  std::vector<TransformerBlock<T>> blocks;

  Connection() = default;

  Connection(ParamStore<T>& store, const std::string& prefix,
             const ModelConfig& cfg, Rng& rng)
      : mode(cfg.attention_mode) {
    if (mode == AttentionMode::none) return;
    const T mom = T(cfg.bn_momentum), eps = T(cfg.bn_eps);
    for (int lvl = 0; lvl < 3; ++lvl) {
      const int64_t c = cfg.local_channels[size_t(lvl)];
      const int64_t ctx_c =
          mode == AttentionMode::cross ? cfg.global_channels : c;
      blocks.emplace_back(store,
                          prefix + ".level" + std::to_string(lvl + 1), c,
                          ctx_c, cfg.heads[size_t(lvl)], cfg.qk_dim,
                          cfg.v_dim, cfg.ffn_expansion, rng, mom, eps);
    }
  }

  std::array<Tensor<T>, 3> forward(const EncoderFeatures<T>& feats,
                                   bool training) const {
    std::array<Tensor<T>, 3> out = {feats.f1, feats.f2, feats.f3};
    if (mode == AttentionMode::none) return out;
    const int64_t hg = feats.g.dim(2), wg = feats.g.dim(3);
    for (int lvl = 0; lvl < 3; ++lvl) {
      const Tensor<T>& f = out[size_t(lvl)];
      Tensor<T> tokens = adaptive_avg_pool(f, hg, wg);
      const Tensor<T>& ctx =
          mode == AttentionMode::cross ? feats.g : tokens;
      Tensor<T> mixed =
          blocks[size_t(lvl)].forward(tokens, ctx, training);
      // The block is residual, so the refinement is its net update; adding
      // the raw block output would re-inject a low-pass copy of the level.
      Tensor<T> update = sub(mixed, tokens);
      out[size_t(lvl)] =
          add(f, bilinear_upsample(update, f.dim(2), f.dim(3)));
    }
    return out;
  }

  void profile(const std::string& prefix, int64_t n, const PyramidSizes& ps,
               ProfileReport& rep) const {
    if (mode == AttentionMode::none) return;
    for (int lvl = 0; lvl < 3; ++lvl) {
      const std::string label = prefix + ".level" + std::to_string(lvl + 1);
      rep.add(label + ".pool", "pool", 0, 0);
      blocks[size_t(lvl)].profile(label, n, ps.hg, ps.wg, ps.hg, ps.wg, rep);
      rep.add(label + ".upsample", "interp", 0, 0);
    }
  }
};

// Coarse-to-fine decoder. The shared token map is reduced to the working
// width, then each level is fused in: both inputs are projected to the same
// width, a 3x3 mixer predicts two sigmoid gates, and the gated sum passes
// through a 3x3 refiner. A final head regresses sigmoid-bounded depth at
// input resolution.
template <typename T>
struct Decoder {
  struct Fuse {
    Conv2dLayer<T> proj;   // level channels -> D, with bias, no norm
    ConvBNAct<T> mix;      // 3x3, 2D -> D
    Conv2dLayer<T> gate;   // 3x3, D -> 2, with bias
    ConvBNAct<T> post;     // 3x3, D -> D
  };

  ConvBNAct<T> reduce;
  std::array<Fuse, 3> fuse;  // index 0 = level 3 (coarsest) .. 2 = level 1
  Conv2dLayer<T> head;
  T max_depth = T(10);

  Decoder() = default;

  Decoder(ParamStore<T>& store, const std::string& prefix,
          const ModelConfig& cfg, Rng& rng)
      : max_depth(T(cfg.max_depth)) {
    const T mom = T(cfg.bn_momentum), eps = T(cfg.bn_eps);
    const int64_t d = cfg.decoder_channels;
    reduce = ConvBNAct<T>(store, prefix + ".reduce", cfg.global_channels, d,
                          1, 1, 0, 1, true, rng, mom, eps);
    for (int i = 0; i < 3; ++i) {
      const int lvl = 3 - i;  // coarsest first
      const int64_t c = cfg.local_channels[size_t(lvl - 1)];
      const std::string base = prefix + ".fuse" + std::to_string(lvl);
      fuse[size_t(i)].proj = Conv2dLayer<T>(store, base + ".proj", c, d, 1,
                                            1, 0, 1, true, rng);
      fuse[size_t(i)].mix = ConvBNAct<T>(store, base + ".mix", 2 * d, d, 3,
                                         1, 1, 1, true, rng, mom, eps);
      fuse[size_t(i)].gate = Conv2dLayer<T>(store, base + ".gate", d, 2, 3,
                                            1, 1, 1, true, rng);
      fuse[size_t(i)].post = ConvBNAct<T>(store, base + ".post", d, d, 3, 1,
                                          1, 1, true, rng, mom, eps);
    }
    head = Conv2dLayer<T>(store, prefix + ".head", d, 1, 3, 1, 1, 1, true,
                          rng);
  }

  Tensor<T> fuse_level(const Fuse& fz, const Tensor<T>& feat,
                       const Tensor<T>& coarse, bool training) const {
    Tensor<T> up = bilinear_upsample(coarse, feat.dim(2), feat.dim(3));
    Tensor<T> p = fz.proj.forward(feat);
    Tensor<T> m = fz.mix.forward(concat({p, up}, 1), training);
    Tensor<T> gates = sigmoid(fz.gate.forward(m));
    Tensor<T> fused = add(mul_gate(p, slice_channels(gates, 0, 1)),
                          mul_gate(up, slice_channels(gates, 1, 2)));
    return fz.post.forward(fused, training);
  }

  Tensor<T> forward(const std::array<Tensor<T>, 3>& locals,
                    const Tensor<T>& g, int64_t out_h, int64_t out_w,
                    bool training) const {
    Tensor<T> d = reduce.forward(g, training);
    d = fuse_level(fuse[0], locals[2], d, training);
    d = fuse_level(fuse[1], locals[1], d, training);
    d = fuse_level(fuse[2], locals[0], d, training);
    Tensor<T> full = bilinear_upsample(d, out_h, out_w);
    return scale(sigmoid(head.forward(full)), max_depth);
  }

  void profile(const std::string& prefix, int64_t n, const PyramidSizes& ps,
               int64_t out_h, int64_t out_w, ProfileReport& rep) const {
    int64_t h = ps.hg, w = ps.wg;
    reduce.profile(prefix + ".reduce", n, h, w, rep);
    const int64_t hs[3] = {ps.h3, ps.h2, ps.h1};
    const int64_t ws[3] = {ps.w3, ps.w2, ps.w1};
    for (int i = 0; i < 3; ++i) {
      const std::string base = prefix + ".fuse" + std::to_string(3 - i);
      rep.add(base + ".upsample", "interp", 0, 0);
      h = hs[i], w = ws[i];
      int64_t ph = h, pw = w;
      fuse[size_t(i)].proj.profile(base + ".proj", n, ph, pw, rep);
      ph = h, pw = w;
      fuse[size_t(i)].mix.profile(base + ".mix", n, ph, pw, rep);
      ph = h, pw = w;
      fuse[size_t(i)].gate.profile(base + ".gate", n, ph, pw, rep);
      ph = h, pw = w;
      fuse[size_t(i)].post.profile(base + ".post", n, ph, pw, rep);
    }
    rep.add(prefix + ".upsample", "interp", 0, 0);
    int64_t fh = out_h, fw = out_w;
    head.profile(prefix + ".head", n, fh, fw, rep);
  }
};

template <typename T>
struct TSTModel {
  ModelConfig cfg;
  ParamStore<T> params;
  Encoder<T> encoder;
  Connection<T> connection;
  Decoder<T> decoder;

  explicit TSTModel(ModelConfig cfg_) : cfg(std::move(cfg_)) {
    cfg.validate();
    // Independent streams per component: constructing or skipping one
    // component never shifts another's initialization.
    Rng enc_rng = Rng(cfg.seed).fork("encoder");
    Rng con_rng = Rng(cfg.seed).fork("connection");
    Rng dec_rng = Rng(cfg.seed).fork("decoder");
    encoder = Encoder<T>(params, "encoder", cfg, enc_rng);
    connection = Connection<T>(params, "connection", cfg, con_rng);
    decoder = Decoder<T>(params, "decoder", cfg, dec_rng);
  }

  void check_input(const Tensor<T>& x) const {
    TST_REQUIRE(x.rank() == 4 && x.dim(1) == 3, config,
                "model: input must be [N,3,H,W], got " +
                    shape_str(x.shape()));
    const int64_t h = x.dim(2), w = x.dim(3), mn = cfg.min_input();
    TST_REQUIRE(h % 32 == 0 && w % 32 == 0 && h >= mn && w >= mn, config,
                "model: input sides must be multiples of 32 and at least " +
                    std::to_string(mn) + ", got " + shape_str(x.shape()));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    check_input(x);
    EncoderFeatures<T> feats = encoder.forward(x, training);
    std::array<Tensor<T>, 3> refined = connection.forward(feats, training);
    return decoder.forward(refined, feats.g, x.dim(2), x.dim(3), training);
  }

  ProfileReport profile(int64_t n, int64_t h, int64_t w) const {
    TST_REQUIRE(h % 32 == 0 && w % 32 == 0 && h >= cfg.min_input() &&
                    w >= cfg.min_input(),
                config, "profile: invalid input size");
    ProfileReport rep;
    const PyramidSizes ps = pyramid_sizes(cfg, h, w);
    encoder.profile("encoder", n, h, w, rep);
    connection.profile("connection", n, ps, rep);
    decoder.profile("decoder", n, ps, h, w, rep);
    return rep;
  }
};

}  // namespace tst
