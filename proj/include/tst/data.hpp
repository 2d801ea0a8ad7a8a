#pragma once

// Synthetic depth scenes, training-time augmentation, and raw file I/O.
//
// Scenes are procedural: a depth-gradient background plus a handful of
// axis-aligned rectangles and ellipses at constant depths, min-composited
// like a z-buffer. RGB is per-object albedo shaded by depth. The scene
// specification is exposed separately from the renderer so tests can
// recomposite pixels independently.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tst/common.hpp"
#include "tst/tensor.hpp"

namespace tst {

template <typename T>
struct DepthSample {
  Tensor<T> rgb;    // [3,H,W] in [0,1]
  Tensor<T> depth;  // [1,H,W] meters, in (0, max_depth]
  Tensor<T> mask;   // [1,H,W] validity, 0 or 1
};

struct SceneShape {
  bool ellipse = false;
  double cx = 0, cy = 0, rx = 1, ry = 1;  // pixels
  double depth = 1;                       // meters, constant per shape
  std::array<double, 3> albedo{1, 1, 1};

  bool covers(int64_t x, int64_t y) const {
    const double dx = (double(x) - cx) / rx;
    const double dy = (double(y) - cy) / ry;
    if (ellipse) return dx * dx + dy * dy <= 1.0;
    return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
  }
};

struct SceneSpec {
  int64_t height = 0, width = 0;
  double max_depth = 10;
  double bg_near = 1, bg_far = 9;  // vertical depth gradient endpoints
  std::array<double, 3> bg_albedo{1, 1, 1};
  std::vector<SceneShape> shapes;

  double background_depth(int64_t y) const {
    const double t = height > 1 ? double(y) / double(height - 1) : 0.0;
    return bg_near + (bg_far - bg_near) * t;
  }
};

inline SceneSpec make_scene_spec(uint64_t seed, int64_t h, int64_t w,
                                 double max_depth) {
  TST_REQUIRE(h >= 16 && w >= 16, config, "scene: dimensions too small");
  TST_REQUIRE(max_depth > 0, config, "scene: max_depth must be positive");
  Rng rng = Rng(seed).fork("scene");
  SceneSpec s;
  s.height = h;
  s.width = w;
  s.max_depth = max_depth;
  const double scale = rng.uniform(0.35, 0.95);
  s.bg_far = scale * max_depth;
  s.bg_near = rng.uniform(0.25, 0.6) * s.bg_far;
  for (auto& a : s.bg_albedo) a = rng.uniform(0.2, 1.0);
  const int64_t count = rng.uniform_int(3, 8);
  for (int64_t i = 0; i < count; ++i) {
    SceneShape sh;
    sh.ellipse = rng.bernoulli(0.5);
    sh.cx = rng.uniform(0.1, 0.9) * double(w);
    sh.cy = rng.uniform(0.1, 0.9) * double(h);
    sh.rx = rng.uniform(0.05, 0.25) * double(w);
    sh.ry = rng.uniform(0.05, 0.25) * double(h);
    sh.depth = rng.uniform(0.15, 0.9) * s.bg_far;
    for (auto& a : sh.albedo) a = rng.uniform(0.2, 1.0);
    s.shapes.push_back(sh);
  }
  return s;
}

namespace detail {

// Nearer surfaces are brighter; albedo modulates per channel.
inline double shade(double albedo, double depth, double max_depth) {
  const double v = 1.0 - 0.85 * depth / max_depth;
  const double c = albedo * (0.25 + 0.75 * v);
  return std::min(std::max(c, 0.0), 1.0);
}

}  // namespace detail

// Painter-style rendering: shapes are composited one at a time, keeping the
// nearest depth and its albedo at every pixel.
template <typename T>
DepthSample<T> render_scene(const SceneSpec& s) {
  const int64_t h = s.height, w = s.width;
  std::vector<double> depth(size_t(h * w));
  std::vector<std::array<double, 3>> albedo(size_t(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      depth[size_t(y * w + x)] = s.background_depth(y);
      albedo[size_t(y * w + x)] = s.bg_albedo;
    }
  for (const SceneShape& sh : s.shapes)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        if (!sh.covers(x, y)) continue;
        const size_t i = size_t(y * w + x);
        if (sh.depth < depth[i]) {
          depth[i] = sh.depth;
          albedo[i] = sh.albedo;
        }
      }

  DepthSample<T> out;
  out.rgb = Tensor<T>({3, h, w});
  out.depth = Tensor<T>({1, h, w});
  out.mask = Tensor<T>({1, h, w}, T(1));
  for (int64_t i = 0; i < h * w; ++i) {
    out.depth.values()[size_t(i)] = T(depth[size_t(i)]);
    for (int64_t c = 0; c < 3; ++c)
      out.rgb.values()[size_t(c * h * w + i)] = T(detail::shade(
          albedo[size_t(i)][size_t(c)], depth[size_t(i)], s.max_depth));
  }
  return out;
}

template <typename T>
DepthSample<T> synth_scene(uint64_t seed, int64_t h, int64_t w,
                           double max_depth) {
  return render_scene<T>(make_scene_spec(seed, h, w, max_depth));
}

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_color = 0.5;
  double p_cutdepth = 0.25;
  int64_t crop_h = 0, crop_w = 0;  // 0 keeps the full extent
  double color_lo = 0.75, color_hi = 1.25;
  double cut_lo = 0.25, cut_hi = 0.75;  // strip width as a width fraction
  double max_depth = 10.0;              // normalizes pasted depth
};

struct AugmentTrace {
  bool flipped = false, colored = false, cut = false;
  int64_t crop_top = 0, crop_left = 0;
  int64_t strip_x0 = 0, strip_w = 0;
};

// Order: crop, horizontal flip, photometric jitter, depth pasting. Geometry
// transforms rgb/depth/mask jointly; jitter touches rgb only; the pasted
// strip replaces rgb with depth/max_depth while depth and mask stay intact.
template <typename T>
DepthSample<T> augment(const DepthSample<T>& in, Rng& rng,
                       const AugmentConfig& cfg,
                       AugmentTrace* trace = nullptr) {
  TST_REQUIRE(cfg.p_hflip >= 0 && cfg.p_hflip <= 1 && cfg.p_color >= 0 &&
                  cfg.p_color <= 1 && cfg.p_cutdepth >= 0 &&
                  cfg.p_cutdepth <= 1,
              config, "augment: probabilities outside [0,1]");
  const int64_t H = in.rgb.dim(1), W = in.rgb.dim(2);
  TST_REQUIRE(in.depth.dim(1) == H && in.depth.dim(2) == W &&
                  in.mask.dim(1) == H && in.mask.dim(2) == W,
              config, "augment: sample tensors disagree on extent");
  const int64_t Hc = cfg.crop_h > 0 ? cfg.crop_h : H;
  const int64_t Wc = cfg.crop_w > 0 ? cfg.crop_w : W;
  TST_REQUIRE(Hc <= H && Wc <= W, usage, "augment: crop exceeds sample");

  AugmentTrace tr;
  tr.crop_top = Hc < H ? rng.uniform_int(0, H - Hc) : 0;
  tr.crop_left = Wc < W ? rng.uniform_int(0, W - Wc) : 0;
  tr.flipped = rng.bernoulli(cfg.p_hflip);

  DepthSample<T> out;
  out.rgb = Tensor<T>({3, Hc, Wc});
  out.depth = Tensor<T>({1, Hc, Wc});
  out.mask = Tensor<T>({1, Hc, Wc});
  for (int64_t y = 0; y < Hc; ++y)
    for (int64_t x = 0; x < Wc; ++x) {
      const int64_t sx = tr.crop_left + (tr.flipped ? Wc - 1 - x : x);
      const int64_t sy = tr.crop_top + y;
      const size_t src = size_t(sy * W + sx);
      const size_t dst = size_t(y * Wc + x);
      for (int64_t c = 0; c < 3; ++c)
        out.rgb.values()[size_t(c * Hc * Wc) + dst] =
            in.rgb.values()[size_t(c * H * W) + src];
      out.depth.values()[dst] = in.depth.values()[src];
      out.mask.values()[dst] = in.mask.values()[src];
    }

  tr.colored = rng.bernoulli(cfg.p_color);
  if (tr.colored) {
    const double brightness = rng.uniform(cfg.color_lo, cfg.color_hi);
    const double contrast = rng.uniform(cfg.color_lo, cfg.color_hi);
    const double gamma = rng.uniform(cfg.color_lo, cfg.color_hi);
    double mean = 0;
    for (T v : out.rgb.values()) mean += double(v) * brightness;
    mean /= double(out.rgb.numel());
    for (auto& v : out.rgb.values()) {
      double c = (double(v) * brightness - mean) * contrast + mean;
      c = std::min(std::max(c, 0.0), 1.0);
      v = T(std::pow(c, gamma));
    }
  }

  tr.cut = rng.bernoulli(cfg.p_cutdepth);
  if (tr.cut) {
    tr.strip_w = std::max<int64_t>(
        1, int64_t(rng.uniform(cfg.cut_lo, cfg.cut_hi) * double(Wc)));
    tr.strip_x0 = rng.uniform_int(0, Wc - tr.strip_w);
    for (int64_t y = 0; y < Hc; ++y)
      for (int64_t x = tr.strip_x0; x < tr.strip_x0 + tr.strip_w; ++x) {
        const T nd = T(double(out.depth.values()[size_t(y * Wc + x)]) /
                       cfg.max_depth);
        for (int64_t c = 0; c < 3; ++c)
          out.rgb.values()[size_t((c * Hc + y) * Wc + x)] = nd;
      }
  }

  if (trace) *trace = tr;
  return out;
}

// Stacks same-sized samples into batched [N,3,H,W] / [N,1,H,W] tensors.
template <typename T>
struct Batch {
  Tensor<T> rgb, depth, mask;
};

template <typename T>
Batch<T> stack_samples(const std::vector<const DepthSample<T>*>& samples) {
  TST_REQUIRE(!samples.empty(), usage, "stack_samples: empty batch");
  const int64_t H = samples[0]->rgb.dim(1), W = samples[0]->rgb.dim(2);
  const int64_t N = int64_t(samples.size());
  Batch<T> b{Tensor<T>({N, 3, H, W}), Tensor<T>({N, 1, H, W}),
             Tensor<T>({N, 1, H, W})};
  for (int64_t i = 0; i < N; ++i) {
    const DepthSample<T>& s = *samples[size_t(i)];
    TST_REQUIRE(s.rgb.dim(1) == H && s.rgb.dim(2) == W, config,
                "stack_samples: mixed sample sizes");
    std::copy(s.rgb.values().begin(), s.rgb.values().end(),
              b.rgb.values().begin() + i * 3 * H * W);
    std::copy(s.depth.values().begin(), s.depth.values().end(),
              b.depth.values().begin() + i * H * W);
    std::copy(s.mask.values().begin(), s.mask.values().end(),
              b.mask.values().begin() + i * H * W);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Raw tensor file format: magic "TSTF", u32 rank, u32 dims, f32 payload, all
// little-endian, row-major.

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t take_u32(const std::vector<unsigned char>& buf, size_t at) {
  return uint32_t(buf[at]) | (uint32_t(buf[at + 1]) << 8) |
         (uint32_t(buf[at + 2]) << 16) | (uint32_t(buf[at + 3]) << 24);
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  TST_REQUIRE(is.good(), data, "cannot open " + path);
  std::vector<unsigned char> buf(
      (std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return buf;
}

}  // namespace detail

template <typename T>
void write_tensor_raw(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  TST_REQUIRE(os.good(), data, "cannot open " + path + " for writing");
  os.write("TSTF", 4);
  detail::put_u32(os, uint32_t(t.rank()));
  for (int64_t i = 0; i < t.rank(); ++i)
    detail::put_u32(os, uint32_t(t.dim(i)));
  for (T v : t.values()) {
    const float f = float(v);
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(&f), 4);
  }
  TST_REQUIRE(os.good(), data, "short write to " + path);
}

template <typename T>
Tensor<T> read_tensor_raw(const std::string& path) {
  const std::vector<unsigned char> buf = detail::read_file_bytes(path);
  TST_REQUIRE(buf.size() >= 8, data,
              path + ": truncated header, need 8 bytes, have " +
                  std::to_string(buf.size()));
  TST_REQUIRE(std::memcmp(buf.data(), "TSTF", 4) == 0, data,
              path + ": bad magic at offset 0");
  const uint32_t rank = detail::take_u32(buf, 4);
  TST_REQUIRE(rank >= 1 && rank <= 8, data,
              path + ": implausible rank at offset 4");
  size_t off = 8;
  TST_REQUIRE(buf.size() >= off + 4 * rank, data,
              path + ": truncated dims at offset " + std::to_string(off));
  Shape shape;
  int64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape.push_back(int64_t(detail::take_u32(buf, off)));
    off += 4;
    TST_REQUIRE(shape.back() > 0, data, path + ": zero dimension");
    numel *= shape.back();
  }
  const size_t want = off + size_t(numel) * 4;
  TST_REQUIRE(buf.size() == want, data,
              path + ": payload length mismatch, expected " +
                  std::to_string(want) + " bytes, got " +
                  std::to_string(buf.size()) + " at offset " +
                  std::to_string(off));
  Tensor<T> t(shape);
  for (int64_t i = 0; i < numel; ++i) {
    float f;
    std::memcpy(&f, buf.data() + off + size_t(i) * 4, 4);
    t.values()[size_t(i)] = T(f);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Depth maps as 16-bit binary PGM, big-endian samples, millimeter units.

template <typename T>
void write_depth_pgm(const std::string& path, const Tensor<T>& depth) {
  TST_REQUIRE(depth.rank() == 3 && depth.dim(0) == 1, config,
              "write_depth_pgm: expected [1,H,W]");
  const int64_t h = depth.dim(1), w = depth.dim(2);
  std::ofstream os(path, std::ios::binary);
  TST_REQUIRE(os.good(), data, "cannot open " + path + " for writing");
  os << "P5\n" << w << " " << h << "\n65535\n";
  for (T v : depth.values()) {
    const double mm = std::min(std::max(double(v) * 1000.0, 0.0), 65535.0);
    const uint16_t q = uint16_t(std::lround(mm));
    const unsigned char b[2] = {static_cast<unsigned char>(q >> 8),
                                static_cast<unsigned char>(q & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
  }
  TST_REQUIRE(os.good(), data, "short write to " + path);
}

template <typename T>
Tensor<T> read_depth_pgm(const std::string& path) {
  const std::vector<unsigned char> buf = detail::read_file_bytes(path);
  size_t off = 0;
  auto token = [&]() -> std::string {
    while (off < buf.size() &&
           (std::isspace(buf[off]) || buf[off] == '#')) {
      if (buf[off] == '#')
        while (off < buf.size() && buf[off] != '\n') ++off;
      else
        ++off;
    }
    std::string t;
    while (off < buf.size() && !std::isspace(buf[off]))
      t.push_back(char(buf[off++]));
    TST_REQUIRE(!t.empty(), data,
                path + ": truncated header at offset " + std::to_string(off));
    return t;
  };
  TST_REQUIRE(token() == "P5", data, path + ": bad magic at offset 0");
  const int64_t w = std::stoll(token());
  const int64_t h = std::stoll(token());
  const int64_t maxval = std::stoll(token());
  TST_REQUIRE(w > 0 && h > 0, data, path + ": bad dimensions");
  TST_REQUIRE(maxval == 65535, data, path + ": expected 16-bit samples");
  ++off;  // single whitespace byte after maxval
  const size_t want = off + size_t(h * w) * 2;
  TST_REQUIRE(buf.size() == want, data,
              path + ": payload length mismatch, expected " +
                  std::to_string(want) + " bytes, got " +
                  std::to_string(buf.size()));
  Tensor<T> t({1, h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    const uint16_t q = uint16_t((uint16_t(buf[off + size_t(i) * 2]) << 8) |
                                uint16_t(buf[off + size_t(i) * 2 + 1]));
    t.values()[size_t(i)] = T(double(q) / 1000.0);
  }
  return t;
}

}  // namespace tst
