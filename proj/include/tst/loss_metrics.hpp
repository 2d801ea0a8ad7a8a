#pragma once

// Scale-invariant log loss and the six threshold/error depth metrics, with
// the evaluation protocol: predictions are clamped to the protocol's depth
// range, upsampled to ground-truth resolution, and scored only on valid
// pixels (mask set, ground truth inside (0, max_depth]), optionally inside
// the conventional evaluation crop rectangle.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "tst/image_ops.hpp"
#include "tst/tensor.hpp"

namespace tst {

struct Metrics {
  double delta1 = 0, delta2 = 0, delta3 = 0;
  double abs_rel = 0, sq_rel = 0, rmse = 0;
  int64_t valid_pixels = 0;

  static std::string csv_header() {
    return "variant,delta1,delta2,delta3,abs_rel,sq_rel,rmse";
  }
  std::string csv_row(const std::string& variant) const {
    std::ostringstream os;
    os.precision(10);
    os << variant << ',' << delta1 << ',' << delta2 << ',' << delta3 << ','
       << abs_rel << ',' << sq_rel << ',' << rmse;
    return os.str();
  }
};

enum class CropMode { none, eigen };

struct EvalProtocol {
  bool upsample_pred_to_gt = true;
  CropMode crop = CropMode::none;
  double min_depth = 1e-3;
  double max_depth = 10.0;
};

struct CropRect {
  int64_t row0 = 0, row1 = 0, col0 = 0, col1 = 0;
};

// Border rectangle of the conventional evaluation protocol, floored to
// integer pixel indices.
inline CropRect eigen_crop(int64_t height, int64_t width) {
  TST_REQUIRE(height > 0 && width > 0, config, "eigen_crop: bad dimensions");
  return {int64_t(0.40810811 * double(height)),
          int64_t(0.99189189 * double(height)),
          int64_t(0.03594771 * double(width)),
          int64_t(0.96405229 * double(width))};
}

// Fused scale-invariant log loss over masked pixels:
//   d_i = log(pred_i) - log(gt_i),  L = alpha * sqrt(E[d^2] - lambda*E[d]^2).
// Differentiable w.r.t. pred (and gt); the variance term is clamped at zero.
template <typename T>
Tensor<T> silog_loss(const Tensor<T>& pred, const Tensor<T>& gt,
                     const Tensor<T>& mask, double lambda = 0.85,
                     double alpha = 10.0) {
  TST_REQUIRE(pred.shape() == gt.shape() && pred.shape() == mask.shape(),
              config, "silog_loss: shape mismatch");
  TST_REQUIRE(lambda >= 0.0 && lambda <= 1.0, config,
              "silog_loss: lambda outside [0,1]");
  const int64_t total = pred.numel();
  double s1 = 0, s2 = 0;
  int64_t n = 0;
  std::vector<double> d(size_t(total), 0.0);
  for (int64_t i = 0; i < total; ++i) {
    if (mask.values()[size_t(i)] <= T(0.5)) continue;
    const double p = double(pred.values()[size_t(i)]);
    const double g = double(gt.values()[size_t(i)]);
    TST_REQUIRE(p > 0 && g > 0, numeric,
                "silog_loss: nonpositive depth under the mask");
    d[size_t(i)] = std::log(p) - std::log(g);
    s1 += d[size_t(i)];
    s2 += d[size_t(i)] * d[size_t(i)];
    ++n;
  }
  TST_REQUIRE(n >= 1, data, "silog_loss: empty mask");

  const double mean_d = s1 / double(n);
  const double var = std::max(s2 / double(n) - lambda * mean_d * mean_d, 0.0);
  const double root = std::sqrt(var);
  Tensor<T> out = Tensor<T>::scalar(T(alpha * root));

  Tensor<T> p = pred, g = gt, m = mask;
  const double denom = double(n) * std::max(root, 1e-12);
  detail::record_op<T>("silog_loss", {pred, gt}, out, [=]() mutable {
    const T go = out.grad_buffer()[0];
    for (int64_t i = 0; i < total; ++i) {
      if (m.values()[size_t(i)] <= T(0.5)) continue;
      const double common = alpha * (d[size_t(i)] - lambda * mean_d) / denom;
      if (p.requires_grad())
        p.grad_buffer()[size_t(i)] +=
            go * T(common / double(p.values()[size_t(i)]));
      if (g.requires_grad())
        g.grad_buffer()[size_t(i)] -=
            go * T(common / double(g.values()[size_t(i)]));
    }
  });
  return out;
}

namespace detail {

// Raw pixel-weighted sums; finalized into Metrics once all samples are in.
struct MetricSums {
  double d1 = 0, d2 = 0, d3 = 0;
  double abs_rel = 0, sq_rel = 0, se = 0;
  int64_t n = 0;
};

// Applies the protocol to one [N,1,H,W] prediction/target pair and folds
// the per-pixel statistics into `sums`.
template <typename T>
void accumulate_metrics(const Tensor<T>& pred_in, const Tensor<T>& gt,
                        const Tensor<T>& mask, const EvalProtocol& proto,
                        MetricSums& sums) {
  TST_REQUIRE(gt.rank() == 4 && gt.dim(1) == 1, config,
              "metrics: expected [N,1,H,W] ground truth");
  TST_REQUIRE(gt.shape() == mask.shape(), config,
              "metrics: mask/ground-truth shape mismatch");
  TST_REQUIRE(pred_in.rank() == 4 && pred_in.dim(1) == 1 &&
                  pred_in.dim(0) == gt.dim(0),
              config, "metrics: prediction shape mismatch");
  TST_REQUIRE(proto.min_depth > 0 && proto.max_depth > proto.min_depth,
              config, "metrics: bad depth range");

  Tensor<T> pred = pred_in.clone();
  for (auto& v : pred.values())
    v = std::min(std::max(v, T(proto.min_depth)), T(proto.max_depth));
  const int64_t H = gt.dim(2), W = gt.dim(3);
  if (pred.dim(2) != H || pred.dim(3) != W) {
    TST_REQUIRE(proto.upsample_pred_to_gt, config,
                "metrics: resolution mismatch with upsampling disabled");
    pred = bilinear_upsample(pred, H, W);
  }

  CropRect crop{0, H, 0, W};
  if (proto.crop == CropMode::eigen) crop = eigen_crop(H, W);

  const int64_t N = gt.dim(0);
  for (int64_t b = 0; b < N; ++b)
    for (int64_t r = crop.row0; r < crop.row1; ++r)
      for (int64_t c = crop.col0; c < crop.col1; ++c) {
        const size_t i = size_t((b * H + r) * W + c);
        if (mask.values()[i] <= T(0.5)) continue;
        const double g = double(gt.values()[i]);
        if (g <= 0 || g > proto.max_depth) continue;
        const double p = double(pred.values()[i]);
        const double ratio = std::max(p / g, g / p);
        if (ratio < 1.25) sums.d1 += 1;
        if (ratio < 1.25 * 1.25) sums.d2 += 1;
        if (ratio < 1.25 * 1.25 * 1.25) sums.d3 += 1;
        sums.abs_rel += std::abs(p - g) / g;
        sums.sq_rel += (p - g) * (p - g) / g;
        sums.se += (p - g) * (p - g);
        ++sums.n;
      }
}

inline Metrics finalize_metrics(const MetricSums& s) {
  TST_REQUIRE(s.n >= 1, data, "metrics: no valid pixels to evaluate");
  Metrics m;
  const double n = double(s.n);
  m.delta1 = s.d1 / n;
  m.delta2 = s.d2 / n;
  m.delta3 = s.d3 / n;
  m.abs_rel = s.abs_rel / n;
  m.sq_rel = s.sq_rel / n;
  m.rmse = std::sqrt(s.se / n);
  m.valid_pixels = s.n;
  TST_REQUIRE(std::isfinite(m.abs_rel) && std::isfinite(m.sq_rel) &&
                  std::isfinite(m.rmse),
              numeric, "metrics: predictions produced non-finite errors");
  return m;
}

}  // namespace detail

template <typename T>
Metrics compute_metrics(const Tensor<T>& pred, const Tensor<T>& gt,
                        const Tensor<T>& mask, const EvalProtocol& proto) {
  detail::MetricSums sums;
  detail::accumulate_metrics(pred, gt, mask, proto, sums);
  return detail::finalize_metrics(sums);
}

// Pixel-weighted aggregation across samples: every valid pixel counts once,
// regardless of how samples are batched.
template <typename T>
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(EvalProtocol proto) : proto_(proto) {}

  void add(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
    detail::accumulate_metrics(pred, gt, mask, proto_, sums_);
  }

  Metrics result() const { return detail::finalize_metrics(sums_); }
  int64_t valid_pixels() const { return sums_.n; }

 private:
  EvalProtocol proto_;
  detail::MetricSums sums_;
};

}  // namespace tst
