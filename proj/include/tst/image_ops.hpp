#pragma once

// Differentiable image ops over NCHW tensors: convolution, batch
// normalization, average pooling and bilinear upsampling.
//
// Convolution dispatches to one of three kernels: a direct GEMM for 1x1
// stride-1 projections, a direct loop for depthwise filters, and tiled
// im2col + GEMM for the general case. All three execute (and report) exactly
// out_positions * Kh * Kw * Cin/groups multiply-accumulates per output
// channel; padding taps multiply explicit zeros so the executed count equals
// the analytic one.

#include <algorithm>
#include <cmath>

#include "tst/gemm.hpp"
#include "tst/tensor.hpp"

namespace tst {

struct ConvGeom {
  int64_t N, Cin, H, W, Cout, Kh, Kw, Ho, Wo;
  int stride, pad, groups;
  int64_t cin_g, cout_g;
};

namespace detail {

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, int stride,
                       int pad, int groups) {
  TST_REQUIRE(x.rank() == 4, config,
              "conv2d: input must be NCHW, got " + shape_str(x.shape()));
  TST_REQUIRE(w.rank() == 4, config,
              "conv2d: weight must be [Cout,Cin/g,Kh,Kw], got " +
                  shape_str(w.shape()));
  TST_REQUIRE(stride >= 1 && pad >= 0 && groups >= 1, config,
              "conv2d: stride/pad/groups out of range");
  ConvGeom g;
  g.N = x.dim(0);
  g.Cin = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.Cout = w.dim(0);
  g.Kh = w.dim(2);
  g.Kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  TST_REQUIRE(g.Cin % groups == 0 && g.Cout % groups == 0, config,
              "conv2d: channels not divisible by groups");
  g.cin_g = g.Cin / groups;
  g.cout_g = g.Cout / groups;
  TST_REQUIRE(w.dim(1) == g.cin_g, config,
              "conv2d: weight expects " + std::to_string(w.dim(1) * groups) +
                  " input channels, input has " + std::to_string(g.Cin));
  TST_REQUIRE(g.H + 2 * pad >= g.Kh && g.W + 2 * pad >= g.Kw, config,
              "conv2d: kernel larger than padded input");
  g.Ho = (g.H + 2 * pad - g.Kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.Kw) / stride + 1;
  TST_REQUIRE(g.Ho >= 1 && g.Wo >= 1, config,
              "conv2d: empty output for input " + shape_str(x.shape()));
  return g;
}

// Writes col[(ci*Kh+kh)*Kw+kw][t] for output rows [oh0, oh1) of image n,
// group gr. Out-of-bounds taps are stored as zeros.
template <typename T>
void im2col_tile(const T* x, const ConvGeom& g, int64_t n, int64_t gr,
                 int64_t oh0, int64_t oh1, T* col) {
  const int64_t tile = (oh1 - oh0) * g.Wo;
  for (int64_t ci = 0; ci < g.cin_g; ++ci) {
    const T* xc = x + ((n * g.Cin + gr * g.cin_g + ci) * g.H) * g.W;
    for (int64_t kh = 0; kh < g.Kh; ++kh)
      for (int64_t kw = 0; kw < g.Kw; ++kw) {
        T* row = col + ((ci * g.Kh + kh) * g.Kw + kw) * tile;
        int64_t t = 0;
        for (int64_t oh = oh0; oh < oh1; ++oh) {
          const int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.H) {
            std::fill(row + t, row + t + g.Wo, T(0));
            t += g.Wo;
            continue;
          }
          const T* xr = xc + ih * g.W;
          for (int64_t ow = 0; ow < g.Wo; ++ow, ++t) {
            const int64_t iw = ow * g.stride - g.pad + kw;
            row[t] = (iw < 0 || iw >= g.W) ? T(0) : xr[iw];
          }
        }
      }
  }
}

// Scatter-add of a column-format gradient back into dx.
template <typename T>
void col2im_tile(const T* col, const ConvGeom& g, int64_t n, int64_t gr,
                 int64_t oh0, int64_t oh1, T* dx) {
  const int64_t tile = (oh1 - oh0) * g.Wo;
  for (int64_t ci = 0; ci < g.cin_g; ++ci) {
    T* xc = dx + ((n * g.Cin + gr * g.cin_g + ci) * g.H) * g.W;
    for (int64_t kh = 0; kh < g.Kh; ++kh)
      for (int64_t kw = 0; kw < g.Kw; ++kw) {
        const T* row = col + ((ci * g.Kh + kh) * g.Kw + kw) * tile;
        int64_t t = 0;
        for (int64_t oh = oh0; oh < oh1; ++oh) {
          const int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.H) {
            t += g.Wo;
            continue;
          }
          T* xr = xc + ih * g.W;
          for (int64_t ow = 0; ow < g.Wo; ++ow, ++t) {
            const int64_t iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.W) xr[iw] += row[t];
          }
        }
      }
  }
}

// Cap on output rows per im2col tile; tests shrink it to cover the partial
// tile path at small sizes.
inline int64_t& conv_tile_row_cap() {
  static thread_local int64_t cap = 0;  // 0 = derive from buffer budget
  return cap;
}

// Output rows per im2col tile, sized to keep the column buffer modest.
inline int64_t conv_tile_rows(const ConvGeom& g) {
  if (conv_tile_row_cap() > 0)
    return std::min<int64_t>(conv_tile_row_cap(), g.Ho);
  const int64_t budget = int64_t(1) << 21;  // elements
  const int64_t per_row = g.cin_g * g.Kh * g.Kw * g.Wo;
  return std::clamp<int64_t>(budget / std::max<int64_t>(per_row, 1), 1, g.Ho);
}

template <typename T>
bool conv_is_pointwise(const ConvGeom& g) {
  return g.Kh == 1 && g.Kw == 1 && g.stride == 1 && g.pad == 0 &&
         g.groups == 1;
}

template <typename T>
bool conv_is_depthwise(const ConvGeom& g) {
  return g.groups == g.Cin && g.Cout == g.Cin;
}

template <typename T>
void conv_forward(const T* x, const T* w, T* y, const ConvGeom& g) {
  if (conv_is_pointwise<T>(g)) {
    const int64_t hw = g.H * g.W;
    for (int64_t n = 0; n < g.N; ++n)
      gemm_nn(w, x + n * g.Cin * hw, y + n * g.Cout * hw, g.Cout, g.Cin, hw);
    return;
  }
  if (conv_is_depthwise<T>(g)) {
    for (int64_t n = 0; n < g.N; ++n)
      for (int64_t c = 0; c < g.Cin; ++c) {
        const T* xc = x + (n * g.Cin + c) * g.H * g.W;
        const T* wc = w + c * g.Kh * g.Kw;
        T* yc = y + (n * g.Cout + c) * g.Ho * g.Wo;
        for (int64_t oh = 0; oh < g.Ho; ++oh)
          for (int64_t ow = 0; ow < g.Wo; ++ow) {
            T acc = 0;
            for (int64_t kh = 0; kh < g.Kh; ++kh) {
              const int64_t ih = oh * g.stride - g.pad + kh;
              for (int64_t kw = 0; kw < g.Kw; ++kw) {
                const int64_t iw = ow * g.stride - g.pad + kw;
                const T v = (ih < 0 || ih >= g.H || iw < 0 || iw >= g.W)
                                ? T(0)
                                : xc[ih * g.W + iw];
                acc += wc[kh * g.Kw + kw] * v;
              }
            }
            yc[oh * g.Wo + ow] = acc;
          }
      }
    MacCounter::add(uint64_t(g.N * g.Cin * g.Ho * g.Wo * g.Kh * g.Kw));
    return;
  }
  const int64_t K = g.cin_g * g.Kh * g.Kw;
  const int64_t tile_rows = conv_tile_rows(g);
  std::vector<T>& col = scratch<T>(0);
  std::vector<T>& out = scratch<T>(2);
  col.resize(size_t(K * tile_rows * g.Wo));
  for (int64_t n = 0; n < g.N; ++n)
    for (int64_t gr = 0; gr < g.groups; ++gr)
      for (int64_t oh0 = 0; oh0 < g.Ho; oh0 += tile_rows) {
        const int64_t oh1 = std::min(g.Ho, oh0 + tile_rows);
        const int64_t tile = (oh1 - oh0) * g.Wo;
        im2col_tile(x, g, n, gr, oh0, oh1, col.data());
        const T* wg = w + gr * g.cout_g * K;
        T* yg = y + ((n * g.Cout + gr * g.cout_g) * g.Ho + oh0) * g.Wo;
        if (oh1 - oh0 == g.Ho) {
          // Full-plane tile: group output channels are contiguous.
          gemm_nn(wg, col.data(), yg, g.cout_g, K, tile);
        } else {
          out.resize(size_t(g.cout_g * tile));
          gemm_nn(wg, col.data(), out.data(), g.cout_g, K, tile);
          for (int64_t co = 0; co < g.cout_g; ++co)
            std::copy_n(out.data() + co * tile, tile, yg + co * g.Ho * g.Wo);
        }
      }
}

template <typename T>
void conv_backward(const T* x, const T* w, const T* dy, T* dx, T* dw,
                   const ConvGeom& g) {
  if (conv_is_pointwise<T>(g)) {
    const int64_t hw = g.H * g.W;
    for (int64_t n = 0; n < g.N; ++n) {
      if (dx)
        gemm_tn(w, dy + n * g.Cout * hw, dx + n * g.Cin * hw, g.Cin, g.Cout,
                hw, true);
      if (dw)
        gemm_nt(dy + n * g.Cout * hw, x + n * g.Cin * hw, dw, g.Cout, hw,
                g.Cin, true);
    }
    return;
  }
  if (conv_is_depthwise<T>(g)) {
    for (int64_t n = 0; n < g.N; ++n)
      for (int64_t c = 0; c < g.Cin; ++c) {
        const T* xc = x + (n * g.Cin + c) * g.H * g.W;
        const T* dyc = dy + (n * g.Cout + c) * g.Ho * g.Wo;
        T* dxc = dx ? dx + (n * g.Cin + c) * g.H * g.W : nullptr;
        T* dwc = dw ? dw + c * g.Kh * g.Kw : nullptr;
        for (int64_t oh = 0; oh < g.Ho; ++oh)
          for (int64_t ow = 0; ow < g.Wo; ++ow) {
            const T go = dyc[oh * g.Wo + ow];
            for (int64_t kh = 0; kh < g.Kh; ++kh) {
              const int64_t ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.H) continue;
              for (int64_t kw = 0; kw < g.Kw; ++kw) {
                const int64_t iw = ow * g.stride - g.pad + kw;
                if (iw < 0 || iw >= g.W) continue;
                if (dxc)
                  dxc[ih * g.W + iw] += go * w[c * g.Kh * g.Kw + kh * g.Kw + kw];
                if (dwc) dwc[kh * g.Kw + kw] += go * xc[ih * g.W + iw];
              }
            }
          }
      }
    return;
  }
  const int64_t K = g.cin_g * g.Kh * g.Kw;
  const int64_t tile_rows = conv_tile_rows(g);
  std::vector<T>& col = scratch<T>(0);
  std::vector<T>& colg = scratch<T>(1);
  std::vector<T>& dyt = scratch<T>(2);
  col.resize(size_t(K * tile_rows * g.Wo));
  colg.resize(size_t(K * tile_rows * g.Wo));
  for (int64_t n = 0; n < g.N; ++n)
    for (int64_t gr = 0; gr < g.groups; ++gr)
      for (int64_t oh0 = 0; oh0 < g.Ho; oh0 += tile_rows) {
        const int64_t oh1 = std::min(g.Ho, oh0 + tile_rows);
        const int64_t tile = (oh1 - oh0) * g.Wo;
        const T* wg = w + gr * g.cout_g * K;
        const T* dyg = dy + ((n * g.Cout + gr * g.cout_g) * g.Ho + oh0) * g.Wo;
        const T* dyc = dyg;
        if (oh1 - oh0 != g.Ho) {
          dyt.resize(size_t(g.cout_g * tile));
          for (int64_t co = 0; co < g.cout_g; ++co)
            std::copy_n(dyg + co * g.Ho * g.Wo, tile, dyt.data() + co * tile);
          dyc = dyt.data();
        }
        if (dw) {
          im2col_tile(x, g, n, gr, oh0, oh1, col.data());
          gemm_nt(dyc, col.data(), dw + gr * g.cout_g * K, g.cout_g, tile, K,
                  true);
        }
        if (dx) {
          gemm_tn(wg, dyc, colg.data(), K, g.cout_g, tile, false);
          col2im_tile(colg.data(), g, n, gr, oh0, oh1, dx);
        }
      }
}

}  // namespace detail

// 2-D convolution with symmetric zero padding. Pass an undefined bias tensor
// for a bias-free filter. Output dims follow (H + 2*pad - Kh) / stride + 1
// with integer (floor) division.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride = 1, int pad = 0, int groups = 1) {
  const ConvGeom g = detail::conv_geometry(x, w, stride, pad, groups);
  if (bias.defined())
    TST_REQUIRE(bias.numel() == g.Cout, config,
                "conv2d: bias has " + std::to_string(bias.numel()) +
                    " entries for " + std::to_string(g.Cout) + " channels");
  Tensor<T> y({g.N, g.Cout, g.Ho, g.Wo});
  detail::conv_forward(x.data(), w.data(), y.data(), g);
  if (bias.defined()) {
    T* yp = y.data();
    const T* bp = bias.data();
    for (int64_t n = 0; n < g.N; ++n)
      for (int64_t c = 0; c < g.Cout; ++c) {
        const T b = bp[c];
        T* row = yp + (n * g.Cout + c) * g.Ho * g.Wo;
        for (int64_t i = 0; i < g.Ho * g.Wo; ++i) row[i] += b;
      }
  }
  if (bias.defined()) {
    detail::record_op<T>("conv2d", {x, w, bias}, y, [x, w, bias, y, g]() mutable {
      const T* dy = y.node()->grad.data();
      detail::conv_backward(
          x.data(), w.data(), dy,
          x.requires_grad() ? x.grad_buffer().data() : nullptr,
          w.requires_grad() ? w.grad_buffer().data() : nullptr, g);
      if (bias.requires_grad()) {
        auto& db = bias.grad_buffer();
        for (int64_t n = 0; n < g.N; ++n)
          for (int64_t c = 0; c < g.Cout; ++c) {
            const T* row = dy + (n * g.Cout + c) * g.Ho * g.Wo;
            T s = 0;
            for (int64_t i = 0; i < g.Ho * g.Wo; ++i) s += row[i];
            db[size_t(c)] += s;
          }
      }
    });
  } else {
    detail::record_op<T>("conv2d", {x, w}, y, [x, w, y, g]() mutable {
      detail::conv_backward(
          x.data(), w.data(), y.node()->grad.data(),
          x.requires_grad() ? x.grad_buffer().data() : nullptr,
          w.requires_grad() ? w.grad_buffer().data() : nullptr, g);
    });
  }
  return y;
}

// Batch normalization over N, H, W per channel. Training mode normalizes by
// the biased batch variance and folds the unbiased one into the running
// estimate; eval mode applies the running statistics. Running buffers are
// plain state, never taped.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5)) {
  TST_REQUIRE(x.rank() == 4, config,
              "batch_norm2d: input must be NCHW, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TST_REQUIRE(gamma.numel() == C && beta.numel() == C &&
                  running_mean.numel() == C && running_var.numel() == C,
              config, "batch_norm2d: parameter size mismatch for C=" +
                          std::to_string(C));
  const int64_t m = N * H * W;
  const int64_t hw = H * W;
  Tensor<T> y(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  std::vector<T> mean(size_t(C), T(0)), inv(size_t(C), T(0));
  if (training) {
    TST_REQUIRE(m >= 2, config,
                "batch_norm2d: training variance is degenerate over a single "
                "element per channel (N*H*W = 1)");
    for (int64_t c = 0; c < C; ++c) {
      T s = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* row = xp + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) s += row[i];
      }
      const T mu = s / T(m);
      T v = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* row = xp + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = row[i] - mu;
          v += d * d;
        }
      }
      const T var = v / T(m);
      mean[size_t(c)] = mu;
      inv[size_t(c)] = T(1) / std::sqrt(var + eps);
      running_mean.values()[size_t(c)] =
          (T(1) - momentum) * running_mean.values()[size_t(c)] + momentum * mu;
      running_var.values()[size_t(c)] =
          (T(1) - momentum) * running_var.values()[size_t(c)] +
          momentum * var * T(m) / T(m - 1);
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[size_t(c)] = running_mean.values()[size_t(c)];
      inv[size_t(c)] = T(1) / std::sqrt(running_var.values()[size_t(c)] + eps);
    }
  }
  const T* gp = gamma.data();
  const T* bp = beta.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T mu = mean[size_t(c)], iv = inv[size_t(c)];
      const T gc = gp[c], bc = bp[c];
      const T* xr = xp + (n * C + c) * hw;
      T* yr = yp + (n * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) yr[i] = gc * (xr[i] - mu) * iv + bc;
    }
  detail::record_op<T>(
      "batch_norm2d", {x, gamma, beta}, y,
      [x, gamma, beta, y, mean, inv, training, N, C, hw, m]() mutable {
        const T* dy = y.node()->grad.data();
        const T* xp = x.data();
        const T* gp = gamma.data();
        auto* dxv = x.requires_grad() ? &x.grad_buffer() : nullptr;
        auto* dgv = gamma.requires_grad() ? &gamma.grad_buffer() : nullptr;
        auto* dbv = beta.requires_grad() ? &beta.grad_buffer() : nullptr;
        for (int64_t c = 0; c < C; ++c) {
          const T mu = mean[size_t(c)], iv = inv[size_t(c)];
          T sum_dy = 0, sum_dy_xhat = 0;
          for (int64_t n = 0; n < N; ++n) {
            const T* dyr = dy + (n * C + c) * hw;
            const T* xr = xp + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              sum_dy += dyr[i];
              sum_dy_xhat += dyr[i] * (xr[i] - mu) * iv;
            }
          }
          if (dgv) (*dgv)[size_t(c)] += sum_dy_xhat;
          if (dbv) (*dbv)[size_t(c)] += sum_dy;
          if (dxv) {
            const T gc = gp[c];
            for (int64_t n = 0; n < N; ++n) {
              const T* dyr = dy + (n * C + c) * hw;
              const T* xr = xp + (n * C + c) * hw;
              T* dxr = dxv->data() + (n * C + c) * hw;
              if (training) {
                const T k1 = sum_dy / T(m), k2 = sum_dy_xhat / T(m);
                for (int64_t i = 0; i < hw; ++i) {
                  const T xhat = (xr[i] - mu) * iv;
                  dxr[i] += gc * iv * (dyr[i] - k1 - xhat * k2);
                }
              } else {
                for (int64_t i = 0; i < hw; ++i) dxr[i] += gc * iv * dyr[i];
              }
            }
          }
        }
      });
  return y;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int64_t Ht, int64_t Wt);

// Mean over non-overlapping windows; source dims must divide evenly by the
// target. The pyramid strides guarantee that for in-model use.
template <typename T>
Tensor<T> avg_pool_to(const Tensor<T>& x, int64_t Ht, int64_t Wt) {
  TST_REQUIRE(x.rank() == 4, config, "avg_pool_to: input must be NCHW");
  const int64_t H = x.dim(2), W = x.dim(3);
  TST_REQUIRE(Ht >= 1 && Wt >= 1 && H % Ht == 0 && W % Wt == 0, config,
              "avg_pool_to: target " + std::to_string(Ht) + "x" +
                  std::to_string(Wt) + " does not divide source " +
                  std::to_string(H) + "x" + std::to_string(W));
  return adaptive_avg_pool(x, Ht, Wt);
}

// Adaptive window mean; window i spans [floor(i*H/Ht), ceil((i+1)*H/Ht)).
// Equals avg_pool_to whenever the dims divide evenly, and handles the odd
// tail sizes produced by non-multiple-of-64 inputs.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int64_t Ht, int64_t Wt) {
  TST_REQUIRE(x.rank() == 4, config, "adaptive_avg_pool: input must be NCHW");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TST_REQUIRE(Ht >= 1 && Wt >= 1 && Ht <= H && Wt <= W, config,
              "adaptive_avg_pool: target " + std::to_string(Ht) + "x" +
                  std::to_string(Wt) + " exceeds source " + std::to_string(H) +
                  "x" + std::to_string(W));
  Tensor<T> y({N, C, Ht, Wt});
  const T* xp = x.data();
  T* yp = y.data();
  auto bounds = [](int64_t i, int64_t src, int64_t dst, int64_t& b0,
                   int64_t& b1) {
    b0 = (i * src) / dst;
    b1 = ((i + 1) * src + dst - 1) / dst;
  };
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xplane = xp + nc * H * W;
    T* yplane = yp + nc * Ht * Wt;
    for (int64_t oh = 0; oh < Ht; ++oh) {
      int64_t h0, h1;
      bounds(oh, H, Ht, h0, h1);
      for (int64_t ow = 0; ow < Wt; ++ow) {
        int64_t w0, w1;
        bounds(ow, W, Wt, w0, w1);
        T acc = 0;
        for (int64_t i = h0; i < h1; ++i)
          for (int64_t j = w0; j < w1; ++j) acc += xplane[i * W + j];
        yplane[oh * Wt + ow] = acc / T((h1 - h0) * (w1 - w0));
      }
    }
  }
  detail::record_op<T>(
      "adaptive_avg_pool", {x}, y, [x, y, N, C, H, W, Ht, Wt]() mutable {
        const T* dy = y.node()->grad.data();
        T* dx = x.grad_buffer().data();
        auto bounds = [](int64_t i, int64_t src, int64_t dst, int64_t& b0,
                         int64_t& b1) {
          b0 = (i * src) / dst;
          b1 = ((i + 1) * src + dst - 1) / dst;
        };
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const T* dyp = dy + nc * Ht * Wt;
          T* dxp = dx + nc * H * W;
          for (int64_t oh = 0; oh < Ht; ++oh) {
            int64_t h0, h1;
            bounds(oh, H, Ht, h0, h1);
            for (int64_t ow = 0; ow < Wt; ++ow) {
              int64_t w0, w1;
              bounds(ow, W, Wt, w0, w1);
              const T gshare = dyp[oh * Wt + ow] / T((h1 - h0) * (w1 - w0));
              for (int64_t i = h0; i < h1; ++i)
                for (int64_t j = w0; j < w1; ++j) dxp[i * W + j] += gshare;
            }
          }
        }
      });
  return y;
}

// Copy of channels [c0, c1); gradient scatters back into the source range.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1) {
  TST_REQUIRE(x.rank() == 4, config, "slice_channels: input must be NCHW");
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  TST_REQUIRE(0 <= c0 && c0 < c1 && c1 <= C, config,
              "slice_channels: range [" + std::to_string(c0) + "," +
                  std::to_string(c1) + ") out of " + std::to_string(C));
  const int64_t S = c1 - c0;
  Tensor<T> y({N, S, x.dim(2), x.dim(3)});
  for (int64_t n = 0; n < N; ++n)
    std::copy_n(x.data() + (n * C + c0) * hw, S * hw,
                y.data() + n * S * hw);
  detail::record_op<T>("slice_channels", {x}, y,
                       [x, y, N, C, hw, c0, S]() mutable {
                         const T* dy = y.node()->grad.data();
                         T* dx = x.grad_buffer().data();
                         for (int64_t n = 0; n < N; ++n) {
                           T* dst = dx + (n * C + c0) * hw;
                           const T* src = dy + n * S * hw;
                           for (int64_t i = 0; i < S * hw; ++i)
                             dst[i] += src[i];
                         }
                       });
  return y;
}

// Per-position gate: multiplies every channel of x by a one-channel map.
template <typename T>
Tensor<T> mul_gate(const Tensor<T>& x, const Tensor<T>& gate) {
  TST_REQUIRE(x.rank() == 4 && gate.rank() == 4, config,
              "mul_gate: inputs must be NCHW");
  TST_REQUIRE(gate.dim(0) == x.dim(0) && gate.dim(1) == 1 &&
                  gate.dim(2) == x.dim(2) && gate.dim(3) == x.dim(3),
              config,
              "mul_gate: gate must be [N,1,H,W] matching " +
                  shape_str(x.shape()) + ", got " + shape_str(gate.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  const T* xp = x.data();
  const T* gp = gate.data();
  T* yp = y.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* xr = xp + (n * C + c) * hw;
      const T* gr = gp + n * hw;
      T* yr = yp + (n * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) yr[i] = xr[i] * gr[i];
    }
  detail::record_op<T>("mul_gate", {x, gate}, y,
                       [x, gate, y, N, C, hw]() mutable {
    const T* dy = y.node()->grad.data();
    const T* xp = x.data();
    const T* gp = gate.data();
    if (x.requires_grad()) {
      T* dx = x.grad_buffer().data();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < hw; ++i)
            dx[(n * C + c) * hw + i] +=
                dy[(n * C + c) * hw + i] * gp[n * hw + i];
    }
    if (gate.requires_grad()) {
      T* dg = gate.grad_buffer().data();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < hw; ++i)
            dg[n * hw + i] +=
                dy[(n * C + c) * hw + i] * xp[(n * C + c) * hw + i];
    }
  });
  return y;
}

// Bilinear enlargement with half-pixel source mapping and edge clamping
// (align_corners = false). Targets smaller than the source are rejected.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int64_t Ht, int64_t Wt) {
  TST_REQUIRE(x.rank() == 4, config, "bilinear_upsample: input must be NCHW");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TST_REQUIRE(Ht >= H && Wt >= W, config,
              "bilinear_upsample: target " + std::to_string(Ht) + "x" +
                  std::to_string(Wt) + " is smaller than source " +
                  std::to_string(H) + "x" + std::to_string(W));
  struct Taps {
    std::vector<int64_t> lo, hi;
    std::vector<T> f;
  };
  auto make_taps = [](int64_t src, int64_t dst) {
    Taps t;
    t.lo.resize(size_t(dst));
    t.hi.resize(size_t(dst));
    t.f.resize(size_t(dst));
    for (int64_t o = 0; o < dst; ++o) {
      const double s = std::max(
          0.0, (double(o) + 0.5) * double(src) / double(dst) - 0.5);
      int64_t lo = std::min(int64_t(s), src - 1);
      t.lo[size_t(o)] = lo;
      t.hi[size_t(o)] = std::min(lo + 1, src - 1);
      t.f[size_t(o)] = T(s - double(lo));
    }
    return t;
  };
  const Taps ty = make_taps(H, Ht), tx = make_taps(W, Wt);
  Tensor<T> y({N, C, Ht, Wt});
  const T* xp = x.data();
  T* yp = y.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xplane = xp + nc * H * W;
    T* yplane = yp + nc * Ht * Wt;
    for (int64_t oh = 0; oh < Ht; ++oh) {
      const T* r0 = xplane + ty.lo[size_t(oh)] * W;
      const T* r1 = xplane + ty.hi[size_t(oh)] * W;
      const T fy = ty.f[size_t(oh)];
      for (int64_t ow = 0; ow < Wt; ++ow) {
        const int64_t x0 = tx.lo[size_t(ow)], x1 = tx.hi[size_t(ow)];
        const T fx = tx.f[size_t(ow)];
        const T top = r0[x0] * (T(1) - fx) + r0[x1] * fx;
        const T bot = r1[x0] * (T(1) - fx) + r1[x1] * fx;
        yplane[oh * Wt + ow] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  detail::record_op<T>(
      "bilinear_upsample", {x}, y, [x, y, ty, tx, N, C, H, W, Ht, Wt]() mutable {
        const T* dy = y.node()->grad.data();
        T* dx = x.grad_buffer().data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const T* dyp = dy + nc * Ht * Wt;
          T* dxp = dx + nc * H * W;
          for (int64_t oh = 0; oh < Ht; ++oh) {
            const int64_t y0 = ty.lo[size_t(oh)], y1 = ty.hi[size_t(oh)];
            const T fy = ty.f[size_t(oh)];
            for (int64_t ow = 0; ow < Wt; ++ow) {
              const int64_t x0 = tx.lo[size_t(ow)], x1 = tx.hi[size_t(ow)];
              const T fx = tx.f[size_t(ow)];
              const T g = dyp[oh * Wt + ow];
              dxp[y0 * W + x0] += g * (T(1) - fy) * (T(1) - fx);
              dxp[y0 * W + x1] += g * (T(1) - fy) * fx;
              dxp[y1 * W + x0] += g * fy * (T(1) - fx);
              dxp[y1 * W + x1] += g * fy * fx;
            }
          }
        }
      });
  return y;
}

}  // namespace tst
