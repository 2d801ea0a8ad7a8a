#pragma once

// Brute-force reference implementations used to validate the fast kernels,
// plus a central-difference gradient checker. Everything here is written as
// plain nested loops over explicit indices and stays independent of the
// production code paths it checks. Used by the test suites and the CLI
// selftest command; never by the model itself.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tst/tensor.hpp"

namespace tst::ref {

// out[n][co][oh][ow] accumulated over ci, kh, kw with zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad, int groups) {
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), Cg = w.dim(1), Kh = w.dim(2), Kw = w.dim(3);
  const int64_t Ho = (H + 2 * pad - Kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - Kw) / stride + 1;
  const int64_t cin_g = Cin / groups, cout_g = Cout / groups;
  Tensor<T> y({N, Cout, Ho, Wo});
  const T* xp = x.data();
  const T* wp = w.data();
  T* yp = y.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      const int64_t g = co / cout_g;
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          T acc = b.defined() ? b.values()[size_t(co)] : T(0);
          for (int64_t ci = 0; ci < cin_g; ++ci)
            for (int64_t kh = 0; kh < Kh; ++kh)
              for (int64_t kw = 0; kw < Kw; ++kw) {
                const int64_t ih = oh * stride - pad + kh;
                const int64_t iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += xp[((n * Cin + g * cin_g + ci) * H + ih) * W + iw] *
                       wp[((co * Cg + ci) * Kh + kh) * Kw + kw];
              }
          yp[((n * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }
    }
  return y;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> c({M, N});
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < N; ++j) {
      T acc = 0;
      for (int64_t k = 0; k < K; ++k)
        acc += a.values()[size_t(i * K + k)] * b.values()[size_t(k * N + j)];
      c.values()[size_t(i * N + j)] = acc;
    }
  return c;
}

// Two-pass per-channel mean/variance, biased variance in the normalizer.
template <typename T>
Tensor<T> batch_norm2d_train(const Tensor<T>& x, const Tensor<T>& gamma,
                             const Tensor<T>& beta, T eps) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t m = N * H * W;
  Tensor<T> y(x.shape());
  for (int64_t c = 0; c < C; ++c) {
    T mean = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < H * W; ++i)
        mean += x.values()[size_t((n * C + c) * H * W + i)];
    mean /= T(m);
    T var = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < H * W; ++i) {
        T d = x.values()[size_t((n * C + c) * H * W + i)] - mean;
        var += d * d;
      }
    var /= T(m);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < H * W; ++i) {
        const size_t at = size_t((n * C + c) * H * W + i);
        y.values()[at] = gamma.values()[size_t(c)] *
                             (x.values()[at] - mean) * inv +
                         beta.values()[size_t(c)];
      }
  }
  return y;
}

template <typename T>
Tensor<T> batch_norm2d_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                            const Tensor<T>& beta, const Tensor<T>& rmean,
                            const Tensor<T>& rvar, T eps) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T inv = T(1) / std::sqrt(rvar.values()[size_t(c)] + eps);
      for (int64_t i = 0; i < HW; ++i) {
        const size_t at = size_t((n * C + c) * HW + i);
        y.values()[at] = gamma.values()[size_t(c)] *
                             (x.values()[at] - rmean.values()[size_t(c)]) *
                             inv +
                         beta.values()[size_t(c)];
      }
    }
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1;
  const int64_t L = s[size_t(axis)];
  for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
  Tensor<T> y(s);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      T mx = x.values()[size_t(o * L * inner + in)];
      for (int64_t l = 1; l < L; ++l)
        mx = std::max(mx, x.values()[size_t((o * L + l) * inner + in)]);
      T sum = 0;
      for (int64_t l = 0; l < L; ++l)
        sum += std::exp(x.values()[size_t((o * L + l) * inner + in)] - mx);
      for (int64_t l = 0; l < L; ++l) {
        const size_t at = size_t((o * L + l) * inner + in);
        y.values()[at] = std::exp(x.values()[at] - mx) / sum;
      }
    }
  return y;
}

// Mean over non-overlapping windows; requires exact divisibility.
template <typename T>
Tensor<T> avg_pool_to(const Tensor<T>& x, int64_t Ht, int64_t Wt) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t wh = H / Ht, ww = W / Wt;
  Tensor<T> y({N, C, Ht, Wt});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < Ht; ++oh)
        for (int64_t ow = 0; ow < Wt; ++ow) {
          T acc = 0;
          for (int64_t i = 0; i < wh; ++i)
            for (int64_t j = 0; j < ww; ++j)
              acc += x.values()[size_t(((n * C + c) * H + oh * wh + i) * W +
                                       ow * ww + j)];
          y.values()[size_t(((n * C + c) * Ht + oh) * Wt + ow)] =
              acc / T(wh * ww);
        }
  return y;
}

// Window i covers [floor(i*H/Ht), ceil((i+1)*H/Ht)).
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int64_t Ht, int64_t Wt) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, Ht, Wt});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < Ht; ++oh)
        for (int64_t ow = 0; ow < Wt; ++ow) {
          const int64_t h0 = (oh * H) / Ht;
          const int64_t h1 = ((oh + 1) * H + Ht - 1) / Ht;
          const int64_t w0 = (ow * W) / Wt;
          const int64_t w1 = ((ow + 1) * W + Wt - 1) / Wt;
          T acc = 0;
          for (int64_t i = h0; i < h1; ++i)
            for (int64_t j = w0; j < w1; ++j)
              acc += x.values()[size_t(((n * C + c) * H + i) * W + j)];
          y.values()[size_t(((n * C + c) * Ht + oh) * Wt + ow)] =
              acc / T((h1 - h0) * (w1 - w0));
        }
  return y;
}

// Half-pixel source mapping with edge clamping (align_corners = false).
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int64_t Ht, int64_t Wt) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, Ht, Wt});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < Ht; ++oh)
        for (int64_t ow = 0; ow < Wt; ++ow) {
          const double sy =
              std::max(0.0, (double(oh) + 0.5) * double(H) / double(Ht) - 0.5);
          const double sx =
              std::max(0.0, (double(ow) + 0.5) * double(W) / double(Wt) - 0.5);
          const int64_t y0 = std::min(int64_t(sy), H - 1);
          const int64_t x0 = std::min(int64_t(sx), W - 1);
          const int64_t y1 = std::min(y0 + 1, H - 1);
          const int64_t x1 = std::min(x0 + 1, W - 1);
          const double fy = sy - double(y0);
          const double fx = sx - double(x0);
          auto px = [&](int64_t i, int64_t j) {
            return double(x.values()[size_t(((n * C + c) * H + i) * W + j)]);
          };
          const double v = px(y0, x0) * (1 - fy) * (1 - fx) +
                           px(y0, x1) * (1 - fy) * fx +
                           px(y1, x0) * fy * (1 - fx) + px(y1, x1) * fy * fx;
          y.values()[size_t(((n * C + c) * Ht + oh) * Wt + ow)] = T(v);
        }
  return y;
}

// Scaled dot-product attention over pre-projected per-head tokens.
// q: [heads][Nq][dqk], k: [heads][Nk][dqk], v: [heads][Nk][dv],
// result [heads][Nq][dv]. Double loops per head and query position.
template <typename T>
std::vector<T> attention(const std::vector<T>& q, const std::vector<T>& k,
                         const std::vector<T>& v, int64_t heads, int64_t Nq,
                         int64_t Nk, int64_t dqk, int64_t dv) {
  std::vector<T> out(size_t(heads * Nq * dv), T(0));
  const T scale = T(1) / std::sqrt(T(dqk));
  std::vector<T> logits(size_t(Nk), T(0));
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < Nq; ++i) {
      for (int64_t j = 0; j < Nk; ++j) {
        T acc = 0;
        for (int64_t d = 0; d < dqk; ++d)
          acc += q[size_t((h * Nq + i) * dqk + d)] *
                 k[size_t((h * Nk + j) * dqk + d)];
        logits[size_t(j)] = acc * scale;
      }
      T mx = logits[0];
      for (int64_t j = 1; j < Nk; ++j) mx = std::max(mx, logits[size_t(j)]);
      T sum = 0;
      for (int64_t j = 0; j < Nk; ++j) {
        logits[size_t(j)] = std::exp(logits[size_t(j)] - mx);
        sum += logits[size_t(j)];
      }
      for (int64_t j = 0; j < Nk; ++j)
        for (int64_t d = 0; d < dv; ++d)
          out[size_t((h * Nq + i) * dv + d)] += logits[size_t(j)] / sum *
                                                v[size_t((h * Nk + j) * dv + d)];
    }
  return out;
}

// Scale-invariant log loss over masked pixels, scalar accumulation.
template <typename T>
T silog(const std::vector<T>& pred, const std::vector<T>& gt,
        const std::vector<T>& mask, T lambda, T alpha) {
  T s1 = 0, s2 = 0;
  int64_t n = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == T(0)) continue;
    const T d = std::log(pred[i]) - std::log(gt[i]);
    s1 += d;
    s2 += d * d;
    ++n;
  }
  const T v = s2 / T(n) - lambda * (s1 / T(n)) * (s1 / T(n));
  return alpha * std::sqrt(std::max(v, T(0)));
}

struct RefMetrics {
  double delta1 = 0, delta2 = 0, delta3 = 0;
  double abs_rel = 0, sq_rel = 0, rmse = 0;
};

// Per-pixel loop over already cropped and masked values.
template <typename T>
RefMetrics metrics(const std::vector<T>& pred, const std::vector<T>& gt) {
  RefMetrics m;
  const double n = double(pred.size());
  double se = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double p = double(pred[i]), g = double(gt[i]);
    const double ratio = std::max(p / g, g / p);
    if (ratio < 1.25) m.delta1 += 1;
    if (ratio < 1.25 * 1.25) m.delta2 += 1;
    if (ratio < 1.25 * 1.25 * 1.25) m.delta3 += 1;
    m.abs_rel += std::abs(p - g) / g;
    m.sq_rel += (p - g) * (p - g) / g;
    se += (p - g) * (p - g);
  }
  m.delta1 /= n;
  m.delta2 /= n;
  m.delta3 /= n;
  m.abs_rel /= n;
  m.sq_rel /= n;
  m.rmse = std::sqrt(se / n);
  return m;
}

struct FdReport {
  double max_rel_err = 0;
  int64_t probes = 0;
  std::string worst;

  bool ok(double tol) const { return probes > 0 && max_rel_err < tol; }
};

// Central-difference check of d(loss)/d(leaf) for every listed leaf.
// loss_fn must be a pure function of the leaf values. Large leaves are
// subsampled deterministically. 64-bit use only.
template <typename LossFn>
FdReport check_gradients(std::vector<Tensor<double>> leaves, LossFn loss_fn,
                         double h = 1e-5, int64_t max_probes_per_leaf = 24,
                         uint64_t probe_seed = 17) {
  for (auto& leaf : leaves) leaf.set_requires_grad(true).zero_grad();
  {
    TapeScope<double> scope;
    Tensor<double> loss = loss_fn();
    backward(loss);
  }
  FdReport rep;
  Rng rng(probe_seed);
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = leaves[li];
    TST_REQUIRE(leaf.has_grad(), usage,
                "gradient check: leaf " + std::to_string(li) +
                    " received no gradient");
    std::vector<int64_t> idx;
    if (leaf.numel() <= max_probes_per_leaf) {
      idx.resize(size_t(leaf.numel()));
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = int64_t(i);
    } else {
      for (int64_t i = 0; i < max_probes_per_leaf; ++i)
        idx.push_back(rng.uniform_int(0, leaf.numel() - 1));
    }
    for (int64_t i : idx) {
      const double keep = leaf.values()[size_t(i)];
      leaf.values()[size_t(i)] = keep + h;
      const double up = loss_fn().item();
      leaf.values()[size_t(i)] = keep - h;
      const double dn = loss_fn().item();
      leaf.values()[size_t(i)] = keep;
      const double fd = (up - dn) / (2 * h);
      const double an = leaf.grad()[size_t(i)];
      const double rel =
          std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      ++rep.probes;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "leaf " + std::to_string(li) + " elem " +
                    std::to_string(i) + " analytic " + std::to_string(an) +
                    " fd " + std::to_string(fd);
      }
    }
  }
  return rep;
}

}  // namespace tst::ref
