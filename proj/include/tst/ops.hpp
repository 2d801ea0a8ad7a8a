#pragma once

// Differentiable tensor kit: elementwise arithmetic, reductions, matrix
// products, softmax and layout ops. Binary ops take equal shapes or a
// single-element second operand. Backward rules work on raw buffers and are
// never themselves taped.

#include <algorithm>
#include <cmath>

#include "tst/gemm.hpp"
#include "tst/tensor.hpp"

namespace tst {

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a,
                        const Tensor<T>& b) {
  TST_REQUIRE(a.shape() == b.shape(), config,
              std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                  " vs " + shape_str(b.shape()));
}

template <typename T>
bool scalar_like(const Tensor<T>& t) {
  return t.numel() == 1;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bs = detail::scalar_like(b) && a.numel() != 1;
  if (!bs) detail::require_same_shape("add", a, b);
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] + (bs ? bp[0] : bp[i]);
  detail::record_op<T>("add", {a, b}, y, [a, b, y, bs]() mutable {
    auto dy = y.node()->grad;
    if (a.requires_grad()) detail::axpy(a.grad_buffer(), {dy});
    if (b.requires_grad()) {
      auto& db = b.grad_buffer();
      if (bs) {
        T s = 0;
        for (T g : dy) s += g;
        db[0] += s;
      } else {
        detail::axpy(db, {dy});
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bs = detail::scalar_like(b) && a.numel() != 1;
  if (!bs) detail::require_same_shape("sub", a, b);
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] - (bs ? bp[0] : bp[i]);
  detail::record_op<T>("sub", {a, b}, y, [a, b, y, bs]() mutable {
    auto dy = y.node()->grad;
    if (a.requires_grad()) detail::axpy(a.grad_buffer(), {dy});
    if (b.requires_grad()) {
      auto& db = b.grad_buffer();
      if (bs) {
        T s = 0;
        for (T g : dy) s += g;
        db[0] -= s;
      } else {
        detail::axpy(db, {dy}, T(-1));
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bs = detail::scalar_like(b) && a.numel() != 1;
  if (!bs) detail::require_same_shape("mul", a, b);
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] * (bs ? bp[0] : bp[i]);
  detail::record_op<T>("mul", {a, b}, y, [a, b, y, bs]() mutable {
    auto dy = y.node()->grad;
    const T* ap = a.data();
    const T* bp = b.data();
    const int64_t n = a.numel();
    if (a.requires_grad()) {
      auto& da = a.grad_buffer();
      for (int64_t i = 0; i < n; ++i) da[size_t(i)] += dy[size_t(i)] * (bs ? bp[0] : bp[i]);
    }
    if (b.requires_grad()) {
      auto& db = b.grad_buffer();
      if (bs) {
        T s = 0;
        for (int64_t i = 0; i < n; ++i) s += dy[size_t(i)] * ap[i];
        db[0] += s;
      } else {
        for (int64_t i = 0; i < n; ++i) db[size_t(i)] += dy[size_t(i)] * ap[i];
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] * c;
  detail::record_op<T>("scale", {a}, y, [a, y, c]() mutable {
    detail::axpy(a.grad_buffer(), {y.node()->grad}, c);
  });
  return y;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] + c;
  detail::record_op<T>("add_scalar", {a}, y, [a, y]() mutable {
    detail::axpy(a.grad_buffer(), {y.node()->grad});
  });
  return y;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    TST_REQUIRE(ap[i] > T(0), numeric,
                "log: nonpositive input " + std::to_string(double(ap[i])));
    yp[i] = std::log(ap[i]);
  }
  detail::record_op<T>("log", {a}, y, [a, y]() mutable {
    auto dy = y.node()->grad;
    auto& da = a.grad_buffer();
    const T* ap = a.data();
    for (size_t i = 0; i < da.size(); ++i) da[i] += dy[i] / ap[i];
  });
  return y;
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    TST_REQUIRE(ap[i] >= T(0), numeric,
                "sqrt: negative input " + std::to_string(double(ap[i])));
    yp[i] = std::sqrt(ap[i]);
  }
  detail::record_op<T>("sqrt", {a}, y, [a, y]() mutable {
    auto dy = y.node()->grad;
    auto& da = a.grad_buffer();
    const T* yp = y.data();
    for (size_t i = 0; i < da.size(); ++i)
      da[i] += dy[i] * T(0.5) / yp[i];
  });
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T x = ap[i];
    yp[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                      : std::exp(x) / (T(1) + std::exp(x));
  }
  detail::record_op<T>("sigmoid", {a}, y, [a, y]() mutable {
    auto dy = y.node()->grad;
    auto& da = a.grad_buffer();
    const T* yp = y.data();
    for (size_t i = 0; i < da.size(); ++i)
      da[i] += dy[i] * yp[i] * (T(1) - yp[i]);
  });
  return y;
}

// Clamp to [0, 6]; subgradient zero at both kinks.
template <typename T>
Tensor<T> relu6(const Tensor<T>& a) {
  Tensor<T> y(a.shape());
  const T* ap = a.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = std::clamp(ap[i], T(0), T(6));
  detail::record_op<T>("relu6", {a}, y, [a, y]() mutable {
    auto dy = y.node()->grad;
    auto& da = a.grad_buffer();
    const T* ap = a.data();
    for (size_t i = 0; i < da.size(); ++i)
      if (ap[i] > T(0) && ap[i] < T(6)) da[i] += dy[i];
  });
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  Tensor<T> y = Tensor<T>::scalar(s);
  detail::record_op<T>("sum", {a}, y, [a, y]() mutable {
    const T g = y.node()->grad[0];
    auto& da = a.grad_buffer();
    for (T& v : da) v += g;
  });
  return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  const T inv = T(1) / T(a.numel());
  Tensor<T> y = Tensor<T>::scalar(s * inv);
  detail::record_op<T>("mean", {a}, y, [a, y, inv]() mutable {
    const T g = y.node()->grad[0] * inv;
    auto& da = a.grad_buffer();
    for (T& v : da) v += g;
  });
  return y;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  TST_REQUIRE(a.rank() == 2 && b.rank() == 2, config,
              "matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                  " and " + shape_str(b.shape()));
  TST_REQUIRE(a.dim(1) == b.dim(0), config,
              "matmul: inner dims disagree, " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> y({M, N});
  detail::gemm_nn(a.data(), b.data(), y.data(), M, K, N);
  detail::record_op<T>("matmul", {a, b}, y, [a, b, y, M, K, N]() mutable {
    const T* dy = y.node()->grad.data();
    if (a.requires_grad())
      detail::gemm_nt(dy, b.data(), a.grad_buffer().data(), M, N, K, true);
    if (b.requires_grad())
      detail::gemm_tn(a.data(), dy, b.grad_buffer().data(), K, M, N, true);
  });
  return y;
}

// Batched product over matching leading dim. trans_b selects
// [B,M,K]x[B,N,K]^T -> [B,M,N] instead of [B,M,K]x[B,K,N] -> [B,M,N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  TST_REQUIRE(a.rank() == 3 && b.rank() == 3, config,
              "bmm: expects rank-3 operands, got " + shape_str(a.shape()) +
                  " and " + shape_str(b.shape()));
  TST_REQUIRE(a.dim(0) == b.dim(0), config, "bmm: batch dims disagree");
  const int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const int64_t N = trans_b ? b.dim(1) : b.dim(2);
  TST_REQUIRE((trans_b ? b.dim(2) : b.dim(1)) == K, config,
              "bmm: inner dims disagree, " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  Tensor<T> y({B, M, N});
  for (int64_t i = 0; i < B; ++i) {
    const T* ap = a.data() + i * M * K;
    const T* bp = b.data() + i * (trans_b ? N * K : K * N);
    T* yp = y.data() + i * M * N;
    if (trans_b)
      detail::gemm_nt(ap, bp, yp, M, K, N);
    else
      detail::gemm_nn(ap, bp, yp, M, K, N);
  }
  detail::record_op<T>(
      "bmm", {a, b}, y, [a, b, y, B, M, K, N, trans_b]() mutable {
        const T* dy = y.node()->grad.data();
        for (int64_t i = 0; i < B; ++i) {
          const T* dyi = dy + i * M * N;
          const T* ap = a.data() + i * M * K;
          const T* bp = b.data() + i * (trans_b ? N * K : K * N);
          if (a.requires_grad()) {
            T* da = a.grad_buffer().data() + i * M * K;
            if (trans_b)
              detail::gemm_nn(dyi, bp, da, M, N, K, true);
            else
              detail::gemm_nt(dyi, bp, da, M, N, K, true);
          }
          if (b.requires_grad()) {
            T* db = b.grad_buffer().data() + i * (trans_b ? N * K : K * N);
            if (trans_b)
              detail::gemm_tn(dyi, ap, db, N, M, K, true);
            else
              detail::gemm_tn(ap, dyi, db, K, M, N, true);
          }
        }
      });
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  TST_REQUIRE(axis >= 0 && axis < x.rank(), config,
              "softmax: axis " + std::to_string(axis) + " out of range for " +
                  shape_str(x.shape()));
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1;
  const int64_t L = s[size_t(axis)];
  for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
  Tensor<T> y(s);
  const T* xp = x.data();
  T* yp = y.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * L * inner + in;
      T mx = xp[base];
      for (int64_t l = 1; l < L; ++l)
        mx = std::max(mx, xp[base + l * inner]);
      T sum = 0;
      for (int64_t l = 0; l < L; ++l) {
        const T e = std::exp(xp[base + l * inner] - mx);
        yp[base + l * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int64_t l = 0; l < L; ++l) yp[base + l * inner] *= inv;
    }
  detail::record_op<T>(
      "softmax", {x}, y, [x, y, outer, L, inner]() mutable {
        auto dy = y.node()->grad;
        auto& dx = x.grad_buffer();
        const T* yp = y.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * L * inner + in;
            T dot = 0;
            for (int64_t l = 0; l < L; ++l)
              dot += yp[base + l * inner] * dy[size_t(base + l * inner)];
            for (int64_t l = 0; l < L; ++l) {
              const int64_t at = base + l * inner;
              dx[size_t(at)] += yp[at] * (dy[size_t(at)] - dot);
            }
          }
      });
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape target) {
  TST_REQUIRE(numel(target) == x.numel(), config,
              "reshape: cannot view " + shape_str(x.shape()) + " as " +
                  shape_str(target));
  Tensor<T> y = Tensor<T>::from_data(std::move(target),
                                     {x.values().begin(), x.values().end()});
  detail::record_op<T>("reshape", {x}, y, [x, y]() mutable {
    detail::axpy(x.grad_buffer(), {y.node()->grad});
  });
  return y;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  TST_REQUIRE(int(perm.size()) == r, config,
              "permute: order size does not match rank");
  std::vector<bool> seen(size_t(r), false);
  Shape out_shape(size_t(r), 0);
  for (int i = 0; i < r; ++i) {
    TST_REQUIRE(perm[size_t(i)] >= 0 && perm[size_t(i)] < r &&
                    !seen[size_t(perm[size_t(i)])],
                config, "permute: invalid axis order");
    seen[size_t(perm[size_t(i)])] = true;
    out_shape[size_t(i)] = x.dim(perm[size_t(i)]);
  }
  std::vector<int64_t> in_stride(size_t(r), 1), out_stride(size_t(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_stride[size_t(i)] = in_stride[size_t(i + 1)] * x.dim(i + 1);
    out_stride[size_t(i)] = out_stride[size_t(i + 1)] * out_shape[size_t(i + 1)];
  }
  Tensor<T> y(out_shape);
  const T* xp = x.data();
  T* yp = y.data();
  const int64_t n = x.numel();
  std::vector<int64_t> gather(size_t(r), 0);
  for (int i = 0; i < r; ++i) gather[size_t(i)] = in_stride[size_t(perm[size_t(i)])];
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      src += (rem / out_stride[size_t(i)]) * gather[size_t(i)];
      rem %= out_stride[size_t(i)];
    }
    yp[o] = xp[src];
  }
  detail::record_op<T>(
      "permute", {x}, y, [x, y, out_stride, gather, n, r]() mutable {
        auto dy = y.node()->grad;
        auto& dx = x.grad_buffer();
        for (int64_t o = 0; o < n; ++o) {
          int64_t rem = o, src = 0;
          for (int i = 0; i < r; ++i) {
            src += (rem / out_stride[size_t(i)]) * gather[size_t(i)];
            rem %= out_stride[size_t(i)];
          }
          dx[size_t(src)] += dy[size_t(o)];
        }
      });
  return y;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  TST_REQUIRE(!parts.empty(), config, "concat: no inputs");
  const int r = parts[0].rank();
  TST_REQUIRE(axis >= 0 && axis < r, config, "concat: axis out of range");
  Shape out_shape = parts[0].shape();
  for (size_t p = 1; p < parts.size(); ++p) {
    TST_REQUIRE(parts[p].rank() == r, config, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis)
        TST_REQUIRE(parts[p].dim(i) == out_shape[size_t(i)], config,
                    "concat: shape mismatch off the concat axis");
    out_shape[size_t(axis)] += parts[p].dim(axis);
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[size_t(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[size_t(i)];
  Tensor<T> y(out_shape);
  T* yp = y.data();
  const int64_t out_axis = out_shape[size_t(axis)];
  int64_t off = 0;
  for (const Tensor<T>& p : parts) {
    const int64_t len = p.dim(axis);
    const T* pp = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pp + o * len * inner, pp + (o + 1) * len * inner,
                yp + (o * out_axis + off) * inner);
    off += len;
  }
  // Recorded by hand: record_op takes an initializer_list, and concat has a
  // runtime-sized input list.
  Tape<T>* tape = Tape<T>::current();
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (tape && needs) {
    y.set_requires_grad(true);
    typename Tape<T>::Record rec;
    rec.name = "concat";
    for (const auto& p : parts) rec.inputs.push_back(p.node());
    rec.output = y.node();
    std::vector<int64_t> lens;
    for (const auto& p : parts) lens.push_back(p.dim(axis));
    rec.backward = [parts, y, outer, inner, out_axis, lens]() mutable {
      auto dy = y.node()->grad;
      int64_t off = 0;
      for (size_t pi = 0; pi < parts.size(); ++pi) {
        const int64_t len = lens[pi];
        if (parts[pi].requires_grad()) {
          auto& dp = parts[pi].grad_buffer();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = dy.data() + (o * out_axis + off) * inner;
            T* dst = dp.data() + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        }
        off += len;
      }
    };
    tape->record(std::move(rec));
  }
  return y;
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, int axis) {
  return concat(std::vector<Tensor<T>>(parts), axis);
}

}  // namespace tst
