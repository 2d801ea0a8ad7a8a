// Tensor container, RNG, and the forward semantics of every image op,
// checked against hand examples and the loop reference kernels.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <optional>

#include "tst/image_ops.hpp"
#include "tst/ops.hpp"
#include "tst/reference.hpp"
#include "tst/tensor.hpp"

using namespace tst;

namespace {

template <typename F>
std::optional<ErrorKind> thrown_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(double(a.values()[size_t(i)]) -
                                     double(b.values()[size_t(i)])));
  return worst;
}

}  // namespace

TEST_CASE("tensor construction and validation") {
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  for (int64_t i = 0; i < 6; ++i) CHECK(t.values()[size_t(i)] == 0.0f);

  CHECK(Tensor<float>::scalar(5.0f).item() == 5.0f);
  CHECK(thrown_kind([] { Tensor<float> bad({0}); }) == ErrorKind::usage);
  CHECK(thrown_kind([] { Tensor<float> bad(Shape{}); }) == ErrorKind::usage);
  CHECK(thrown_kind([] {
          Tensor<float> bad({1, 1, 1, 1, 1, 1, 1, 1, 1});
        }) == ErrorKind::usage);
  CHECK(thrown_kind([] {
          Tensor<float>::from_data({2, 2}, {1.0f, 2.0f, 3.0f});
        }) == ErrorKind::usage);
  CHECK(thrown_kind([&] { t.item(); }) == ErrorKind::usage);

  Tensor<float> src = Tensor<float>::from_data({2}, {1.0f, 2.0f});
  Tensor<float> copy = src;       // handle copy shares the buffer
  Tensor<float> deep = src.clone();
  CHECK(copy.same_buffer(src));
  CHECK_FALSE(deep.same_buffer(src));
  src.values()[0] = 9.0f;
  CHECK(copy.values()[0] == 9.0f);
  CHECK(deep.values()[0] == 1.0f);

  Tensor<float> det = src.set_requires_grad(true).detach();
  CHECK_FALSE(det.same_buffer(src));  // detached copies carry no tape links
  CHECK_FALSE(det.requires_grad());
}

TEST_CASE("rng is deterministic with independent forks") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  double lo = 1, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);

  int hits[4] = {0, 0, 0, 0};
  for (int i = 0; i < 10000; ++i) hits[r.uniform_int(0, 3)]++;
  for (int k = 0; k < 4; ++k) CHECK(hits[k] > 2000);

  double mean = 0, m2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    mean += z;
    m2 += z * z;
  }
  mean /= n;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(std::sqrt(m2 / n - mean * mean) - 1.0) < 0.05);

  Rng f1 = Rng(3).fork("encoder");
  Rng f2 = Rng(3).fork("decoder");
  CHECK(f1.next_u64() != f2.next_u64());
  Rng f3 = Rng(3).fork("encoder");
  Rng f4 = Rng(3).fork("encoder");
  CHECK(f3.next_u64() == f4.next_u64());  // fork depends only on seed and tag
}

TEST_CASE("conv2d hand examples") {
  auto x = Tensor<double>::from_data({1, 1, 3, 3},
                                     {1, 1, 1, 1, 1, 1, 1, 1, 1});
  auto w = Tensor<double>::from_data({1, 1, 3, 3},
                                     {1, 1, 1, 1, 1, 1, 1, 1, 1});
  Tensor<double> none;
  Tensor<double> y = conv2d(x, w, none);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0);

  Rng rng(11);
  Tensor<double> img = Tensor<double>::randn({1, 1, 5, 5}, rng);
  Tensor<double> delta({1, 1, 3, 3});
  delta.values()[4] = 1.0;  // centered tap
  Tensor<double> id = conv2d(img, delta, none, 1, 1);
  CHECK(max_abs_diff(id, img) == 0.0);
}

TEST_CASE("conv2d matches the loop oracle on every kernel path") {
  Rng rng(101);
  Tensor<double> none;

  auto compare = [&](Shape xs, Shape ws, int stride, int pad, int groups,
                     bool bias) {
    Tensor<double> x = Tensor<double>::randn(xs, rng);
    Tensor<double> w = Tensor<double>::randn(ws, rng);
    Tensor<double> b =
        bias ? Tensor<double>::randn({ws[0]}, rng) : Tensor<double>();
    Tensor<double> fast = conv2d(x, w, b, stride, pad, groups);
    Tensor<double> slow = ref::conv2d(x, w, b, stride, pad, groups);
    CHECK(max_abs_diff(fast, slow) < 1e-10);
  };

  compare({2, 4, 8, 8}, {6, 4, 3, 3}, 2, 1, 1, true);   // strided general
  compare({2, 4, 8, 8}, {6, 4, 3, 3}, 2, 1, 1, false);  // no bias
  compare({2, 5, 6, 6}, {7, 5, 1, 1}, 1, 0, 1, true);   // pointwise path
  compare({2, 4, 7, 7}, {4, 1, 3, 3}, 1, 1, 4, true);   // depthwise path
  compare({2, 4, 9, 9}, {4, 1, 3, 3}, 2, 1, 4, false);  // strided depthwise
  compare({2, 6, 8, 8}, {8, 3, 3, 3}, 1, 1, 2, true);   // grouped general
  compare({1, 3, 10, 10}, {5, 3, 5, 5}, 1, 2, 1, true); // 5x5 kernel

  detail::conv_tile_row_cap() = 2;  // force the partial-tile path
  compare({2, 4, 8, 8}, {6, 4, 3, 3}, 2, 1, 1, true);
  compare({2, 6, 8, 8}, {8, 3, 3, 3}, 1, 1, 2, true);
  detail::conv_tile_row_cap() = 0;

  CHECK(thrown_kind([&] {
          conv2d(Tensor<double>({1, 3, 2, 2}),
                 Tensor<double>({4, 3, 3, 3}), none, 1, 0);
        }) == ErrorKind::config);  // kernel larger than padded input
  CHECK(thrown_kind([&] {
          conv2d(Tensor<double>({1, 3, 4, 4}),
                 Tensor<double>({4, 2, 3, 3}), none, 1, 1);
        }) == ErrorKind::config);  // channel mismatch
}

TEST_CASE("relu6 clamps and gates its gradient") {
  auto x = Tensor<float>::from_data({3}, {-1.0f, 3.0f, 9.0f})
               .set_requires_grad(true);
  TapeScope<float> tape;
  Tensor<float> y = relu6(x);
  CHECK(y.values()[0] == 0.0f);
  CHECK(y.values()[1] == 3.0f);
  CHECK(y.values()[2] == 6.0f);
  backward(sum(y));
  CHECK(x.grad()[0] == 0.0f);
  CHECK(x.grad()[1] == 1.0f);
  CHECK(x.grad()[2] == 0.0f);
}

TEST_CASE("softmax hand example and row normalization") {
  auto x = Tensor<double>::from_data({2}, {0.0, std::log(3.0)});
  Tensor<double> y = softmax(x, 0);
  CHECK(std::abs(y.values()[0] - 0.25) < 1e-12);
  CHECK(std::abs(y.values()[1] - 0.75) < 1e-12);

  Rng rng(5);
  Tensor<double> big = Tensor<double>::randn({2, 3, 4}, rng);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor<double> s = softmax(big, axis);
    Tensor<double> r = ref::softmax(big, axis);
    CHECK(max_abs_diff(s, r) < 1e-12);
  }
}

TEST_CASE("average pooling matches hand example and oracle") {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> y = avg_pool_to(x, 1, 1);
  CHECK(y.item() == 2.5);

  CHECK(thrown_kind([&] {
          avg_pool_to(Tensor<double>({1, 1, 3, 3}), 2, 2);
        }) == ErrorKind::config);

  Rng rng(9);
  Tensor<double> big = Tensor<double>::randn({2, 3, 5, 7}, rng);
  Tensor<double> mine = adaptive_avg_pool(big, 2, 3);
  Tensor<double> oracle = ref::adaptive_avg_pool(big, 2, 3);
  CHECK(max_abs_diff(mine, oracle) < 1e-12);

  Tensor<double> even = Tensor<double>::randn({2, 3, 6, 4}, rng);
  CHECK(max_abs_diff(adaptive_avg_pool(even, 3, 2),
                     avg_pool_to(even, 3, 2)) == 0.0);
}

TEST_CASE("bilinear upsampling matches the closed form") {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> y = bilinear_upsample(x, 4, 4);
  const double want[16] = {1.0, 1.25, 1.75, 2.0,  1.5, 1.75, 2.25, 2.5,
                           2.5, 2.75, 3.25, 3.5,  3.0, 3.25, 3.75, 4.0};
  for (int i = 0; i < 16; ++i)
    CHECK(std::abs(y.values()[size_t(i)] - want[i]) < 1e-12);

  CHECK(thrown_kind([&] {
          bilinear_upsample(Tensor<double>({1, 1, 4, 4}), 2, 2);
        }) == ErrorKind::config);

  Rng rng(13);
  Tensor<double> big = Tensor<double>::randn({2, 3, 5, 7}, rng);
  CHECK(max_abs_diff(bilinear_upsample(big, 8, 9),
                     ref::bilinear_upsample(big, 8, 9)) < 1e-12);
  CHECK(max_abs_diff(bilinear_upsample(big, 5, 7), big) == 0.0);
}

TEST_CASE("batch norm matches the two-pass oracle and updates running stats") {
  Rng rng(21);
  const int64_t C = 4;
  Tensor<double> x = Tensor<double>::randn({3, C, 5, 6}, rng, 2.0, 1.5);
  Tensor<double> gamma = Tensor<double>::rand_uniform({C}, rng, 0.5, 1.5);
  Tensor<double> beta = Tensor<double>::randn({C}, rng);
  Tensor<double> rm({C}), rv({C});
  for (int64_t c = 0; c < C; ++c) rv.values()[size_t(c)] = 1.0;

  Tensor<double> rm_before = rm.clone(), rv_before = rv.clone();
  Tensor<double> y = batch_norm2d(x, gamma, beta, rm, rv, true);
  Tensor<double> want = ref::batch_norm2d_train(x, gamma, beta, 1e-5);
  CHECK(max_abs_diff(y, want) < 1e-12);

  const int64_t m = 3 * 5 * 6;
  for (int64_t c = 0; c < C; ++c) {
    double mu = 0, var = 0;
    for (int64_t n = 0; n < 3; ++n)
      for (int64_t i = 0; i < 30; ++i)
        mu += x.values()[size_t((n * C + c) * 30 + i)];
    mu /= double(m);
    for (int64_t n = 0; n < 3; ++n)
      for (int64_t i = 0; i < 30; ++i) {
        const double d = x.values()[size_t((n * C + c) * 30 + i)] - mu;
        var += d * d;
      }
    var /= double(m);
    const double want_rm = 0.9 * rm_before.values()[size_t(c)] + 0.1 * mu;
    const double want_rv = 0.9 * rv_before.values()[size_t(c)] +
                           0.1 * var * double(m) / double(m - 1);
    CHECK(std::abs(rm.values()[size_t(c)] - want_rm) < 1e-12);
    CHECK(std::abs(rv.values()[size_t(c)] - want_rv) < 1e-12);
  }

  Tensor<double> ye = batch_norm2d(x, gamma, beta, rm, rv, false);
  Tensor<double> we = ref::batch_norm2d_eval(x, gamma, beta, rm, rv, 1e-5);
  CHECK(max_abs_diff(ye, we) < 1e-12);

  Tensor<double> tiny({1, 2, 1, 1});
  Tensor<double> g2 = Tensor<double>::from_data({2}, {1, 1});
  Tensor<double> b2({2}), rm2({2}), rv2({2});
  CHECK(thrown_kind([&] {
          batch_norm2d(tiny, g2, b2, rm2, rv2, true);
        }) == ErrorKind::config);
}

TEST_CASE("reductions and elementwise backward identities") {
  Rng rng(31);
  Tensor<double> x = Tensor<double>::randn({2, 3}, rng).set_requires_grad(true);
  {
    TapeScope<double> tape;
    backward(sum(x));
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[size_t(i)] == 1.0);
  }
  x.zero_grad();
  {
    TapeScope<double> tape;
    backward(sum(mul(x, x)));
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(std::abs(x.grad()[size_t(i)] - 2 * x.values()[size_t(i)]) < 1e-14);
  }

  Tensor<double> pos = Tensor<double>::from_data({2}, {1.0, 0.0});
  CHECK(thrown_kind([&] { tst::log(pos); }) == ErrorKind::numeric);
  Tensor<double> neg_in = Tensor<double>::from_data({1}, {-1.0});
  CHECK(thrown_kind([&] { tst::sqrt(neg_in); }) == ErrorKind::numeric);

  Tensor<double> a = Tensor<double>::from_data({3}, {1, 2, 3});
  Tensor<double> s = Tensor<double>::scalar(10.0);
  Tensor<double> summed = add(a, s);
  CHECK(summed.values()[0] == 11.0);
  CHECK(summed.values()[2] == 13.0);
  CHECK(mean(a).item() == 2.0);
}

TEST_CASE("matmul and bmm match the loop oracle") {
  Rng rng(41);
  Tensor<double> a = Tensor<double>::randn({3, 4}, rng);
  Tensor<double> b = Tensor<double>::randn({4, 5}, rng);
  CHECK(max_abs_diff(matmul(a, b), ref::matmul(a, b)) < 1e-12);

  Tensor<double> ba = Tensor<double>::randn({2, 3, 4}, rng);
  Tensor<double> bb = Tensor<double>::randn({2, 4, 5}, rng);
  Tensor<double> y = bmm(ba, bb);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (int64_t k = 0; k < 4; ++k)
          acc += ba.values()[size_t((n * 3 + i) * 4 + k)] *
                 bb.values()[size_t((n * 4 + k) * 5 + j)];
        CHECK(std::abs(y.values()[size_t((n * 3 + i) * 5 + j)] - acc) < 1e-12);
      }

  Tensor<double> bt = Tensor<double>::randn({2, 5, 4}, rng);
  Tensor<double> yt = bmm(ba, bt, true);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (int64_t k = 0; k < 4; ++k)
          acc += ba.values()[size_t((n * 3 + i) * 4 + k)] *
                 bt.values()[size_t((n * 5 + j) * 4 + k)];
        CHECK(std::abs(yt.values()[size_t((n * 3 + i) * 5 + j)] - acc) <
              1e-12);
      }
}

TEST_CASE("reshape, permute and concat move values correctly") {
  Rng rng(51);
  Tensor<double> x = Tensor<double>::randn({2, 3, 4}, rng);
  Tensor<double> r = reshape(x, {4, 6});
  CHECK(r.shape() == Shape{4, 6});
  for (int64_t i = 0; i < 24; ++i)
    CHECK(r.values()[size_t(i)] == x.values()[size_t(i)]);
  CHECK(thrown_kind([&] { reshape(x, {5, 5}); }) == ErrorKind::config);

  Tensor<double> p = permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      for (int64_t k = 0; k < 4; ++k)
        CHECK(p.values()[size_t((k * 2 + i) * 3 + j)] ==
              x.values()[size_t((i * 3 + j) * 4 + k)]);

  Tensor<double> a = Tensor<double>::randn({2, 2, 3}, rng);
  Tensor<double> b = Tensor<double>::randn({2, 1, 3}, rng);
  Tensor<double> c = concat({a, b}, 1);
  CHECK(c.shape() == Shape{2, 3, 3});
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t k = 0; k < 3; ++k)
        CHECK(c.values()[size_t((n * 3 + i) * 3 + k)] ==
              a.values()[size_t((n * 2 + i) * 3 + k)]);
    for (int64_t k = 0; k < 3; ++k)
      CHECK(c.values()[size_t((n * 3 + 2) * 3 + k)] ==
            b.values()[size_t(n * 3 + k)]);
  }
  CHECK(thrown_kind([&] {
          concat({a, Tensor<double>({2, 1, 4})}, 1);
        }) == ErrorKind::config);
}

TEST_CASE("tape misuse raises usage errors and grads accumulate") {
  Tensor<double> x =
      Tensor<double>::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  CHECK(thrown_kind([&] { backward(sum(x)); }) == ErrorKind::usage);
  {
    TapeScope<double> tape;
    CHECK(thrown_kind([&] { backward(mul(x, x)); }) == ErrorKind::usage);
  }
  {
    TapeScope<double> tape;
    backward(sum(mul(x, x)));
  }
  {
    TapeScope<double> tape;
    backward(sum(mul(x, x)));  // no zero_grad in between: accumulates
  }
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == 8.0);
}

TEST_CASE("channel slices and gating broadcast as expected") {
  Rng rng(71);
  Tensor<double> x = Tensor<double>::randn({2, 4, 2, 3}, rng);
  Tensor<double> s = slice_channels(x, 1, 3);
  CHECK(s.shape() == Shape{2, 2, 2, 3});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t i = 0; i < 6; ++i)
        CHECK(s.values()[size_t((n * 2 + c) * 6 + i)] ==
              x.values()[size_t((n * 4 + c + 1) * 6 + i)]);
  CHECK(thrown_kind([&] { slice_channels(x, 3, 3); }) == ErrorKind::config);

  Tensor<double> g = Tensor<double>::randn({2, 1, 2, 3}, rng);
  Tensor<double> y = mul_gate(x, g);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t i = 0; i < 6; ++i)
        CHECK(y.values()[size_t((n * 4 + c) * 6 + i)] ==
              x.values()[size_t((n * 4 + c) * 6 + i)] *
                  g.values()[size_t(n * 6 + i)]);
}

TEST_CASE("mac counter measures executed convolution work exactly") {
  Rng rng(61);
  Tensor<float> none;
  {
    Tensor<float> x = Tensor<float>::randn({1, 3, 32, 32}, rng);
    Tensor<float> w = Tensor<float>::randn({8, 3, 3, 3}, rng);
    MacMeterScope meter;
    conv2d(x, w, none, 1, 1);
    CHECK(meter.count() == 9ULL * 3 * 8 * 32 * 32);  // 221184
  }
  {
    Tensor<float> x = Tensor<float>::randn({1, 4, 8, 8}, rng);
    Tensor<float> w = Tensor<float>::randn({4, 1, 3, 3}, rng);
    MacMeterScope meter;
    conv2d(x, w, none, 1, 1, 4);
    CHECK(meter.count() == 4ULL * 64 * 9);  // padding taps still counted
  }
  CHECK_FALSE(MacCounter::enabled());
}
