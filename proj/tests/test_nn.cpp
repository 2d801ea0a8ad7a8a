// Layer vocabulary: parameter registry, block shapes, attention against the
// loop oracle, identity behavior of zeroed blocks, and exact agreement
// between the analytic compute table and the instrumented kernels.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "tst/nn.hpp"
#include "tst/reference.hpp"

using namespace tst;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(double(a.values()[size_t(i)]) -
                                     double(b.values()[size_t(i)])));
  return worst;
}

template <typename T>
void fill(Tensor<T> t, T v) {
  for (auto& e : t.values()) e = v;
}

template <typename T>
void randomize_bn_stats(BatchNorm2dLayer<T>& bn, Rng& rng) {
  for (auto& v : bn.running_mean.values()) v = T(rng.uniform(-0.3, 0.3));
  for (auto& v : bn.running_var.values()) v = T(rng.uniform(0.5, 2.0));
  for (auto& v : bn.gamma.values()) v = T(rng.uniform(0.7, 1.3));
  for (auto& v : bn.beta.values()) v = T(rng.uniform(-0.2, 0.2));
}

// Evaluation-mode reference for a 1x1 projection with batch norm.
template <typename T>
Tensor<T> ref_proj(const Tensor<T>& x, const ConvBNAct<T>& layer) {
  Tensor<T> none;
  Tensor<T> h = ref::conv2d(x, layer.conv.weight, none, 1, 0, 1);
  return ref::batch_norm2d_eval(h, layer.bn.gamma, layer.bn.beta,
                                layer.bn.running_mean, layer.bn.running_var,
                                layer.bn.eps);
}

}  // namespace

TEST_CASE("parameter store registers uniquely and counts learnables") {
  ParamStore<float> store;
  Rng rng(1);
  Conv2dLayer<float> c(store, "head", 3, 8, 3, 1, 1, 1, true, rng);
  BatchNorm2dLayer<float> bn(store, "head.bn", 8);

  CHECK(store.entries().size() == 6);  // weight, bias, gamma, beta, 2 stats
  CHECK(store.entries()[0].name == "head.weight");
  CHECK(store.find("head.bn.gamma").numel() == 8);
  CHECK_THROWS_AS(store.add("head.weight", Tensor<float>({1}), true), Error);

  // Conv carries 8*3*3*3 + 8 learnables; batch norm adds gamma and beta but
  // not its running statistics.
  CHECK(store.learnable_scalars() == 224 + 16);
  int64_t buffers = 0;
  for (const auto& e : store.entries())
    if (!e.learnable) buffers += e.tensor.numel();
  CHECK(buffers == 16);
}

TEST_CASE("convolution init follows fan-in scaling with zero bias") {
  ParamStore<double> store;
  Rng rng(2);
  Conv2dLayer<double> c(store, "c", 16, 64, 3, 1, 1, 1, true, rng);
  const double want_std = std::sqrt(2.0 / (16 * 9));
  double m = 0, v = 0;
  for (double x : c.weight.values()) m += x;
  m /= double(c.weight.numel());
  for (double x : c.weight.values()) v += (x - m) * (x - m);
  v /= double(c.weight.numel());
  CHECK(std::abs(m) < 0.02 * want_std * 10);
  CHECK(std::abs(std::sqrt(v) - want_std) < 0.05 * want_std);
  for (double b : c.bias.values()) CHECK(b == 0.0);
}

TEST_CASE("inverted residual keeps or changes shape as configured") {
  ParamStore<float> store;
  Rng rng(3);
  InvertedResidual<float> same(store, "same", 16, 16, 4, 1, rng);
  InvertedResidual<float> down(store, "down", 16, 24, 4, 2, rng);
  InvertedResidual<float> thin(store, "thin", 16, 16, 1, 1, rng);
  CHECK(same.residual);
  CHECK_FALSE(down.residual);
  CHECK(thin.residual);
  CHECK(same.expand.has_value());
  CHECK_FALSE(thin.expand.has_value());

  Tensor<float> x = Tensor<float>::randn({2, 16, 8, 8}, rng);
  CHECK(same.forward(x, false).shape() == Shape{2, 16, 8, 8});
  CHECK(down.forward(x, false).shape() == Shape{2, 24, 4, 4});
  CHECK(thin.forward(x, false).shape() == Shape{2, 16, 8, 8});

  // Zeroing the projection leaves only the skip path.
  fill(same.project.conv.weight, 0.0f);
  fill(same.project.bn.gamma, 0.0f);
  fill(same.project.bn.beta, 0.0f);
  CHECK(max_abs_diff(same.forward(x, false), x) == 0.0);

  // Odd sizes floor through the strided depthwise stage.
  Tensor<float> odd = Tensor<float>::randn({1, 16, 7, 9}, rng);
  CHECK(down.forward(odd, false).shape() == Shape{1, 24, 4, 5});
}

TEST_CASE("attention matches the loop oracle") {
  ParamStore<float> store;
  Rng rng(4);
  const int64_t C = 64, Cg = 128, heads = 2, dqk = 16, dv = 32;
  TokenAttention<float> attn(store, "attn", C, Cg, heads, dqk, dv, rng);
  randomize_bn_stats(attn.q.bn, rng);
  randomize_bn_stats(attn.k.bn, rng);
  randomize_bn_stats(attn.v.bn, rng);
  randomize_bn_stats(attn.out.bn, rng);

  const int64_t Nq = 16, Nk = 16;
  auto flatten = [&](const Tensor<float>& m, int64_t d, int64_t npos) {
    std::vector<float> f(size_t(heads * npos * d));
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < npos; ++i)
        for (int64_t e = 0; e < d; ++e)
          f[size_t((h * npos + i) * d + e)] =
              m.values()[size_t((h * d + e) * npos + i)];
    return f;
  };

  // Attention core on raw projected maps against the per-position loops.
  Tensor<float> qmap = Tensor<float>::randn({1, heads * dqk, 4, 4}, rng);
  Tensor<float> kmap = Tensor<float>::randn({1, heads * dqk, 4, 4}, rng);
  Tensor<float> vmap = Tensor<float>::randn({1, heads * dv, 4, 4}, rng);
  Tensor<float> core = attn.attend(qmap, kmap, vmap);
  std::vector<float> o =
      ref::attention(flatten(qmap, dqk, Nq), flatten(kmap, dqk, Nk),
                     flatten(vmap, dv, Nk), heads, Nq, Nk, dqk, dv);
  double worst = 0;
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < Nq; ++i)
      for (int64_t e = 0; e < dv; ++e)
        worst = std::max(
            worst,
            std::abs(double(core.values()[size_t((h * dv + e) * Nq + i)]) -
                     double(o[size_t((h * Nq + i) * dv + e)])));
  CHECK(worst < 1e-6);

  // Full layer against the reference pipeline; the wide projections accrue
  // honest float path differences, so the band is looser here.
  Tensor<float> x = Tensor<float>::randn({1, C, 4, 4}, rng);
  Tensor<float> ctx = Tensor<float>::randn({1, Cg, 4, 4}, rng);
  Tensor<float> got = attn.forward(x, ctx, false);
  Tensor<float> Qm = ref_proj(x, attn.q);
  Tensor<float> Km = ref_proj(ctx, attn.k);
  Tensor<float> Vm = ref_proj(ctx, attn.v);
  std::vector<float> o2 =
      ref::attention(flatten(Qm, dqk, Nq), flatten(Km, dqk, Nk),
                     flatten(Vm, dv, Nk), heads, Nq, Nk, dqk, dv);
  Tensor<float> Om({1, heads * dv, 4, 4});
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < Nq; ++i)
      for (int64_t e = 0; e < dv; ++e)
        Om.values()[size_t((h * dv + e) * Nq + i)] =
            o2[size_t((h * Nq + i) * dv + e)];
  Tensor<float> want = ref_proj(Om, attn.out);
  CHECK(max_abs_diff(got, want) < 1e-4);
}

TEST_CASE("zeroed queries attend uniformly") {
  ParamStore<float> store;
  Rng rng(5);
  const int64_t C = 24, Cg = 32, heads = 2, dqk = 8, dv = 16;
  TokenAttention<float> attn(store, "attn", C, Cg, heads, dqk, dv, rng);
  fill(attn.q.conv.weight, 0.0f);  // default BN stats keep the zero map zero
  randomize_bn_stats(attn.out.bn, rng);  // out starts gated shut; open it

  Tensor<float> x = Tensor<float>::randn({2, C, 3, 3}, rng);
  Tensor<float> ctx = Tensor<float>::randn({2, Cg, 2, 5}, rng);
  Tensor<float> got = attn.forward(x, ctx, false);

  Tensor<float> vm = attn.v.forward(ctx, false);
  Tensor<float> pooled({2, heads * dv, 3, 3});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < heads * dv; ++c) {
      double m = 0;
      for (int64_t i = 0; i < 10; ++i)
        m += vm.values()[size_t((n * heads * dv + c) * 10 + i)];
      m /= 10.0;
      for (int64_t i = 0; i < 9; ++i)
        pooled.values()[size_t((n * heads * dv + c) * 9 + i)] = float(m);
    }
  Tensor<float> want = attn.out.forward(pooled, false);
  CHECK(max_abs_diff(got, want) < 1e-5);
}

TEST_CASE("attention over single query and key is a pass-through") {
  ParamStore<float> store;
  Rng rng(6);
  TokenAttention<float> attn(store, "attn", 16, 24, 2, 4, 8, rng);
  randomize_bn_stats(attn.out.bn, rng);  // out starts gated shut; open it
  Tensor<float> x = Tensor<float>::randn({3, 16, 1, 1}, rng);
  Tensor<float> ctx = Tensor<float>::randn({3, 24, 1, 1}, rng);
  Tensor<float> got = attn.forward(x, ctx, false);
  Tensor<float> want = attn.out.forward(attn.v.forward(ctx, false), false);
  CHECK(max_abs_diff(got, want) < 1e-6);
}

TEST_CASE("zeroed output projections make the transformer block an identity") {
  ParamStore<float> store;
  Rng rng(7);
  TransformerBlock<float> block(store, "blk", 32, 48, 2, 16, 32, 2, rng);
  fill(block.attn.out.conv.weight, 0.0f);
  fill(block.attn.out.bn.gamma, 0.0f);
  fill(block.attn.out.bn.beta, 0.0f);
  fill(block.ffn.project.conv.weight, 0.0f);
  fill(block.ffn.project.bn.gamma, 0.0f);
  fill(block.ffn.project.bn.beta, 0.0f);

  Tensor<float> x = Tensor<float>::randn({2, 32, 3, 3}, rng);
  Tensor<float> ctx = Tensor<float>::randn({2, 48, 2, 2}, rng);
  CHECK(max_abs_diff(block.forward(x, ctx, false), x) == 0.0);
}

TEST_CASE("attention and transformer block gradients check out") {
  ParamStore<double> store;
  Rng rng(8);
  TransformerBlock<double> block(store, "blk", 8, 12, 2, 3, 4, 2, rng);
  // The identity-init gates would zero every upstream gradient; open them so
  // the check exercises the whole block.
  for (auto& g : block.attn.out.bn.gamma.values()) g = rng.uniform(0.6, 1.4);
  for (auto& g : block.ffn.project.bn.gamma.values()) g = rng.uniform(0.6, 1.4);
  Tensor<double> x = Tensor<double>::randn({2, 8, 2, 2}, rng);
  Tensor<double> ctx = Tensor<double>::randn({2, 12, 2, 2}, rng);

  std::vector<Tensor<double>> leaves = {x, ctx};
  for (const auto& e : store.entries())
    if (e.learnable) leaves.push_back(e.tensor);

  Rng wrng(99);
  Tensor<double> proj;
  auto loss = [&] {
    Tensor<double> y = block.forward(x, ctx, true);
    if (!proj.defined())
      proj = Tensor<double>::rand_uniform(y.shape(), wrng, 0.3, 1.7);
    return sum(mul(y, proj));
  };
  auto rep = ref::check_gradients(leaves, loss, 1e-5, 6);
  INFO(rep.worst);
  CHECK(rep.ok(1e-3));
  CHECK(rep.probes >= 100);  // every learnable tensor probed
}

TEST_CASE("analytic compute table matches the instrumented kernels exactly") {
  ParamStore<float> store;
  Rng rng(9);
  TransformerBlock<float> block(store, "blk", 64, 128, 2, 16, 32, 2, rng);
  InvertedResidual<float> ir(store, "ir", 16, 24, 4, 2, rng);

  ProfileReport rep;
  block.profile("blk", 1, 2, 2, 2, 2, rep);
  CHECK(rep.macs_under("blk.attn.scores") == 2 * 4 * 4 * (16 + 32));  // 1536

  Tensor<float> x = Tensor<float>::randn({1, 64, 2, 2}, rng);
  Tensor<float> ctx = Tensor<float>::randn({1, 128, 2, 2}, rng);
  auto chk = macs_oracle_check(rep.total_macs(),
                               [&] { block.forward(x, ctx, false); });
  CHECK(chk.discrepancy() == 0);

  ProfileReport rep2;
  int64_t h = 7, w = 9;
  ir.profile("ir", 2, h, w, rep2);
  CHECK(h == 4);
  CHECK(w == 5);
  Tensor<float> odd = Tensor<float>::randn({2, 16, 7, 9}, rng);
  auto chk2 =
      macs_oracle_check(rep2.total_macs(), [&] { ir.forward(odd, false); });
  CHECK(chk2.discrepancy() == 0);

  // Parameter bookkeeping: a biased 3->8 conv with 3x3 taps carries 224
  // scalars; each batch norm carries two per channel.
  ParamStore<float> small;
  Conv2dLayer<float> c(small, "c", 3, 8, 3, 1, 1, 1, true, rng);
  BatchNorm2dLayer<float> bn(small, "bn", 8);
  ProfileReport rep3;
  int64_t hh = 32, ww = 32;
  c.profile("c", 1, hh, ww, rep3);
  bn.profile("bn", rep3);
  CHECK(rep3.params_under("c") == 224);
  CHECK(rep3.params_under("bn") == 16);
  CHECK(rep3.macs_under("c") == 221184);
  CHECK(small.learnable_scalars() == 240);
}
