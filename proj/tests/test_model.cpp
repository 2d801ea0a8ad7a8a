// Full network: pyramid shapes, parameter and compute budgets, behavior of
// the attention modes, bounded output, and end-to-end gradients.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "tst/model.hpp"
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

ModelConfig tiny_config(AttentionMode mode = AttentionMode::cross) {
  ModelConfig c;
  c.variant = "tst";
  c.local_channels = {16, 24, 32};
  c.global_channels = 64;
  c.heads = {2, 2, 2};
  c.qk_dim = 8;
  c.v_dim = 8;
  c.decoder_channels = 16;
  c.attention_mode = mode;
  return c;
}

}  // namespace

TEST_CASE("pyramid shapes for the desk variant at 64x64") {
  TSTModel<float> model(ModelConfig::preset("tst"));
  Rng rng(1);
  Tensor<float> x = Tensor<float>::randn({1, 3, 64, 64}, rng);
  EncoderFeatures<float> f = model.encoder.forward(x, false);
  CHECK(f.f1.shape() == Shape{1, 64, 8, 8});
  CHECK(f.f2.shape() == Shape{1, 128, 4, 4});
  CHECK(f.f3.shape() == Shape{1, 160, 2, 2});
  CHECK(f.g.shape() == Shape{1, 256, 1, 1});

  Tensor<float> y = model.forward(x, false);
  CHECK(y.shape() == Shape{1, 1, 64, 64});
  for (float v : y.values()) {
    CHECK(v > 0.0f);
    CHECK(v < 10.0f);
  }
}

TEST_CASE("pyramid shapes for the small variant at 480x640") {
  TSTModel<float> model(ModelConfig::preset("tst-s"));
  Rng rng(2);
  Tensor<float> x = Tensor<float>::randn({1, 3, 480, 640}, rng);
  EncoderFeatures<float> f = model.encoder.forward(x, false);
  CHECK(f.f1.shape() == Shape{1, 48, 60, 80});
  CHECK(f.f2.shape() == Shape{1, 96, 30, 40});
  CHECK(f.f3.shape() == Shape{1, 128, 15, 20});
  CHECK(f.g.shape() == Shape{1, 256, 7, 10});

  std::array<Tensor<float>, 3> refined = model.connection.forward(f, false);
  Tensor<float> y =
      model.decoder.forward(refined, f.g, 480, 640, false);
  CHECK(y.shape() == Shape{1, 1, 480, 640});
}

TEST_CASE("input validation rejects bad geometry") {
  TSTModel<float> model(ModelConfig::preset("tst"));
  CHECK_THROWS_AS(model.forward(Tensor<float>({1, 1, 64, 64}), false), Error);
  CHECK_THROWS_AS(model.forward(Tensor<float>({1, 3, 50, 64}), false), Error);
  CHECK_THROWS_AS(model.forward(Tensor<float>({1, 3, 32, 32}), false), Error);

  ModelConfig shallow = ModelConfig::preset("tst");
  shallow.global_stride = 32;
  TSTModel<float> m32(shallow);
  Rng rng(3);
  Tensor<float> x = Tensor<float>::randn({1, 3, 32, 32}, rng);
  CHECK(m32.forward(x, false).shape() == Shape{1, 1, 32, 32});
  CHECK(m32.encoder.forward(x, false).g.shape() == Shape{1, 256, 1, 1});
}

TEST_CASE("parameter budgets sit inside the published windows") {
  TSTModel<float> tst(ModelConfig::preset("tst"));
  TSTModel<float> tsts(ModelConfig::preset("tst-s"));
  const int64_t p_tst = tst.params.learnable_scalars();
  const int64_t p_tsts = tsts.params.learnable_scalars();
  INFO("tst params " << p_tst << ", tst-s params " << p_tsts);
  CHECK(p_tst >= 1440000);
  CHECK(p_tst <= 2160000);
  CHECK(p_tsts >= 1020000);
  CHECK(p_tsts <= 1520000);
  CHECK(p_tsts < p_tst);

  // The analytic table and the registry must agree on learnable scalars.
  ProfileReport rep = tst.profile(1, 480, 640);
  CHECK(rep.total_params() == p_tst);
  ProfileReport rep_s = tsts.profile(1, 480, 640);
  CHECK(rep_s.total_params() == p_tsts);
}

TEST_CASE("compute budgets at 480x640 sit inside the published windows") {
  TSTModel<float> tst(ModelConfig::preset("tst"));
  TSTModel<float> tsts(ModelConfig::preset("tst-s"));
  const int64_t m_tst = tst.profile(1, 480, 640).total_macs();
  const int64_t m_tsts = tsts.profile(1, 480, 640).total_macs();
  INFO("tst macs " << m_tst << ", tst-s macs " << m_tsts);
  CHECK(m_tst >= 2120000000LL);
  CHECK(m_tst <= 3180000000LL);
  CHECK(m_tsts >= 1770000000LL);
  CHECK(m_tsts <= 2650000000LL);
  CHECK(m_tsts < m_tst);
}

TEST_CASE("token connection stays under 15 percent of total compute") {
  for (const char* variant : {"tst", "tst-s"}) {
    TSTModel<float> model(ModelConfig::preset(variant));
    ProfileReport rep = model.profile(1, 480, 640);
    const double share = double(rep.macs_under("connection")) /
                         double(rep.total_macs());
    INFO(variant << " connection share " << share);
    CHECK(share > 0.0);
    CHECK(share < 0.15);
  }
}

TEST_CASE("instrumented forward matches the analytic table exactly") {
  TSTModel<float> model(ModelConfig::preset("tst"));
  Rng rng(4);
  Tensor<float> x = Tensor<float>::randn({1, 3, 64, 64}, rng);
  ProfileReport rep = model.profile(1, 64, 64);
  auto chk = macs_oracle_check(rep.total_macs(),
                               [&] { model.forward(x, false); });
  INFO("analytic " << chk.analytic << " measured " << chk.measured);
  CHECK(chk.discrepancy() == 0);

  // Odd token grids exercise the floor paths.
  TSTModel<float> small(ModelConfig::preset("tst-s"));
  Tensor<float> xs = Tensor<float>::randn({2, 3, 96, 160}, rng);
  ProfileReport rep2 = small.profile(2, 96, 160);
  auto chk2 = macs_oracle_check(rep2.total_macs(),
                                [&] { small.forward(xs, false); });
  INFO("analytic " << chk2.analytic << " measured " << chk2.measured);
  CHECK(chk2.discrepancy() == 0);
}

TEST_CASE("attention modes share trunk weights and order their budgets") {
  ModelConfig cross_cfg = ModelConfig::preset("tst");
  ModelConfig self_cfg = cross_cfg;
  self_cfg.attention_mode = AttentionMode::self;
  ModelConfig none_cfg = cross_cfg;
  none_cfg.attention_mode = AttentionMode::none;

  TSTModel<float> mc(cross_cfg), ms(self_cfg), mn(none_cfg);

  // Identical seeds give bitwise-identical trunks regardless of mode.
  CHECK(max_abs_diff(mc.params.find("encoder.stem.conv.weight"),
                     mn.params.find("encoder.stem.conv.weight")) == 0.0);
  CHECK(max_abs_diff(mc.params.find("decoder.head.weight"),
                     mn.params.find("decoder.head.weight")) == 0.0);
  CHECK(max_abs_diff(ms.params.find("decoder.head.weight"),
                     mn.params.find("decoder.head.weight")) == 0.0);

  const int64_t pc = mc.params.learnable_scalars();
  const int64_t ps = ms.params.learnable_scalars();
  const int64_t pn = mn.params.learnable_scalars();
  CHECK(pn < pc);
  CHECK(pn < ps);

  // The attended token budget itself is mode-independent; only the key and
  // value projections differ between sharing and self modes.
  ProfileReport rc = mc.profile(1, 480, 640);
  ProfileReport rs = ms.profile(1, 480, 640);
  ProfileReport rn = mn.profile(1, 480, 640);
  int64_t scores_c = 0, scores_s = 0;
  for (const auto& row : rc.rows)
    if (row.kind == "attn") scores_c += row.macs;
  for (const auto& row : rs.rows)
    if (row.kind == "attn") scores_s += row.macs;
  CHECK(scores_c == scores_s);
  CHECK(scores_c > 0);
  CHECK(rn.macs_under("connection") == 0);
  CHECK(rn.total_macs() < rc.total_macs());
  CHECK(rn.total_macs() < rs.total_macs());

  // The connection ships gated shut (identity), so a fresh model matches the
  // plain trunk bitwise; once the gates open, the modes genuinely diverge.
  Rng rng(5);
  Tensor<float> x = Tensor<float>::randn({1, 3, 64, 64}, rng);
  CHECK(max_abs_diff(mc.forward(x, false), mn.forward(x, false)) == 0.0);
  CHECK(max_abs_diff(ms.forward(x, false), mn.forward(x, false)) == 0.0);
  for (TSTModel<float>* m : {&mc, &ms})
    for (auto& block : m->connection.blocks) {
      for (auto& g : block.attn.out.bn.gamma.values())
        g = rng.uniform(0.6f, 1.4f);
      for (auto& g : block.ffn.project.bn.gamma.values())
        g = rng.uniform(0.6f, 1.4f);
    }
  CHECK(max_abs_diff(mc.forward(x, false), mn.forward(x, false)) > 1e-4);
  CHECK(max_abs_diff(ms.forward(x, false), mn.forward(x, false)) > 1e-4);
  CHECK(max_abs_diff(mc.forward(x, false), ms.forward(x, false)) > 1e-4);
}

TEST_CASE("a zeroed connection reduces the sharing model to the plain one") {
  ModelConfig cfg = tiny_config(AttentionMode::cross);
  ModelConfig none_cfg = tiny_config(AttentionMode::none);
  TSTModel<float> mc(cfg), mn(none_cfg);
  for (auto& block : mc.connection.blocks) {
    fill(block.attn.out.conv.weight, 0.0f);
    fill(block.attn.out.bn.gamma, 0.0f);
    fill(block.attn.out.bn.beta, 0.0f);
    fill(block.ffn.project.conv.weight, 0.0f);
    fill(block.ffn.project.bn.gamma, 0.0f);
    fill(block.ffn.project.bn.beta, 0.0f);
  }
  Rng rng(6);
  Tensor<float> x = Tensor<float>::randn({2, 3, 64, 64}, rng);
  CHECK(max_abs_diff(mc.forward(x, false), mn.forward(x, false)) == 0.0);
}

TEST_CASE("zeroed head pins the output at half range") {
  TSTModel<float> model(ModelConfig::preset("tst"));
  fill(model.decoder.head.weight, 0.0f);
  fill(model.decoder.head.bias, 0.0f);
  Rng rng(7);
  Tensor<float> x = Tensor<float>::randn({1, 3, 64, 64}, rng);
  Tensor<float> y = model.forward(x, false);
  for (float v : y.values()) CHECK(v == 5.0f);  // sigmoid(0) * max_depth
}

TEST_CASE("construction is seed-deterministic") {
  ModelConfig a = ModelConfig::preset("tst");
  ModelConfig b = ModelConfig::preset("tst");
  TSTModel<float> m1(a), m2(b);
  CHECK(max_abs_diff(m1.params.find("connection.level2.attn.v.conv.weight"),
                     m2.params.find("connection.level2.attn.v.conv.weight")) ==
        0.0);
  b.seed = 2;
  TSTModel<float> m3(b);
  CHECK(max_abs_diff(m1.params.find("encoder.stem.conv.weight"),
                     m3.params.find("encoder.stem.conv.weight")) > 0.0);

  CHECK(a.digest() == b.digest());  // seed does not change the architecture
  ModelConfig c = ModelConfig::preset("tst-s");
  CHECK(a.digest() != c.digest());
  ModelConfig d = a;
  d.attention_mode = AttentionMode::self;
  CHECK(a.digest() != d.digest());
}

TEST_CASE("end-to-end gradients flow through every component") {
  ModelConfig cfg = tiny_config();
  TSTModel<double> model(cfg);
  Rng rng(8);
  // Open the identity-init connection gates so probes of attention internals
  // see live gradients.
  Rng grng(21);
  for (auto& block : model.connection.blocks) {
    for (auto& g : block.attn.out.bn.gamma.values())
      g = grng.uniform(0.6, 1.4);
    for (auto& g : block.ffn.project.bn.gamma.values())
      g = grng.uniform(0.6, 1.4);
  }
  Tensor<double> x = Tensor<double>::randn({2, 3, 64, 64}, rng, 0.5);

  std::vector<Tensor<double>> leaves = {
      x,
      model.params.find("encoder.stem.conv.weight"),
      model.params.find("encoder.s3.b0.dw.bn.gamma"),
      model.params.find("connection.level2.attn.q.conv.weight"),
      model.params.find("connection.level1.ffn.dw.conv.weight"),
      model.params.find("decoder.fuse2.gate.bias"),
      model.params.find("decoder.head.weight"),
  };
  Rng wrng(99);
  Tensor<double> proj;
  auto loss = [&] {
    Tensor<double> y = model.forward(x, true);
    if (!proj.defined())
      proj = Tensor<double>::rand_uniform(y.shape(), wrng, 0.3, 1.7);
    return mean(mul(y, proj));
  };
  // h = 1e-6: wide enough for double-precision quotients, narrow enough that
  // no ReLU6 kink lands inside the difference window at this probe point.
  auto rep = ref::check_gradients(leaves, loss, 1e-6, 3);
  INFO(rep.worst);
  CHECK(rep.ok(1e-3));
  CHECK(rep.probes >= 15);
}
