#pragma once

// Layer vocabulary: a named parameter store plus the building blocks the
// depth network is assembled from. Every block normalizes with batch norm
// and activates with relu6; there is no other normalization or activation
// anywhere in the stack.

#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tst/image_ops.hpp"
#include "tst/ops.hpp"
#include "tst/profiler.hpp"

namespace tst {

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;
  bool learnable = true;
};

// Flat registry of every tensor a model owns, in construction order.
// Learnable entries feed the optimizer; buffers (running statistics) are
// carried through checkpoints but never updated by gradients.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t, bool learnable) {
    TST_REQUIRE(!index_.count(name), usage,
                "parameter registered twice: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, t, learnable});
    return t;
  }

  const std::vector<ParamEntry<T>>& entries() const { return entries_; }

  Tensor<T> find(const std::string& name) const {
    auto it = index_.find(name);
    TST_REQUIRE(it != index_.end(), usage, "no parameter named " + name);
    return entries_[it->second].tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name); }

  int64_t learnable_scalars() const {
    int64_t s = 0;
    for (const auto& e : entries_)
      if (e.learnable) s += e.tensor.numel();
    return s;
  }

  void set_requires_grad(bool on) {
    for (auto& e : entries_)
      if (e.learnable) e.tensor.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight, bias;
  int64_t cin = 0, cout = 0, k = 1;
  int stride = 1, pad = 0, groups = 1;

  Conv2dLayer() = default;

  Conv2dLayer(ParamStore<T>& store, const std::string& prefix, int64_t cin_,
              int64_t cout_, int64_t k_, int stride_, int pad_, int groups_,
              bool with_bias, Rng& rng)
      : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_),
        groups(groups_) {
    const int64_t fan_in = (cin / groups) * k * k;
    weight = store.add(
        prefix + ".weight",
        Tensor<T>::randn({cout, cin / groups, k, k}, rng,
                         T(std::sqrt(2.0 / double(fan_in)))),
        true);
    if (with_bias)
      bias = store.add(prefix + ".bias", Tensor<T>({cout}), true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, pad, groups);
  }

  void out_size(int64_t& h, int64_t& w) const {
    h = (h + 2 * pad - k) / stride + 1;
    w = (w + 2 * pad - k) / stride + 1;
  }

  void profile(const std::string& label, int64_t n, int64_t& h, int64_t& w,
               ProfileReport& rep) const {
    out_size(h, w);
    const int64_t params = weight.numel() + (bias.defined() ? cout : 0);
    const int64_t macs = n * k * k * (cin / groups) * cout * h * w;
    rep.add(label, "conv", params, macs);
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Tensor<T> gamma, beta, running_mean, running_var;
  T momentum = T(0.1), eps = T(1e-5);
  int64_t channels = 0;

  BatchNorm2dLayer() = default;

  BatchNorm2dLayer(ParamStore<T>& store, const std::string& prefix, int64_t c,
                   T momentum_ = T(0.1), T eps_ = T(1e-5))
      : momentum(momentum_), eps(eps_), channels(c) {
    gamma = store.add(prefix + ".gamma", Tensor<T>({c}, T(1)), true);
    beta = store.add(prefix + ".beta", Tensor<T>({c}), true);
    running_mean = store.add(prefix + ".running_mean", Tensor<T>({c}), false);
    running_var =
        store.add(prefix + ".running_var", Tensor<T>({c}, T(1)), false);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    Tensor<T> rm = running_mean, rv = running_var;  // shared buffers
    return batch_norm2d(x, gamma, beta, rm, rv, training, momentum, eps);
  }

  void profile(const std::string& label, ProfileReport& rep) const {
    rep.add(label, "bn", 2 * channels, 0);
  }
};

// Convolution, batch norm, and optionally relu6; the only composite the
// network is built from.
template <typename T>
struct ConvBNAct {
  Conv2dLayer<T> conv;
  BatchNorm2dLayer<T> bn;
  bool act = true;

  ConvBNAct() = default;

  ConvBNAct(ParamStore<T>& store, const std::string& prefix, int64_t cin,
            int64_t cout, int64_t k, int stride, int pad, int groups,
            bool act_, Rng& rng, T bn_momentum = T(0.1), T bn_eps = T(1e-5))
      : conv(store, prefix + ".conv", cin, cout, k, stride, pad, groups,
             /*with_bias=*/false, rng),
        bn(store, prefix + ".bn", cout, bn_momentum, bn_eps),
        act(act_) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    Tensor<T> h = bn.forward(conv.forward(x), training);
    return act ? relu6(h) : h;
  }

  void profile(const std::string& label, int64_t n, int64_t& h, int64_t& w,
               ProfileReport& rep) const {
    conv.profile(label + ".conv", n, h, w, rep);
    bn.profile(label + ".bn", rep);
  }
};

// Expand (1x1) -> depthwise 3x3 (carries the stride) -> project (1x1,
// linear). Skip connection when the block keeps shape.
template <typename T>
struct InvertedResidual {
  std::optional<ConvBNAct<T>> expand;
  ConvBNAct<T> dw;
  ConvBNAct<T> project;
  bool residual = false;

  InvertedResidual() = default;

  InvertedResidual(ParamStore<T>& store, const std::string& prefix,
                   int64_t cin, int64_t cout, int64_t expansion, int stride,
                   Rng& rng, T bn_momentum = T(0.1), T bn_eps = T(1e-5)) {
    TST_REQUIRE(expansion >= 1 && (stride == 1 || stride == 2), config,
                "inverted residual: bad expansion or stride");
    const int64_t mid = cin * expansion;
    if (expansion > 1)
      expand.emplace(store, prefix + ".expand", cin, mid, 1, 1, 0, 1, true,
                     rng, bn_momentum, bn_eps);
    dw = ConvBNAct<T>(store, prefix + ".dw", mid, mid, 3, stride, 1,
                      int(mid), true, rng, bn_momentum, bn_eps);
    project = ConvBNAct<T>(store, prefix + ".project", mid, cout, 1, 1, 0, 1,
                           false, rng, bn_momentum, bn_eps);
    residual = (stride == 1 && cin == cout);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    Tensor<T> h = expand ? expand->forward(x, training) : x;
    h = dw.forward(h, training);
    h = project.forward(h, training);
    return residual ? add(h, x) : h;
  }

  void profile(const std::string& label, int64_t n, int64_t& h, int64_t& w,
               ProfileReport& rep) const {
    if (expand) expand->profile(label + ".expand", n, h, w, rep);
    dw.profile(label + ".dw", n, h, w, rep);
    project.profile(label + ".project", n, h, w, rep);
  }
};

namespace detail {

// [N, heads*d, H, W] -> [N*heads, H*W, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int64_t heads, int64_t d) {
  const int64_t n = x.dim(0), s = x.dim(2) * x.dim(3);
  Tensor<T> r = reshape(x, {n, heads, d, s});
  r = permute(r, {0, 1, 3, 2});
  return reshape(r, {n * heads, s, d});
}

// [N*heads, H*W, d] -> [N, heads*d, H, W]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, int64_t n, int64_t heads, int64_t d,
                      int64_t h, int64_t w) {
  Tensor<T> r = reshape(x, {n, heads, h * w, d});
  r = permute(r, {0, 1, 3, 2});
  return reshape(r, {n, heads * d, h, w});
}

}  // namespace detail

// Multi-head scaled dot-product attention between a query map and a context
// map, with batch-normalized 1x1 projections on both sides and on the
// output. Queries keep their spatial layout; every query position attends
// over every context position.
template <typename T>
struct TokenAttention {
  int64_t channels = 0, ctx_channels = 0, heads = 1, dqk = 16, dv = 32;
  ConvBNAct<T> q, k, v, out;

  TokenAttention() = default;

  TokenAttention(ParamStore<T>& store, const std::string& prefix,
                 int64_t channels_, int64_t ctx_channels_, int64_t heads_,
                 int64_t dqk_, int64_t dv_, Rng& rng, T bn_momentum = T(0.1),
                 T bn_eps = T(1e-5))
      : channels(channels_), ctx_channels(ctx_channels_), heads(heads_),
        dqk(dqk_), dv(dv_) {
    q = ConvBNAct<T>(store, prefix + ".q", channels, heads * dqk, 1, 1, 0, 1,
                     false, rng, bn_momentum, bn_eps);
    k = ConvBNAct<T>(store, prefix + ".k", ctx_channels, heads * dqk, 1, 1, 0,
                     1, false, rng, bn_momentum, bn_eps);
    v = ConvBNAct<T>(store, prefix + ".v", ctx_channels, heads * dv, 1, 1, 0,
                     1, false, rng, bn_momentum, bn_eps);
    out = ConvBNAct<T>(store, prefix + ".out", heads * dv, channels, 1, 1, 0,
                       1, false, rng, bn_momentum, bn_eps);
    // Residual branch starts as a no-op: the first gradient step decides how
    // much attention enters the trunk.
    for (auto& g : out.bn.gamma.values()) g = T(0);
  }

  // The attention core on already-projected maps: scaled dot-product scores
  // from every query position to every context position, one softmax per
  // query, then the value average.
  Tensor<T> attend(const Tensor<T>& qmap, const Tensor<T>& kmap,
                   const Tensor<T>& vmap) const {
    const int64_t n = qmap.dim(0), hq = qmap.dim(2), wq = qmap.dim(3);
    Tensor<T> Q = detail::split_heads(qmap, heads, dqk);
    Tensor<T> K = detail::split_heads(kmap, heads, dqk);
    Tensor<T> V = detail::split_heads(vmap, heads, dv);
    Tensor<T> logits =
        bmm(scale(Q, T(1.0 / std::sqrt(double(dqk)))), K, /*trans_b=*/true);
    Tensor<T> A = softmax(logits, 2);
    return detail::merge_heads(bmm(A, V), n, heads, dv, hq, wq);
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& ctx,
                    bool training) const {
    TST_REQUIRE(x.rank() == 4 && ctx.rank() == 4 && x.dim(0) == ctx.dim(0),
                config, "attention: query and context batches disagree");
    Tensor<T> O = attend(q.forward(x, training), k.forward(ctx, training),
                         v.forward(ctx, training));
    return out.forward(O, training);
  }

  void profile(const std::string& label, int64_t n, int64_t hq, int64_t wq,
               int64_t hk, int64_t wk, ProfileReport& rep) const {
    int64_t h = hq, w = wq;
    q.profile(label + ".q", n, h, w, rep);
    h = hk, w = wk;
    k.profile(label + ".k", n, h, w, rep);
    h = hk, w = wk;
    v.profile(label + ".v", n, h, w, rep);
    const int64_t nq = hq * wq, nk = hk * wk;
    rep.add(label + ".scores", "attn", 0, n * heads * nq * nk * (dqk + dv));
    h = hq, w = wq;
    out.profile(label + ".out", n, h, w, rep);
  }
};

// Pointwise expand -> depthwise 3x3 -> pointwise project, batch-normalized
// throughout; the token mixer's position-wise counterpart.
template <typename T>
struct DepthwiseFFN {
  ConvBNAct<T> expand, dw, project;

  DepthwiseFFN() = default;

  DepthwiseFFN(ParamStore<T>& store, const std::string& prefix,
               int64_t channels, int64_t expansion, Rng& rng,
               T bn_momentum = T(0.1), T bn_eps = T(1e-5)) {
    const int64_t mid = channels * expansion;
    expand = ConvBNAct<T>(store, prefix + ".expand", channels, mid, 1, 1, 0,
                          1, true, rng, bn_momentum, bn_eps);
    dw = ConvBNAct<T>(store, prefix + ".dw", mid, mid, 3, 1, 1, int(mid),
                      true, rng, bn_momentum, bn_eps);
    project = ConvBNAct<T>(store, prefix + ".project", mid, channels, 1, 1,
                           0, 1, false, rng, bn_momentum, bn_eps);
    // Matches the attention branch: the block is an identity until trained.
    for (auto& g : project.bn.gamma.values()) g = T(0);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    return project.forward(dw.forward(expand.forward(x, training), training),
                           training);
  }

  void profile(const std::string& label, int64_t n, int64_t h, int64_t w,
               ProfileReport& rep) const {
    expand.profile(label + ".expand", n, h, w, rep);
    dw.profile(label + ".dw", n, h, w, rep);
    project.profile(label + ".project", n, h, w, rep);
  }
};

// Pre-residual transformer block: x + attention, then + feed-forward. The
// context is the shared token map (or the block's own input when it attends
// to itself).
template <typename T>
struct TransformerBlock {
  TokenAttention<T> attn;
  DepthwiseFFN<T> ffn;

  TransformerBlock() = default;

  TransformerBlock(ParamStore<T>& store, const std::string& prefix,
                   int64_t channels, int64_t ctx_channels, int64_t heads,
                   int64_t dqk, int64_t dv, int64_t ffn_expansion, Rng& rng,
                   T bn_momentum = T(0.1), T bn_eps = T(1e-5))
      : attn(store, prefix + ".attn", channels, ctx_channels, heads, dqk, dv,
             rng, bn_momentum, bn_eps),
        ffn(store, prefix + ".ffn", channels, ffn_expansion, rng, bn_momentum,
            bn_eps) {}

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& ctx,
                    bool training) const {
    Tensor<T> z = add(x, attn.forward(x, ctx, training));
    return add(z, ffn.forward(z, training));
  }

  void profile(const std::string& label, int64_t n, int64_t hq, int64_t wq,
               int64_t hk, int64_t wk, ProfileReport& rep) const {
    attn.profile(label + ".attn", n, hq, wq, hk, wk, rep);
    ffn.profile(label + ".ffn", n, hq, wq, rep);
  }
};

}  // namespace tst
