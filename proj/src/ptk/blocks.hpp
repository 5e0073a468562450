#pragma once

// General-operator residual blocks (conv / depthwise-conv bottleneck and
// self-attention + FFN), the stage-structured backbone emitting C2..C5, the
// feature pyramid emitting P2..P6, synchronized batch norm and simple task
// heads.

#include <optional>

#include "ptk/ops_nn.hpp"
#include "ptk/param_store.hpp"

namespace ptk {

enum class OperatorKind { Conv, DwConv, SelfAttention, LocalSelfAttention };

inline const char* operator_name(OperatorKind k) {
  switch (k) {
    case OperatorKind::Conv: return "conv";
    case OperatorKind::DwConv: return "dwconv";
    case OperatorKind::SelfAttention: return "attn";
    case OperatorKind::LocalSelfAttention: return "lattn";
  }
  return "?";
}

inline OperatorKind operator_from_name(const std::string& s) {
  if (s == "conv") return OperatorKind::Conv;
  if (s == "dwconv") return OperatorKind::DwConv;
  if (s == "attn") return OperatorKind::SelfAttention;
  if (s == "lattn") return OperatorKind::LocalSelfAttention;
  PTK_FAIL("unknown operator: " << s);
}

struct BlockConfig {
  OperatorKind op = OperatorKind::Conv;
  i64 channels = 8;
  i64 expansion = 4;
  i64 window = 4;  // local self-attention only

  void validate() const {
    PTK_CHECK(channels > 0, "block: channels must be positive");
    PTK_CHECK(expansion >= 2 && expansion <= 6, "block: expansion outside {2..6}");
    if (op == OperatorKind::LocalSelfAttention)
      PTK_CHECK(window > 0, "block: window must be positive");
  }
};

struct StageSpec {
  std::vector<BlockConfig> blocks;
  i64 stride = 1;  // 1 or 2, applied by the stage-entry transition
  i64 out_channels = 8;

  void validate() const {
    PTK_CHECK(!blocks.empty(), "stage: needs at least one block");
    PTK_CHECK(stride == 1 || stride == 2, "stage: stride must be 1 or 2");
    for (const auto& b : blocks) {
      b.validate();
      PTK_CHECK(b.channels == out_channels, "stage: block channels != out_channels");
    }
  }
};

inline i64 attention_heads(i64 channels) { return std::max<i64>(1, channels / 16); }

// ------------------------------------------------------------ raw formulas
// Parameter bundles so the same forward code serves both the layer classes
// and direct finite-difference checks.

template <typename T>
struct GopConvParams {
  VarT<T> w_up, b_up, w_mid, b_mid, w_down, b_down;
};

// y = x + Proj_{ec->c}(Conv(Proj_{c->ec}(x))), GELU after each inner stage.
template <typename T>
VarT<T> gop_conv_block_forward(VarT<T> x, const GopConvParams<T>& p, bool depthwise) {
  VarT<T> h = add_channel_bias(conv2d(x, p.w_up), p.b_up);
  h = gelu(h);
  h = depthwise ? depthwise_conv2d(h, p.w_mid, 1, 1) : conv2d(h, p.w_mid, 1, 1);
  h = gelu(add_channel_bias(h, p.b_mid));
  h = add_channel_bias(conv2d(h, p.w_down), p.b_down);
  return add(x, h);
}

template <typename T>
struct AttentionParams {
  VarT<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct FfnParams {
  VarT<T> w1, b1, w2, b2;
};

// Multi-head scaled dot-product attention on a [B,T,C] sequence.
template <typename T>
VarT<T> self_attention_seq(VarT<T> x, const AttentionParams<T>& p, i64 heads) {
  const auto& shape = x.value().shape;
  const i64 b = shape[0], t = shape[1], c = shape[2];
  const i64 dh = c / heads;
  PTK_CHECK(c % heads == 0, "attention: channels not divisible by heads");
  auto flat = reshape(x, {b * t, c});
  auto q = split_heads(reshape(linear(flat, p.wq, p.bq), {b, t, c}), heads);
  auto k = split_heads(reshape(linear(flat, p.wk, p.bk), {b, t, c}), heads);
  auto v = split_heads(reshape(linear(flat, p.wv, p.bv), {b, t, c}), heads);
  auto scores = mul_scalar(batched_matmul(q, k, /*transpose_b=*/true),
                           1.0 / std::sqrt(double(dh)));
  auto attn = softmax_lastdim(scores);
  auto z = merge_heads(batched_matmul(attn, v), heads);
  return reshape(linear(reshape(z, {b * t, c}), p.wo, p.bo), {b, t, c});
}

// Spatial self-attention on [N,C,H,W]; window > 0 switches to non-overlapping
// local windows.
template <typename T>
VarT<T> self_attention_map(VarT<T> x, const AttentionParams<T>& p, i64 heads, i64 window) {
  const auto& shape = x.value().shape;
  const i64 n = shape[0], h = shape[2], w = shape[3];
  if (window > 0 && (h > window || w > window)) {
    PTK_CHECK(h % window == 0 && w % window == 0,
              "local attention: window does not divide spatial extent");
    auto win = window_partition(x, window);
    auto seq = nchw_to_ntc(win);
    auto out = self_attention_seq(seq, p, heads);
    return window_unpartition(ntc_to_nchw(out, window, window), window, n, h, w);
  }
  auto seq = nchw_to_ntc(x);
  auto out = self_attention_seq(seq, p, heads);
  return ntc_to_nchw(out, h, w);
}

template <typename T>
VarT<T> ffn_seq(VarT<T> x, const FfnParams<T>& p) {
  const auto& shape = x.value().shape;
  const i64 b = shape[0], t = shape[1], c = shape[2];
  auto h = linear(reshape(x, {b * t, c}), p.w1, p.b1);
  h = gelu(h);
  h = linear(h, p.w2, p.b2);
  return reshape(h, {b, t, c});
}

// y' = x + SA(x); y = y' + FFN(y').
template <typename T>
VarT<T> gop_attn_block_forward(VarT<T> x, const AttentionParams<T>& ap,
                               const FfnParams<T>& fp, i64 heads, i64 window) {
  VarT<T> y1 = add(x, self_attention_map(x, ap, heads, window));
  const i64 h = y1.value().shape[2], w = y1.value().shape[3];
  auto seq = nchw_to_ntc(y1);
  auto f = ffn_seq(seq, fp);
  return add(y1, ntc_to_nchw(f, h, w));
}

// Sequence-domain GOP attention block (text encoder).
template <typename T>
VarT<T> gop_attn_block_seq(VarT<T> x, const AttentionParams<T>& ap, const FfnParams<T>& fp,
                           i64 heads) {
  VarT<T> y1 = add(x, self_attention_seq(x, ap, heads));
  return add(y1, ffn_seq(y1, fp));
}

// ------------------------------------------------------------ layer classes

template <typename T>
struct Conv2dLayer {
  std::string prefix;
  i64 cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
  bool bias = true;

  void init(ParamStoreT<T>& store, Rng& rng, double scale = 1.0) const {
    const double std = scale * std::sqrt(2.0 / double(cin * k * k));
    store.add(prefix + ".w", TensorT<T>::randn({cout, cin, k, k}, rng, std));
    if (bias) store.add(prefix + ".b", TensorT<T>::zeros({cout}));
  }
  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    VarT<T> y = conv2d(x, b(prefix + ".w"), stride, pad);
    if (bias) y = add_channel_bias(y, b(prefix + ".b"));
    return y;
  }
};

template <typename T>
struct DwConv2dLayer {
  std::string prefix;
  i64 c = 0, k = 3, stride = 1, pad = 1;

  void init(ParamStoreT<T>& store, Rng& rng) const {
    const double std = std::sqrt(2.0 / double(k * k));
    store.add(prefix + ".w", TensorT<T>::randn({c, 1, k, k}, rng, std));
    store.add(prefix + ".b", TensorT<T>::zeros({c}));
  }
  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    return add_channel_bias(depthwise_conv2d(x, b(prefix + ".w"), stride, pad),
                            b(prefix + ".b"));
  }
};

template <typename T>
struct LinearLayer {
  std::string prefix;
  i64 din = 0, dout = 0;

  void init(ParamStoreT<T>& store, Rng& rng, double scale = 1.0) const {
    const double std = scale * std::sqrt(1.0 / double(din));
    store.add(prefix + ".w", TensorT<T>::randn({din, dout}, rng, std));
    store.add(prefix + ".b", TensorT<T>::zeros({dout}));
  }
  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    return linear(x, b(prefix + ".w"), b(prefix + ".b"));
  }
};

// Batch norm with running statistics; training mode updates the running
// buffers in the store. The batch statistics of a forward over a union batch
// are exactly the globally synchronized statistics of its sub-batches.
template <typename T>
struct BatchNorm2dLayer {
  std::string prefix;
  i64 c = 0;
  double eps = 1e-5;
  double momentum = 0.1;

  void init(ParamStoreT<T>& store) const {
    store.add(prefix + ".gamma", TensorT<T>::full({c}, T(1)));
    store.add(prefix + ".beta", TensorT<T>::zeros({c}));
    store.add(prefix + ".running_mean", TensorT<T>::zeros({c}), /*trainable=*/false);
    store.add(prefix + ".running_var", TensorT<T>::full({c}, T(1)), /*trainable=*/false);
  }

  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    if (b.training()) {
      std::vector<double> bm(std::size_t(c), 0.0), bv(std::size_t(c), 0.0);
      VarT<T> y = batchnorm2d_train(x, b(prefix + ".gamma"), b(prefix + ".beta"), eps, &bm, &bv);
      auto& rm = b.store().get(prefix + ".running_mean");
      auto& rv = b.store().get(prefix + ".running_var");
      for (i64 i = 0; i < c; ++i) {
        rm[i] = T((1.0 - momentum) * double(rm[i]) + momentum * bm[std::size_t(i)]);
        rv[i] = T((1.0 - momentum) * double(rv[i]) + momentum * bv[std::size_t(i)]);
      }
      return y;
    }
    const auto& rm = b.store().get(prefix + ".running_mean");
    const auto& rv = b.store().get(prefix + ".running_var");
    std::vector<double> m(std::size_t(c), 0.0), v(std::size_t(c), 0.0);
    for (i64 i = 0; i < c; ++i) {
      m[std::size_t(i)] = double(rm[i]);
      v[std::size_t(i)] = double(rv[i]);
    }
    return batchnorm2d_eval(x, b(prefix + ".gamma"), b(prefix + ".beta"), m, v, eps);
  }
};

// Synchronized batch norm over explicit groups: statistics come from the
// union, each group is normalized with the shared statistics.
template <typename T>
std::vector<VarT<T>> sync_batchnorm_groups(const std::vector<VarT<T>>& groups,
                                           VarT<T> gamma, VarT<T> beta, double eps,
                                           std::vector<double>* mean_out = nullptr,
                                           std::vector<double>* var_out = nullptr) {
  PTK_CHECK(!groups.empty(), "sync_batchnorm: empty group list");
  i64 total = 0;
  for (const auto& g : groups) total += g.value().shape[0];
  PTK_CHECK(total > 0, "sync_batchnorm: empty union");
  const i64 c = groups[0].value().shape[1];
  std::vector<double> bm(std::size_t(c), 0.0), bv(std::size_t(c), 0.0);
  VarT<T> unioned = concat_dim0(groups);
  VarT<T> normed = batchnorm2d_train(unioned, gamma, beta, eps, &bm, &bv);
  if (mean_out) *mean_out = bm;
  if (var_out) *var_out = bv;
  std::vector<VarT<T>> out;
  i64 off = 0;
  for (const auto& g : groups) {
    const i64 n = g.value().shape[0];
    out.push_back(slice_dim0(normed, off, off + n));
    off += n;
  }
  return out;
}

template <typename T>
struct GopBlockLayer {
  std::string prefix;
  BlockConfig cfg;

  void init(ParamStoreT<T>& store, Rng& rng) const {
    cfg.validate();
    const i64 c = cfg.channels, ec = c * cfg.expansion;
    if (cfg.op == OperatorKind::Conv || cfg.op == OperatorKind::DwConv) {
      const bool dw = cfg.op == OperatorKind::DwConv;
      store.add(prefix + ".up.w",
                TensorT<T>::randn({ec, c, 1, 1}, rng, std::sqrt(2.0 / double(c))));
      store.add(prefix + ".up.b", TensorT<T>::zeros({ec}));
      if (dw)
        store.add(prefix + ".mid.w", TensorT<T>::randn({ec, 1, 3, 3}, rng, std::sqrt(2.0 / 9.0)));
      else
        store.add(prefix + ".mid.w",
                  TensorT<T>::randn({ec, ec, 3, 3}, rng, std::sqrt(2.0 / double(9 * ec))));
      store.add(prefix + ".mid.b", TensorT<T>::zeros({ec}));
      store.add(prefix + ".down.w",
                TensorT<T>::randn({c, ec, 1, 1}, rng, std::sqrt(2.0 / double(ec))));
      store.add(prefix + ".down.b", TensorT<T>::zeros({c}));
    } else {
      const double std = std::sqrt(1.0 / double(c));
      for (const char* nm : {"q", "k", "v", "o"}) {
        store.add(prefix + ".attn." + std::string(nm) + ".w",
                  TensorT<T>::randn({c, c}, rng, std));
        store.add(prefix + ".attn." + std::string(nm) + ".b", TensorT<T>::zeros({c}));
      }
      store.add(prefix + ".ffn.w1", TensorT<T>::randn({c, ec}, rng, std));
      store.add(prefix + ".ffn.b1", TensorT<T>::zeros({ec}));
      store.add(prefix + ".ffn.w2",
                TensorT<T>::randn({ec, c}, rng, std::sqrt(1.0 / double(ec))));
      store.add(prefix + ".ffn.b2", TensorT<T>::zeros({c}));
    }
  }

  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    PTK_CHECK(x.value().shape[1] == cfg.channels, "gop block: channel mismatch");
    if (cfg.op == OperatorKind::Conv || cfg.op == OperatorKind::DwConv) {
      GopConvParams<T> p{b(prefix + ".up.w"),   b(prefix + ".up.b"),
                         b(prefix + ".mid.w"),  b(prefix + ".mid.b"),
                         b(prefix + ".down.w"), b(prefix + ".down.b")};
      return gop_conv_block_forward(x, p, cfg.op == OperatorKind::DwConv);
    }
    AttentionParams<T> ap{b(prefix + ".attn.q.w"), b(prefix + ".attn.q.b"),
                          b(prefix + ".attn.k.w"), b(prefix + ".attn.k.b"),
                          b(prefix + ".attn.v.w"), b(prefix + ".attn.v.b"),
                          b(prefix + ".attn.o.w"), b(prefix + ".attn.o.b")};
    FfnParams<T> fp{b(prefix + ".ffn.w1"), b(prefix + ".ffn.b1"), b(prefix + ".ffn.w2"),
                    b(prefix + ".ffn.b2")};
    const i64 window = cfg.op == OperatorKind::LocalSelfAttention ? cfg.window : 0;
    return gop_attn_block_forward(x, ap, fp, attention_heads(cfg.channels), window);
  }
};

// Stage entry: 3x3 conv (stride 1 or 2) + BN + GELU, then the GOP blocks.
// Downsampling lives in the first layer of the stage.
template <typename T>
struct StageLayer {
  std::string prefix;
  StageSpec spec;
  i64 cin = 0;

  Conv2dLayer<T> transition() const {
    return Conv2dLayer<T>{prefix + ".trans", cin, spec.out_channels, 3, spec.stride, 1, true};
  }
  BatchNorm2dLayer<T> norm() const {
    return BatchNorm2dLayer<T>{prefix + ".bn", spec.out_channels};
  }
  GopBlockLayer<T> block(std::size_t i) const {
    return GopBlockLayer<T>{prefix + ".block" + std::to_string(i), spec.blocks[i]};
  }

  void init(ParamStoreT<T>& store, Rng& rng) const {
    spec.validate();
    transition().init(store, rng);
    norm().init(store);
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) block(i).init(store, rng);
  }

  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    VarT<T> y = gelu(norm()(b, transition()(b, x)));
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) y = block(i)(b, y);
    return y;
  }
};

// Named multi-scale feature maps: C2..C5 and optionally P2..P6.
template <typename T>
struct FeatureMapSetT {
  std::map<std::string, VarT<T>> maps;

  bool has(const std::string& name) const { return maps.count(name) != 0; }
  VarT<T> at(const std::string& name) const {
    auto it = maps.find(name);
    PTK_CHECK(it != maps.end(), "feature map set: missing level " << name);
    return it->second;
  }
  void set(const std::string& name, VarT<T> v) { maps[name] = v; }
};

using FeatureMapSet = FeatureMapSetT<float>;

// Stage-structured backbone. Stage strides multiply up to x32; the last stage
// at overall stride 4/8/16/32 is exported as C2/C3/C4/C5.
template <typename T>
struct BackboneT {
  std::string prefix = "backbone";
  i64 in_channels = 3;
  std::vector<StageSpec> stages;

  std::vector<StageLayer<T>> layers() const {
    std::vector<StageLayer<T>> out;
    i64 cin = in_channels;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      out.push_back(StageLayer<T>{prefix + ".stage" + std::to_string(i), stages[i], cin});
      cin = stages[i].out_channels;
    }
    return out;
  }

  // stage index -> exported level name ("C2".."C5") for the last stage at
  // each power-of-two stride
  std::map<std::size_t, std::string> taps() const {
    std::map<std::size_t, std::string> out;
    std::map<i64, std::size_t> last_at_stride;
    i64 s = 1;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      s *= stages[i].stride;
      last_at_stride[s] = i;
    }
    PTK_CHECK(s == 32, "backbone: total stride must be 32, got " << s);
    for (i64 level = 2; level <= 5; ++level) {
      const i64 want = i64(1) << level;
      auto it = last_at_stride.find(want);
      PTK_CHECK(it != last_at_stride.end(), "backbone: no stage at stride " << want);
      out[it->second] = "C" + std::to_string(level);
    }
    return out;
  }

  i64 out_channels(const std::string& level) const {
    for (const auto& [idx, name] : taps())
      if (name == level) return stages[idx].out_channels;
    PTK_FAIL("backbone: unknown level " << level);
  }

  void init(ParamStoreT<T>& store, Rng& rng) const {
    for (const auto& l : layers()) l.init(store, rng);
  }

  FeatureMapSetT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    const auto& shape = x.value().shape;
    PTK_CHECK(shape.size() == 4, "backbone: want [N,C,H,W]");
    PTK_CHECK(shape[2] % 32 == 0 && shape[3] % 32 == 0,
              "backbone: input spatial size must be divisible by 32");
    FeatureMapSetT<T> fm;
    const auto tap = taps();
    VarT<T> y = x;
    const auto ls = layers();
    for (std::size_t i = 0; i < ls.size(); ++i) {
      y = ls[i](b, y);
      auto it = tap.find(i);
      if (it != tap.end()) fm.set(it->second, y);
    }
    return fm;
  }
};

using Backbone = BackboneT<float>;

// Feature pyramid. Lateral 1x1 projections, top-down nearest-neighbor
// upsampling with addition, 3x3 merge convolutions; P6 is a stride-2 conv of
// the designated C5 source.
template <typename T>
struct FpnT {
  std::string prefix = "fpn";
  std::map<std::string, i64> in_channels;  // C2..C5
  i64 out_ch = 32;
  i64 p6_in = -1;  // channel count of the P6 source; -1 means same as C5

  Conv2dLayer<T> lateral(const std::string& level, i64 cin) const {
    return Conv2dLayer<T>{prefix + ".lat" + level, cin, out_ch, 1, 1, 0, true};
  }
  Conv2dLayer<T> merge(const std::string& level) const {
    return Conv2dLayer<T>{prefix + ".merge" + level, out_ch, out_ch, 3, 1, 1, true};
  }
  Conv2dLayer<T> p6conv(i64 cin) const {
    return Conv2dLayer<T>{prefix + ".p6", cin, out_ch, 3, 2, 1, true};
  }

  void init(ParamStoreT<T>& store, Rng& rng) const {
    PTK_CHECK(in_channels.size() == 4, "fpn: want C2..C5 input channels");
    for (const auto& [lvl, cin] : in_channels) {
      lateral(lvl, cin).init(store, rng);
      merge(lvl).init(store, rng);
    }
    p6conv(p6_in > 0 ? p6_in : in_channels.at("C5")).init(store, rng);
  }

  // p5_source: feature used for the P5 lateral (defaults to C5); p6_source:
  // feature fed to the stride-2 P6 conv (always a plain C5-shaped map).
  FeatureMapSetT<T> operator()(BinderT<T>& b, const FeatureMapSetT<T>& c,
                               std::optional<VarT<T>> p5_source = std::nullopt,
                               std::optional<VarT<T>> p6_source = std::nullopt) const {
    for (const char* lvl : {"C2", "C3", "C4", "C5"})
      PTK_CHECK(c.has(lvl), "fpn: missing level " << lvl);
    FeatureMapSetT<T> out = c;
    VarT<T> top = lateral("C5", in_channels.at("C5"))(b, p5_source ? *p5_source : c.at("C5"));
    out.set("P5", merge("C5")(b, top));
    VarT<T> carry = top;
    const char* levels[3] = {"C4", "C3", "C2"};
    for (const char* lvl : levels) {
      VarT<T> lat = lateral(lvl, in_channels.at(lvl))(b, c.at(lvl));
      carry = add(lat, upsample_nearest2x(carry));
      out.set(std::string("P") + lvl[1], merge(lvl)(b, carry));
    }
    out.set("P6",
            p6conv(p6_in > 0 ? p6_in : in_channels.at("C5"))(b, p6_source ? *p6_source
                                                                          : c.at("C5")));
    return out;
  }
};

using Fpn = FpnT<float>;

// ------------------------------------------------------------- task heads

template <typename T>
struct ClassifierHeadT {
  std::string prefix;
  i64 cin = 0, classes = 0;

  void init(ParamStoreT<T>& store, Rng& rng) const {
    LinearLayer<T>{prefix + ".fc", cin, classes}.init(store, rng);
  }
  VarT<T> operator()(BinderT<T>& b, VarT<T> c5) const {
    return LinearLayer<T>{prefix + ".fc", cin, classes}(b, global_avg_pool(c5));
  }
};

// Two-layer MLP over RoI-pooled features emitting class logits and box deltas.
template <typename T>
struct RoiBoxHeadT {
  std::string prefix;
  i64 cin = 0, pool = 7, hidden = 64, classes = 0;

  void init(ParamStoreT<T>& store, Rng& rng) const {
    LinearLayer<T>{prefix + ".fc1", cin * pool * pool, hidden}.init(store, rng);
    LinearLayer<T>{prefix + ".cls", hidden, classes}.init(store, rng);
    LinearLayer<T>{prefix + ".box", hidden, 4}.init(store, rng);
  }
  std::pair<VarT<T>, VarT<T>> operator()(BinderT<T>& b, VarT<T> roi_feats) const {
    const auto& s = roi_feats.value().shape;
    auto h = reshape(roi_feats, {s[0], s[1] * s[2] * s[3]});
    h = relu(LinearLayer<T>{prefix + ".fc1", cin * pool * pool, hidden}(b, h));
    return {LinearLayer<T>{prefix + ".cls", hidden, classes}(b, h),
            LinearLayer<T>{prefix + ".box", hidden, 4}(b, h)};
  }
};

// Two-layer conv classifier on a stride-4 map (per-cell labels).
template <typename T>
struct PixelHeadT {
  std::string prefix;
  i64 cin = 0, hidden = 32, classes = 0;

  void init(ParamStoreT<T>& store, Rng& rng) const {
    Conv2dLayer<T>{prefix + ".c1", cin, hidden, 3, 1, 1, true}.init(store, rng);
    Conv2dLayer<T>{prefix + ".c2", hidden, classes, 1, 1, 0, true}.init(store, rng);
  }
  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    auto h = relu(Conv2dLayer<T>{prefix + ".c1", cin, hidden, 3, 1, 1, true}(b, x));
    return Conv2dLayer<T>{prefix + ".c2", hidden, classes, 1, 1, 0, true}(b, h);
  }
};

// Single-channel regression head for dense depth.
template <typename T>
struct DepthHeadT {
  std::string prefix;
  i64 cin = 0, hidden = 32;

  void init(ParamStoreT<T>& store, Rng& rng) const {
    Conv2dLayer<T>{prefix + ".c1", cin, hidden, 3, 1, 1, true}.init(store, rng);
    Conv2dLayer<T>{prefix + ".c2", hidden, 1, 1, 1, 0, true}.init(store, rng);
  }
  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    auto h = relu(Conv2dLayer<T>{prefix + ".c1", cin, hidden, 3, 1, 1, true}(b, x));
    return Conv2dLayer<T>{prefix + ".c2", hidden, 1, 1, 1, 0, true}(b, h);
  }
};

// linear -> relu -> linear, the projector/predictor shape used by the
// self-supervised local adaptation.
template <typename T>
struct MlpT {
  std::string prefix;
  i64 din = 0, hidden = 0, dout = 0;

  void init(ParamStoreT<T>& store, Rng& rng) const {
    LinearLayer<T>{prefix + ".l1", din, hidden}.init(store, rng);
    LinearLayer<T>{prefix + ".l2", hidden, dout}.init(store, rng);
  }
  VarT<T> operator()(BinderT<T>& b, VarT<T> x) const {
    auto h = relu(LinearLayer<T>{prefix + ".l1", din, hidden}(b, x));
    return LinearLayer<T>{prefix + ".l2", hidden, dout}(b, h);
  }
};

}  // namespace ptk
