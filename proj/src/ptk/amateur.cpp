#include "ptk/amateur.hpp"

namespace ptk::amateur {

using harness::vocab::kCaptionLen;
using harness::vocab::kMask;
using harness::vocab::kPad;

// ------------------------------------------------------------ encoder pair

void EncoderPair::init(ParamStore& store, Rng& rng) const {
  BackboneT<float> bb{"backbone", 3, nas::arch_to_stages(cfg.arch)};
  bb.init(store, rng);
  LinearLayer<float>{"img.proj", bb.out_channels("C5"), cfg.embed_dim}.init(store, rng);

  store.add("txt.embed", Tensor::randn({cfg.vocab, cfg.text_dim}, rng, 0.1));
  store.add("txt.pos", Tensor::randn({cfg.caption_len, cfg.text_dim}, rng, 0.1));
  const double std = std::sqrt(1.0 / double(cfg.text_dim));
  for (const char* nm : {"q", "k", "v", "o"}) {
    store.add("txt.attn." + std::string(nm) + ".w",
              Tensor::randn({cfg.text_dim, cfg.text_dim}, rng, std));
    store.add("txt.attn." + std::string(nm) + ".b", Tensor::zeros({cfg.text_dim}));
  }
  store.add("txt.ffn.w1", Tensor::randn({cfg.text_dim, 2 * cfg.text_dim}, rng, std));
  store.add("txt.ffn.b1", Tensor::zeros({2 * cfg.text_dim}));
  store.add("txt.ffn.w2", Tensor::randn({2 * cfg.text_dim, cfg.text_dim}, rng,
                                        std::sqrt(1.0 / double(2 * cfg.text_dim))));
  store.add("txt.ffn.b2", Tensor::zeros({cfg.text_dim}));
  LinearLayer<float>{"txt.proj", cfg.text_dim, cfg.embed_dim}.init(store, rng);
  LinearLayer<float>{"txt.mlm", cfg.text_dim, cfg.vocab}.init(store, rng);

  store.add("temp.log_tau", Tensor({1}, {float(std::log(cfg.tau_init))}));
}

Var EncoderPair::image_embed(Binder& b, Var images) const {
  BackboneT<float> bb{"backbone", 3, nas::arch_to_stages(cfg.arch)};
  auto fm = bb(b, images);
  auto pooled = global_avg_pool(fm.at("C5"));
  auto proj = LinearLayer<float>{"img.proj", bb.out_channels("C5"), cfg.embed_dim}(b, pooled);
  return l2_normalize_rows(proj);
}

namespace {
std::vector<i64> flatten_tokens(const std::vector<std::vector<i64>>& tokens, i64 len) {
  std::vector<i64> flat;
  flat.reserve(tokens.size() * std::size_t(len));
  for (const auto& seq : tokens) {
    PTK_CHECK(i64(seq.size()) == len, "text: caption length mismatch");
    for (i64 t : seq) flat.push_back(t);
  }
  return flat;
}
}  // namespace

EncoderPair::TextForward EncoderPair::text_forward(
    Binder& b, const std::vector<std::vector<i64>>& tokens) const {
  const i64 n = i64(tokens.size()), t = cfg.caption_len, d = cfg.text_dim;
  auto flat = flatten_tokens(tokens, t);
  auto emb = gather_rows(b("txt.embed"), flat);             // [N*T, d]
  auto seq = add_bcast_batch(reshape(emb, {n, t, d}), b("txt.pos"));
  AttentionParams<float> ap{b("txt.attn.q.w"), b("txt.attn.q.b"), b("txt.attn.k.w"),
                            b("txt.attn.k.b"), b("txt.attn.v.w"), b("txt.attn.v.b"),
                            b("txt.attn.o.w"), b("txt.attn.o.b")};
  FfnParams<float> fp{b("txt.ffn.w1"), b("txt.ffn.b1"), b("txt.ffn.w2"), b("txt.ffn.b2")};
  auto feats = gop_attn_block_seq(seq, ap, fp, attention_heads(d));
  auto pooled = mean_axis1(feats);
  auto proj = LinearLayer<float>{"txt.proj", d, cfg.embed_dim}(b, pooled);
  return {l2_normalize_rows(proj), feats};
}

EncoderPair::MlmForward EncoderPair::text_mlm(Binder& b,
                                              const std::vector<std::vector<i64>>& tokens,
                                              Rng& rng) const {
  const i64 t = cfg.caption_len;
  std::vector<std::vector<i64>> masked = tokens;
  std::vector<i64> positions;  // flat n*T + t
  std::vector<i64> targets;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    i64 masked_here = 0;
    for (i64 j = 0; j < t; ++j) {
      if (masked[i][std::size_t(j)] == kPad) continue;
      if (rng.uniform() < 0.15) {
        positions.push_back(i64(i) * t + j);
        targets.push_back(masked[i][std::size_t(j)]);
        masked[i][std::size_t(j)] = kMask;
        ++masked_here;
      }
    }
    if (masked_here == 0) {  // always supervise at least one token per caption
      const i64 j = rng.uniform_int(t);
      if (masked[i][std::size_t(j)] != kPad) {
        positions.push_back(i64(i) * t + j);
        targets.push_back(masked[i][std::size_t(j)]);
        masked[i][std::size_t(j)] = kMask;
      }
    }
  }
  auto fwd = text_forward(b, masked);
  const i64 n = i64(masked.size());
  auto flat_feats = reshape(fwd.token_features, {n * t, cfg.text_dim});
  if (positions.empty()) {
    auto zero = b.tape().constant(Tensor::zeros({1, cfg.vocab}));
    return {zero, {}};
  }
  auto picked = gather_rows(flat_feats, positions);
  auto logits = LinearLayer<float>{"txt.mlm", cfg.text_dim, cfg.vocab}(b, picked);
  return {logits, targets};
}

Var EncoderPair::temperature(Binder& b) const { return exp_op(b("temp.log_tau")); }

// -------------------------------------------------------------- proposals

std::vector<Proposal> gen_proposals(Rng& rng, i64 count, i64 image_size) {
  // area floor: 1/64 of the image
  const double min_area = double(image_size * image_size) / 64.0;
  std::vector<Proposal> out;
  for (i64 i = 0; i < count; ++i) {
    Proposal p;
    for (;;) {
      const double w = rng.uniform(double(image_size) / 8.0, double(image_size) / 2.0);
      const double h = rng.uniform(double(image_size) / 8.0, double(image_size) / 2.0);
      if (w * h < min_area) continue;
      p.x1 = rng.uniform(0.0, double(image_size) - w);
      p.y1 = rng.uniform(0.0, double(image_size) - h);
      p.x2 = p.x1 + w;
      p.y2 = p.y1 + h;
      break;
    }
    p.validate(image_size);
    out.push_back(p);
  }
  return out;
}

void assign_proposals(std::vector<Proposal>& proposals, Rng& rng) {
  static const std::vector<double> kLevelProbs = {0.1, 0.2, 0.3, 0.4};
  for (auto& p : proposals) p.level = 2 + int(rng.categorical(kLevelProbs));
}

// ------------------------------------------------------------ augmentation

namespace {

Tensor augment_images(const Tensor& batch, Rng& rng) {
  Tensor out = batch;
  const i64 n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
  for (i64 b = 0; b < n; ++b) {
    const bool flip = rng.uniform() < 0.5;
    const float bright = float(rng.uniform(-0.05, 0.05));
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x) {
          const float v = batch.at4(b, ch, y, flip ? w - 1 - x : x) + bright;
          out.at4(b, ch, y, x) = v;
        }
  }
  return out;
}

std::vector<std::vector<i64>> augment_captions(const std::vector<std::vector<i64>>& caps,
                                               Rng& rng) {
  std::vector<std::vector<i64>> out = caps;
  for (auto& seq : out) {
    // drop the position and size words sometimes; class words stay
    if (seq.size() > 4 && rng.uniform() < 0.5) seq[4] = kPad;
    if (seq.size() > 5 && rng.uniform() < 0.5) seq[5] = kPad;
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------ global phase

GlobalPhaseResult train_global_phase(const nas::ArchSpec& arch,
                      const std::vector<harness::MultimodalSample>& corpus,
                      const GlobalPhaseConfig& cfg) {
  PTK_CHECK(!corpus.empty(), "global pretraining: empty corpus");
  EncoderPair enc;
  enc.cfg.arch = arch;
  enc.cfg.embed_dim = cfg.embed_dim;
  enc.cfg.tau_init = cfg.tau_init;

  Rng rng(fnv1a("amateur-global", cfg.seed));
  GlobalPhaseResult res;
  enc.init(res.params, rng);

  OptConfig img_cfg;
  img_cfg.kind = OptKind::AdamW;
  img_cfg.weight_decay = 1e-4;
  Optimizer img_opt(img_cfg);
  img_opt.set_lr_scale("temp.", 0.1);  // the temperature trains 10x slower

  OptConfig txt_cfg;
  txt_cfg.kind = OptKind::SgdNesterov;
  txt_cfg.momentum = 0.9;
  Optimizer txt_opt(txt_cfg);

  LossMonitor monitor(cfg.monitor_threshold);
  TextQueue queue(cfg.queue_capacity);

  std::vector<Tensor> images;
  std::vector<std::vector<i64>> captions;
  for (const auto& s : corpus) {
    images.push_back(s.image);
    captions.push_back(s.caption);
  }

  for (i64 step = 0; step < cfg.steps; ++step) {
    std::vector<i64> idx;
    for (i64 i = 0; i < cfg.batch; ++i) idx.push_back(rng.uniform_int(i64(corpus.size())));
    Tensor base = harness::make_batch(images, idx);
    std::vector<std::vector<i64>> caps;
    for (i64 i : idx) caps.push_back(captions[std::size_t(i)]);

    Tape tape;
    Binder bind(tape, res.params, /*training=*/true);
    Var img1 = tape.constant(augment_images(base, rng));
    Var img2 = tape.constant(augment_images(base, rng));
    auto caps2 = augment_captions(caps, rng);

    Var z_i = enc.image_embed(bind, img1);
    Var z_i2 = enc.image_embed(bind, img2);
    auto tf1 = enc.text_forward(bind, caps);
    auto tf2 = enc.text_forward(bind, caps2);
    auto mlm = enc.text_mlm(bind, caps, rng);
    Var tau = enc.temperature(bind);

    auto ics = ics_loss(z_i, z_i2, tf1.embed, tf2.embed, mlm.logits, mlm.targets, tau);
    Var total;
    if (!queue.empty()) {
      Var sts = sts_loss(z_i, z_i2, queue, tf1.embed, tau);
      total = group_supervision_loss(ics.total, sts, cfg.alpha);
    } else {
      total = ics.total;  // first batch seeds the queue below
    }

    const double loss_value = double(tape.value(total)[0]);
    res.losses.push_back(loss_value);
    const auto action = monitor.step(loss_value, res.params, {&img_opt, &txt_opt});
    if (action == LossMonitor::Action::Proceed) {
      tape.backward(total);
      auto grads = bind.gradients();
      std::map<std::string, Tensor> img_grads, txt_grads;
      for (auto& [name, g] : grads) {
        if (name.rfind("txt.", 0) == 0)
          txt_grads[name] = std::move(g);
        else
          img_grads[name] = std::move(g);
      }
      img_opt.step(res.params, img_grads, cfg.lr);
      txt_opt.step(res.params, txt_grads, cfg.lr);
    }
    queue.push_rows(tape.value(tf1.embed));
  }
  res.rollbacks = monitor.rollbacks();
  return res;
}

// ------------------------------------------------------------- local phase

namespace {

struct LocalNets {
  nas::ArchSpec arch;
  i64 fpn_ch, proj_dim, c5_ch;

  FpnT<float> fpn(const BackboneT<float>& bb) const {
    FpnT<float> f;
    f.prefix = "fpn";
    f.in_channels = {{"C2", bb.out_channels("C2")},
                     {"C3", bb.out_channels("C3")},
                     {"C4", bb.out_channels("C4")},
                     {"C5", bb.out_channels("C5")}};
    f.out_ch = fpn_ch;
    return f;
  }
  MlpT<float> head() const { return {"alhead", fpn_ch * 7 * 7, 2 * proj_dim, proj_dim}; }
  MlpT<float> projector() const { return {"proj", proj_dim, 2 * proj_dim, proj_dim}; }
  MlpT<float> predictor() const { return {"pred", proj_dim, 2 * proj_dim, proj_dim}; }

  // proposal features -> normalized projector embedding (target path) or
  // predictor embedding (online path)
  Var embed(Binder& b, const FeatureMapSetT<float>& pyr,
            const std::vector<std::vector<Proposal>>& proposals, bool online) const {
    std::vector<Var> parts;
    for (int level = 2; level <= 5; ++level) {
      std::vector<Roi> rois;
      const double stride = double(1 << level);
      for (std::size_t img = 0; img < proposals.size(); ++img)
        for (const auto& p : proposals[img])
          if (p.level == level)
            rois.push_back(Roi{i64(img), p.x1 / stride, p.y1 / stride, p.x2 / stride,
                               p.y2 / stride});
      if (rois.empty()) continue;
      auto feats = roi_align(pyr.at("P" + std::to_string(level)), rois, 7);
      auto flat = reshape(feats, {i64(rois.size()), fpn_ch * 7 * 7});
      parts.push_back(flat);
    }
    PTK_CHECK(!parts.empty(), "local adaptation: no proposals assigned");
    auto h = head()(b, concat_dim0(parts));
    auto z = projector()(b, h);
    if (online) z = predictor()(b, z);
    return l2_normalize_rows(z);
  }
};

}  // namespace

LocalPhaseResult train_local_phase(const nas::ArchSpec& arch, const ParamStore& global_params,
                      const std::vector<harness::MultimodalSample>& corpus,
                      const LocalPhaseConfig& cfg) {
  Rng rng(fnv1a("amateur-local", cfg.seed));
  BackboneT<float> bb{"backbone", 3, nas::arch_to_stages(arch)};

  LocalPhaseResult res;
  // frozen backbone inherited from the global phase
  for (const auto& name : global_params.names())
    if (name.rfind("backbone.", 0) == 0)
      res.params.add(name, global_params.get(name), global_params.trainable(name));

  LocalNets nets{arch, cfg.fpn_channels, cfg.proj_dim, bb.out_channels("C5")};
  nets.fpn(bb).init(res.params, rng);
  nets.head().init(res.params, rng);
  nets.projector().init(res.params, rng);
  nets.predictor().init(res.params, rng);

  // target twin: fpn + head + projector, EMA of the online ones
  for (const auto& name : res.params.names())
    if (name.rfind("backbone.", 0) != 0 && name.rfind("pred.", 0) != 0)
      res.target.add(name, res.params.get(name), res.params.trainable(name));

  OptConfig oc;
  oc.kind = OptKind::AdamW;
  oc.weight_decay = 1e-4;
  Optimizer opt(oc);

  std::vector<Tensor> images;
  for (const auto& s : corpus) images.push_back(s.image);

  for (i64 step = 0; step < cfg.steps; ++step) {
    std::vector<i64> idx;
    for (i64 i = 0; i < cfg.batch; ++i) idx.push_back(rng.uniform_int(i64(images.size())));
    Tensor base = harness::make_batch(images, idx);
    Tensor view1 = augment_images(base, rng);
    Tensor view2 = augment_images(base, rng);

    std::vector<std::vector<Proposal>> proposals;
    for (i64 i = 0; i < cfg.batch; ++i) {
      auto props = gen_proposals(rng, cfg.proposals_per_image, harness::kImageSize);
      assign_proposals(props, rng);
      proposals.push_back(std::move(props));
    }

    Tape tape;
    Binder online(tape, res.params, /*training=*/true);
    online.freeze_prefix("backbone.");
    // Frozen means frozen: the backbone runs in inference mode so that even
    // its batch-norm running statistics stay bit-identical.
    Binder frozen(tape, res.params, /*training=*/false);
    Binder target(tape, res.target, /*training=*/false);

    auto online_pyramid = [&](const Tensor& view) {
      auto fm = bb(frozen, tape.constant(view));
      return nets.fpn(bb)(online, fm);
    };
    auto target_pyramid = [&](const Tensor& view) {
      // the target twin reuses the same frozen backbone features
      auto fm = bb(frozen, tape.constant(view));
      return nets.fpn(bb)(target, fm);
    };

    auto p1o = online_pyramid(view1);
    auto p2o = online_pyramid(view2);
    auto p1t = target_pyramid(view1);
    auto p2t = target_pyramid(view2);

    Var q1 = nets.embed(online, p1o, proposals, /*online=*/true);
    Var q2 = nets.embed(online, p2o, proposals, true);
    Var t1 = nets.embed(target, p1t, proposals, /*online=*/false);
    Var t2 = nets.embed(target, p2t, proposals, false);

    Var loss = mul_scalar(add(byol_consistency(q1, t2), byol_consistency(q2, t1)), 0.5);
    res.losses.push_back(double(tape.value(loss)[0]));
    tape.backward(loss);
    auto grads = online.gradients();
    opt.step(res.params, grads, cfg.lr);
    momentum_update_subset(res.target, res.params, cfg.ema_momentum);
  }
  return res;
}

}  // namespace ptk::amateur
