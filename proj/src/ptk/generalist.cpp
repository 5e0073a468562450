#include "ptk/generalist.hpp"

#include <algorithm>

namespace ptk::generalist {

TransferKind transfer_from_name(const std::string& s) {
  if (s == "non_linear") return TransferKind::NonLinear;
  if (s == "scalable") return TransferKind::Scalable;
  if (s == "channel") return TransferKind::Channel;
  if (s == "attention") return TransferKind::Attention;
  if (s == "policy") return TransferKind::Policy;
  if (s == "gating") return TransferKind::Gating;
  if (s == "nddr") return TransferKind::Nddr;
  PTK_FAIL("unknown transfer module kind: " << s);
}

ConnectionScheme scheme_from_name(const std::string& s) {
  if (s == "hard_sharing") return ConnectionScheme::HardSharing;
  if (s == "same_level") return ConnectionScheme::SameLevel;
  if (s == "low_level") return ConnectionScheme::LowLevel;
  if (s == "high_level") return ConnectionScheme::HighLevel;
  if (s == "cross_level") return ConnectionScheme::CrossLevel;
  PTK_FAIL("unknown connection scheme: " << s);
}

std::string ModuleRef::name() const {
  return "tm.b" + std::to_string(main) + ".from" + std::to_string(aux) + ".C" +
         std::to_string(level);
}

const Branch& Generalist::branch_of(BranchKind kind) const {
  for (const auto& b : branches)
    if (b.kind == kind) return b;
  PTK_FAIL("generalist: no branch of the requested kind");
}

namespace {

BranchKind kind_of_task(expert::TaskType t) {
  switch (t) {
    case expert::TaskType::Classification: return BranchKind::ImageWise;
    case expert::TaskType::Patchwise: return BranchKind::PatchWise;
    case expert::TaskType::Pixelwise: return BranchKind::PixelWise;
  }
  return BranchKind::ImageWise;
}

std::vector<int> aux_levels_for(ConnectionScheme scheme, int level) {
  switch (scheme) {
    case ConnectionScheme::HardSharing:
      return {};
    case ConnectionScheme::SameLevel:
      return {level};
    case ConnectionScheme::LowLevel:
      return level <= 3 ? std::vector<int>{level} : std::vector<int>{};
    case ConnectionScheme::HighLevel:
      return level >= 4 ? std::vector<int>{level} : std::vector<int>{};
    case ConnectionScheme::CrossLevel: {
      std::vector<int> out;
      for (int e = 2; e <= level; ++e) out.push_back(e);
      return out;
    }
  }
  return {};
}

i64 level_channels(const expert::Expert& e, int level) {
  return e.backbone().out_channels("C" + std::to_string(level));
}

i64 module_in_channels(const Generalist& g, const ModuleRef& m) {
  i64 cin = 0;
  for (int e : m.aux_levels) cin += level_channels(g.branches[std::size_t(m.aux)].source, e);
  return cin;
}

void init_module(const Generalist& g, ParamStore& store, Rng& rng, const ModuleRef& m) {
  const i64 cin = module_in_channels(g, m);
  const i64 cmain = level_channels(g.branches[std::size_t(m.main)].source, m.level);
  const std::string p = m.name();
  switch (g.module_kind) {
    case TransferKind::NonLinear:
      Conv2dLayer<float>{p + ".c1", cin, cmain, 1, 1, 0, true}.init(store, rng);
      // zero-initialized output layer: the module starts as the zero map
      store.add(p + ".c2.w", Tensor::zeros({cmain, cmain, 1, 1}));
      store.add(p + ".c2.b", Tensor::zeros({cmain}));
      break;
    case TransferKind::Channel: {
      Conv2dLayer<float>{p + ".c1", cin, cmain, 1, 1, 0, true}.init(store, rng);
      const i64 mid = std::max<i64>(2, cmain / 4);
      LinearLayer<float>{p + ".se1", cmain, mid}.init(store, rng);
      LinearLayer<float>{p + ".se2", mid, cmain}.init(store, rng);
      store.add(p + ".c2.w", Tensor::zeros({cmain, cmain, 1, 1}));
      store.add(p + ".c2.b", Tensor::zeros({cmain}));
      break;
    }
    default:
      PTK_FAIL("transfer module kind not implemented: only non_linear and channel are built");
  }
}

// resize an aux feature map to the spatial size of the target level
Var resize_to(Var x, i64 target_h, i64 target_w) {
  i64 h = x.value().shape[2], w = x.value().shape[3];
  if (h == target_h && w == target_w) return x;
  if (h > target_h) {
    PTK_CHECK(h % target_h == 0, "transfer: non-integer downscale");
    const i64 k = h / target_h;
    return avg_pool2d(x, k, k);
  }
  Var y = x;
  while (h < target_h) {
    y = upsample_nearest2x(y);
    h *= 2;
    w *= 2;
  }
  return y;
}

}  // namespace

Var transfer_forward(const Generalist& g, Binder& b, const ModuleRef& m, Var main_feat,
                     const std::vector<Var>& aux_feats) {
  PTK_CHECK(aux_feats.size() == m.aux_levels.size(), "transfer: aux feature count mismatch");
  const i64 th = main_feat.value().shape[2], tw = main_feat.value().shape[3];
  std::vector<Var> resized;
  for (auto a : aux_feats) resized.push_back(resize_to(detach(a), th, tw));
  Var x = resized.size() == 1 ? resized[0] : concat_channels(resized);
  const std::string p = m.name();
  const i64 cin = module_in_channels(g, m);
  const i64 cmain = main_feat.value().shape[1];
  Var h = relu(Conv2dLayer<float>{p + ".c1", cin, cmain, 1, 1, 0, true}(b, x));
  if (g.module_kind == TransferKind::Channel) {
    const i64 mid = std::max<i64>(2, cmain / 4);
    Var gate = sigmoid(LinearLayer<float>{p + ".se2", mid, cmain}(
        b, relu(LinearLayer<float>{p + ".se1", cmain, mid}(b, global_avg_pool(h)))));
    h = channel_scale(h, gate);
  }
  Var out = add_channel_bias(conv2d(h, b(p + ".c2.w")), b(p + ".c2.b"));
  return add(main_feat, out);
}

Generalist build_generalist(const std::vector<expert::Expert>& experts,
                            ConnectionScheme scheme, TransferKind module_kind, u64 seed) {
  PTK_CHECK(experts.size() >= 2, "build_generalist: need at least two experts");
  Generalist g;
  g.scheme = scheme;
  g.module_kind = module_kind;

  for (std::size_t i = 0; i < experts.size(); ++i) {
    Branch br;
    br.kind = kind_of_task(experts[i].task);
    br.prefix = "br" + std::to_string(i) + ".";
    br.source = experts[i];
    for (const auto& other : g.branches)
      PTK_CHECK(other.kind != br.kind, "build_generalist: duplicate branch kinds");
    g.branches.push_back(std::move(br));
    if (g.branches.back().kind == BranchKind::ImageWise) g.image_branch = int(i);
    if (g.branches.back().kind == BranchKind::PatchWise) g.patch_branch = int(i);
    if (g.branches.back().kind == BranchKind::PixelWise) g.pixel_branch = int(i);
  }
  // all branches must share the stage layout for lockstep fusion
  const auto taps0 = g.branches[0].source.backbone().taps();
  for (const auto& br : g.branches)
    PTK_CHECK(br.source.backbone().taps() == taps0,
              "build_generalist: branch stage layouts differ");

  // copy expert parameters under their branch prefixes (attach time changes
  // nothing in existing branches)
  for (const auto& br : g.branches)
    for (const auto& name : br.source.params.names())
      g.params.add(br.prefix + name, br.source.params.get(name),
                   br.source.params.trainable(name));

  // knowledge-transfer modules
  Rng rng(fnv1a("generalist", seed));
  for (int main = 0; main < int(g.branches.size()); ++main)
    for (int aux = 0; aux < int(g.branches.size()); ++aux) {
      if (main == aux) continue;
      for (int level = 2; level <= 5; ++level) {
        auto aux_levels = aux_levels_for(scheme, level);
        if (aux_levels.empty()) continue;
        ModuleRef m{main, aux, level, aux_levels};
        init_module(g, g.params, rng, m);
        g.modules.push_back(std::move(m));
      }
    }

  // fused C5 layout: branch order defines the channel offsets
  std::vector<i64> c5(g.branches.size());
  i64 c5_total = 0;
  for (std::size_t i = 0; i < g.branches.size(); ++i) {
    c5[i] = level_channels(g.branches[i].source, 5);
    c5_total += c5[i];
  }
  auto offset_of = [&](int branch) {
    i64 off = 0;
    for (int i = 0; i < branch; ++i) off += c5[std::size_t(i)];
    return off;
  };

  // image heads over the fused C5: the expert's weights on its own slice,
  // zeros elsewhere, so logits match the expert exactly at init
  if (g.image_branch >= 0) {
    const auto& src = g.branches[std::size_t(g.image_branch)].source;
    const i64 own_off = offset_of(g.image_branch);
    auto extend_head = [&](const std::string& from, const std::string& to, i64 classes) {
      Tensor w = Tensor::zeros({c5_total, classes});
      const Tensor& src_w = src.params.get(from + ".fc.w");
      for (i64 r = 0; r < src_w.shape[0]; ++r)
        for (i64 c = 0; c < classes; ++c) w.at2(own_off + r, c) = src_w.at2(r, c);
      g.params.add(to + ".fc.w", w);
      g.params.add(to + ".fc.b", src.params.get(from + ".fc.b"));
    };
    if (src.mapping.scheme == expert::MergeScheme::Natural) {
      for (const auto& ds : src.datasets)
        extend_head("head." + ds.id, "uni.imghead." + ds.id, i64(ds.label_names.size()));
    } else {
      extend_head("head.global", "uni.imghead.global", src.mapping.global_size);
    }
  }

  // unified pyramid: the P5 lateral consumes the fused C5 (zero-extended
  // weights); everything else copies from the patch expert
  if (g.patch_branch >= 0) {
    const auto& src = g.branches[std::size_t(g.patch_branch)].source;
    const i64 own_off = offset_of(g.patch_branch);
    for (const auto& name : src.params.names()) {
      if (name.rfind("fpn.", 0) != 0) continue;
      if (name == "fpn.latC5.w") {
        const Tensor& sw = src.params.get(name);
        Tensor w = Tensor::zeros({sw.shape[0], c5_total, 1, 1});
        for (i64 o = 0; o < sw.shape[0]; ++o)
          for (i64 ci = 0; ci < sw.shape[1]; ++ci) w.at4(o, own_off + ci, 0, 0) = sw.at4(o, ci, 0, 0);
        g.params.add("uni." + name, w);
      } else {
        g.params.add("uni." + name, src.params.get(name), src.params.trainable(name));
      }
    }
    for (const auto& ds : src.datasets)
      for (const auto& name : src.params.names_with_prefix("head." + ds.id + "."))
        g.params.add("uni.patchhead." + name.substr(5), src.params.get(name));
  }

  // pixel head: same input (its branch's C2), weights copied
  if (g.pixel_branch >= 0) {
    const auto& src = g.branches[std::size_t(g.pixel_branch)].source;
    for (const auto& ds : src.datasets)
      for (const auto& name : src.params.names_with_prefix("head." + ds.id + "."))
        g.params.add("uni.pixhead." + name.substr(5), src.params.get(name));
  }
  return g;
}

std::vector<FeatureMapSetT<float>> forward_branches(
    const Generalist& g, Binder& b, Var images,
    std::map<std::string, ModuleResponse>* responses) {
  const std::size_t nb = g.branches.size();
  std::vector<FeatureMapSetT<float>> features(nb);
  std::vector<Var> carry(nb, images);

  const auto taps = g.branches[0].source.backbone().taps();
  std::vector<std::vector<StageLayer<float>>> layers;
  for (const auto& br : g.branches) {
    BackboneT<float> bb{br.prefix + "backbone", 3, nas::arch_to_stages(br.source.arch)};
    layers.push_back(bb.layers());
  }

  const std::size_t stages = layers[0].size();
  for (std::size_t s = 0; s < stages; ++s) {
    std::vector<Var> raw(nb);
    for (std::size_t k = 0; k < nb; ++k) raw[k] = layers[k][s](b, carry[k]);
    auto tap = taps.find(s);
    if (tap == taps.end()) {
      carry = raw;
      continue;
    }
    const int level = tap->second[1] - '0';
    for (std::size_t k = 0; k < nb; ++k) {
      Var fused = raw[k];
      for (const auto& m : g.modules) {
        if (m.main != int(k) || m.level != level) continue;
        std::vector<Var> aux_feats;
        for (int e : m.aux_levels) {
          if (e == level)
            aux_feats.push_back(raw[std::size_t(m.aux)]);
          else
            aux_feats.push_back(features[std::size_t(m.aux)].at("C" + std::to_string(e)));
        }
        Var before = fused;
        fused = transfer_forward(g, b, m, fused, aux_feats);
        if (responses) (*responses)[m.name()] = ModuleResponse{sub(fused, before), raw[k]};
      }
      features[k].set(tap->second, fused);
      carry[k] = fused;
    }
  }
  return features;
}

Var unified_image_repr(const Generalist& g, const std::vector<FeatureMapSetT<float>>& feats,
                       int main_branch) {
  std::vector<Var> parts;
  for (std::size_t k = 0; k < g.branches.size(); ++k) {
    Var c5 = feats[k].at("C5");
    if (main_branch >= 0 && int(k) != main_branch) c5 = detach(c5);
    parts.push_back(c5);
  }
  return parts.size() == 1 ? parts[0] : concat_channels(parts);
}

FeatureMapSetT<float> unified_patch_repr(const Generalist& g, Binder& b,
                                         const std::vector<FeatureMapSetT<float>>& feats,
                                         bool detach_foreign) {
  PTK_CHECK(g.patch_branch >= 0, "unified_patch_repr: no patch branch");
  const auto& patch = g.branches[std::size_t(g.patch_branch)];
  Var fused_c5 = unified_image_repr(g, feats, detach_foreign ? g.patch_branch : -1);

  auto bb = patch.source.backbone();
  i64 c5_total = 0;
  for (const auto& br : g.branches) c5_total += level_channels(br.source, 5);
  FpnT<float> fpn;
  fpn.prefix = "uni.fpn";
  fpn.in_channels = {{"C2", bb.out_channels("C2")},
                     {"C3", bb.out_channels("C3")},
                     {"C4", bb.out_channels("C4")},
                     {"C5", c5_total}};
  fpn.out_ch = patch.source.fpn_channels;
  fpn.p6_in = bb.out_channels("C5");  // P6 comes from the patch branch C5 alone

  FeatureMapSetT<float> c = feats[std::size_t(g.patch_branch)];
  return fpn(b, c, fused_c5, feats[std::size_t(g.patch_branch)].at("C5"));
}

FeatureMapSetT<float> unified_pixel_repr(const Generalist& g,
                                         const std::vector<FeatureMapSetT<float>>& feats) {
  const int dense = g.pixel_branch >= 0 ? g.pixel_branch : g.patch_branch;
  PTK_CHECK(dense >= 0, "unified_pixel_repr: need a pixel or patch branch");
  FeatureMapSetT<float> out;
  for (const char* lvl : {"C2", "C3", "C4"}) out.set(lvl, feats[std::size_t(dense)].at(lvl));
  out.set("C5", unified_image_repr(g, feats, dense));
  return out;
}

Var image_logits(const Generalist& g, Binder& b, const std::vector<FeatureMapSetT<float>>& feats,
                 const std::string& dataset) {
  PTK_CHECK(g.image_branch >= 0, "image_logits: no image branch");
  const auto& src = g.branches[std::size_t(g.image_branch)].source;
  Var fused = unified_image_repr(g, feats, g.image_branch);
  Var pooled = global_avg_pool(fused);
  const i64 cin = fused.value().shape[1];
  if (src.mapping.scheme == expert::MergeScheme::Natural) {
    for (const auto& ds : src.datasets)
      if (ds.id == dataset)
        return linear(pooled, b("uni.imghead." + dataset + ".fc.w"),
                      b("uni.imghead." + dataset + ".fc.b"));
    PTK_FAIL("image_logits: unknown dataset " << dataset);
  }
  (void)cin;
  Var global = linear(pooled, b("uni.imghead.global.fc.w"), b("uni.imghead.global.fc.b"));
  if (src.mapping.scheme == expert::MergeScheme::Unified) return global;
  const auto& ids = src.mapping.per_dataset.at(dataset);
  return transpose(gather_rows(transpose(global), ids));
}

// ------------------------------------------------------------------ training

GeneralistStepState::GeneralistStepState(double lr, i64 total_steps, i64 warmup)
    : image_opt([] {
        OptConfig c;
        c.kind = OptKind::AdamW;
        c.weight_decay = 1e-8;
        return c;
      }()),
      patch_opt([] {
        OptConfig c;
        c.kind = OptKind::AdamW;
        c.weight_decay = 1e-8;
        return c;
      }()),
      pixel_opt([] {
        OptConfig c;
        c.kind = OptKind::AdamW;
        c.weight_decay = 1e-8;
        return c;
      }()) {
  image_sched = {LrKind::Cosine, lr, 0.0, total_steps, warmup};
  patch_sched = {LrKind::Multistep, lr, 0.0, total_steps, warmup};
  pixel_sched = {LrKind::Polynomial, lr, 0.0, total_steps, warmup};
}

std::map<std::string, double> generalist_step(Generalist& g, const TaskGroups& groups,
                                              GeneralistStepState& state, Rng& rng) {
  std::map<std::string, double> losses;
  Tape tape;
  Binder bind(tape, g.params, /*training=*/true);

  std::vector<Var> parts;
  auto add_part = [&](Var v) { parts.push_back(v); };

  for (const auto& grp : groups.image) {
    PTK_CHECK(g.image_branch >= 0, "generalist_step: image group without an image branch");
    auto feats = forward_branches(g, bind, tape.constant(grp.images));
    const auto& src = g.branches[std::size_t(g.image_branch)].source;
    std::vector<i64> labels = grp.labels;
    if (src.mapping.scheme == expert::MergeScheme::Unified) {
      const auto& map = src.mapping.per_dataset.at(grp.dataset);
      for (auto& l : labels) l = map.at(std::size_t(l));
    }
    Var loss = cross_entropy(image_logits(g, bind, feats, grp.dataset), labels);
    losses["image/" + grp.dataset] = double(tape.value(loss)[0]);
    add_part(loss);
  }
  for (const auto& grp : groups.patch) {
    PTK_CHECK(g.patch_branch >= 0, "generalist_step: patch group without a patch branch");
    auto feats = forward_branches(g, bind, tape.constant(grp.images));
    auto pyramid = unified_patch_repr(g, bind, feats, /*detach_foreign=*/true);
    const auto& src = g.branches[std::size_t(g.patch_branch)].source;
    Var loss = expert::patch_group_loss(bind, pyramid, grp, "uni.patchhead." + grp.dataset,
                                        src.fpn_channels,
                                        i64(src.datasets[0].label_names.size()) + 1, rng);
    losses["patch/" + grp.dataset] = double(tape.value(loss)[0]);
    add_part(loss);
  }
  for (const auto& grp : groups.pixel) {
    const int dense = g.pixel_branch >= 0 ? g.pixel_branch : g.patch_branch;
    PTK_CHECK(dense >= 0, "generalist_step: pixel group without a dense branch");
    auto feats = forward_branches(g, bind, tape.constant(grp.images));
    auto repr = unified_pixel_repr(g, feats);
    const auto& src = g.branches[std::size_t(dense)].source;
    Var loss = expert::pixel_group_loss(bind, repr.at("C2"), grp, "uni.pixhead." + grp.dataset,
                                        repr.at("C2").value().shape[1],
                                        i64(src.datasets[0].label_names.size()));
    losses["pixel/" + grp.dataset] = double(tape.value(loss)[0]);
    add_part(loss);
  }
  PTK_CHECK(!parts.empty(), "generalist_step: no routable groups");

  Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  tape.backward(total);
  auto grads = bind.gradients();

  // route gradients to the per-branch optimizers with per-branch schedules
  auto branch_kind_of = [&](const std::string& name) -> BranchKind {
    if (name.rfind("tm.b", 0) == 0) {
      const int main = name[4] - '0';
      return g.branches[std::size_t(main)].kind;
    }
    if (name.rfind("uni.imghead", 0) == 0) return BranchKind::ImageWise;
    if (name.rfind("uni.fpn", 0) == 0 || name.rfind("uni.patchhead", 0) == 0)
      return BranchKind::PatchWise;
    if (name.rfind("uni.pixhead", 0) == 0) return BranchKind::PixelWise;
    for (std::size_t k = 0; k < g.branches.size(); ++k)
      if (name.rfind(g.branches[k].prefix, 0) == 0) return g.branches[k].kind;
    PTK_FAIL("generalist_step: cannot route parameter " << name);
  };
  std::map<std::string, Tensor> img_g, pat_g, pix_g;
  for (auto& [name, grad] : grads) {
    switch (branch_kind_of(name)) {
      case BranchKind::ImageWise: img_g[name] = std::move(grad); break;
      case BranchKind::PatchWise: pat_g[name] = std::move(grad); break;
      case BranchKind::PixelWise: pix_g[name] = std::move(grad); break;
    }
  }
  if (!img_g.empty()) {
    const double lr = lr_at(state.image_sched, state.step);
    if (lr > 0) state.image_opt.step(g.params, img_g, lr);
  }
  if (!pat_g.empty()) {
    const double lr = lr_at(state.patch_sched, state.step);
    if (lr > 0) state.patch_opt.step(g.params, pat_g, lr);
  }
  if (!pix_g.empty()) {
    const double lr = lr_at(state.pixel_sched, state.step);
    if (lr > 0) state.pixel_opt.step(g.params, pix_g, lr);
  }
  ++state.step;
  return losses;
}

Generalist train_generalist(const std::vector<expert::Expert>& experts,
                            const harness::TaskSuite& suite, const TrainConfig& cfg,
                            ConnectionScheme scheme, TransferKind module_kind) {
  Generalist g = build_generalist(experts, scheme, module_kind, cfg.seed);
  const i64 warmup = cfg.warmup >= 0 ? cfg.warmup : std::max<i64>(10, i64(0.02 * double(cfg.steps)));
  GeneralistStepState state(cfg.lr, cfg.steps, warmup);
  Rng rng(fnv1a("generalist-train", cfg.seed));

  auto cls_dataset = [&](const std::string& id) -> const harness::ClsDataset* {
    for (const auto* d : {&suite.cls16, &suite.cls_shape, &suite.cls_color})
      if (d->id == id) return d;
    PTK_FAIL("train_generalist: unknown classification dataset " << id);
  };

  for (i64 step = 0; step < cfg.steps; ++step) {
    TaskGroups groups;
    if (g.image_branch >= 0) {
      for (const auto& ds : g.branches[std::size_t(g.image_branch)].source.datasets) {
        const auto* d = cls_dataset(ds.id);
        expert::Group grp;
        grp.dataset = ds.id;
        std::vector<i64> pick;
        for (i64 i = 0; i < cfg.batch_per_task; ++i) {
          const i64 idx = d->train_idx[std::size_t(rng.uniform_int(i64(d->train_idx.size())))];
          pick.push_back(idx);
          grp.labels.push_back(d->labels[std::size_t(idx)]);
        }
        grp.images = harness::make_batch(d->images, pick);
        groups.image.push_back(std::move(grp));
      }
    }
    if (g.patch_branch >= 0) {
      expert::Group grp;
      grp.dataset = suite.det.id;
      std::vector<i64> pick;
      for (i64 i = 0; i < cfg.batch_per_task; ++i) {
        const i64 idx =
            suite.det.train_idx[std::size_t(rng.uniform_int(i64(suite.det.train_idx.size())))];
        pick.push_back(idx);
        grp.boxes.push_back(suite.det.boxes[std::size_t(idx)]);
      }
      grp.images = harness::make_batch(suite.det.images, pick);
      groups.patch.push_back(std::move(grp));
    }
    if (g.pixel_branch >= 0) {
      expert::Group grp;
      grp.dataset = suite.seg.id;
      std::vector<i64> pick;
      for (i64 i = 0; i < cfg.batch_per_task; ++i)
        pick.push_back(
            suite.seg.train_idx[std::size_t(rng.uniform_int(i64(suite.seg.train_idx.size())))]);
      grp.images = harness::make_batch(suite.seg.images, pick);
      Tensor maps({i64(pick.size()), 1, harness::kImageSize, harness::kImageSize});
      for (std::size_t i = 0; i < pick.size(); ++i) {
        const auto& m = suite.seg.maps[std::size_t(pick[i])];
        std::copy(m.data.begin(), m.data.end(), maps.data.begin() + i64(i) * m.numel());
      }
      grp.dense_map = maps;
      groups.pixel.push_back(std::move(grp));
    }
    generalist_step(g, groups, state, rng);
  }
  return g;
}

std::map<std::string, ResponseHistogram> response_stats(const Generalist& g,
                                                        const std::vector<Tensor>& probe_batches,
                                                        int bins) {
  PTK_CHECK(bins > 0, "response_stats: bins must be positive");
  std::map<std::string, std::vector<double>> ratios;
  for (const auto& batch : probe_batches) {
    Tape tape;
    Binder bind(tape, const_cast<ParamStore&>(g.params), /*training=*/false);
    std::map<std::string, ModuleResponse> responses;
    forward_branches(g, bind, tape.constant(batch), &responses);
    for (const auto& [name, resp] : responses) {
      const auto& out = tape.value(resp.output);
      const auto& main = tape.value(resp.main_feature);
      const i64 n = out.shape[0], c = out.shape[1], hw = out.shape[2] * out.shape[3];
      for (i64 b = 0; b < n; ++b)
        for (i64 p = 0; p < hw; ++p) {
          double so = 0, sm = 0;
          for (i64 ch = 0; ch < c; ++ch) {
            const double vo = out.data[std::size_t((b * c + ch) * hw + p)];
            const double vm = main.data[std::size_t((b * c + ch) * hw + p)];
            so += vo * vo;
            sm += vm * vm;
          }
          ratios[name].push_back(std::sqrt(so) / (std::sqrt(sm) + 1e-8));
        }
    }
  }
  std::map<std::string, ResponseHistogram> out;
  for (const auto& [name, rs] : ratios) {
    ResponseHistogram h;
    double mx = 0, mean = 0;
    for (double r : rs) {
      mx = std::max(mx, r);
      mean += r;
    }
    h.mean_ratio = rs.empty() ? 0 : mean / double(rs.size());
    const double top = mx > 0 ? mx * (1 + 1e-9) : 1.0;
    h.bin_edges.resize(std::size_t(bins) + 1);
    for (int i = 0; i <= bins; ++i) h.bin_edges[std::size_t(i)] = top * double(i) / bins;
    h.mass.assign(std::size_t(bins), 0.0);
    for (double r : rs) {
      int idx = std::min(bins - 1, int(r / top * bins));
      h.mass[std::size_t(idx)] += 1.0 / double(rs.size());
    }
    out[name] = std::move(h);
  }
  return out;
}

}  // namespace ptk::generalist
