#include "ptk/adapt.hpp"

#include <algorithm>

namespace ptk::adapt {

// ------------------------------------------------------------- re-representer

void Codebook::init(Rng& rng) {
  Conv2dLayer<float>{"enc.c1", 3, cfg.hidden, 3, 2, 1, true}.init(params, rng);
  Conv2dLayer<float>{"enc.c2", cfg.hidden, cfg.code_dim, 3, 2, 1, true}.init(params, rng);
  Conv2dLayer<float>{"dec.c1", cfg.code_dim, cfg.hidden, 3, 1, 1, true}.init(params, rng);
  Conv2dLayer<float>{"dec.c2", cfg.hidden, cfg.hidden, 3, 1, 1, true}.init(params, rng);
  Conv2dLayer<float>{"dec.c3", cfg.hidden, 3, 3, 1, 1, true}.init(params, rng);
  params.add("codes", Tensor::randn({cfg.codes, cfg.code_dim}, rng, 0.5));
}

Var Codebook::encode(Binder& b, Var images) const {
  Var h = relu(Conv2dLayer<float>{"enc.c1", 3, cfg.hidden, 3, 2, 1, true}(b, images));
  return Conv2dLayer<float>{"enc.c2", cfg.hidden, cfg.code_dim, 3, 2, 1, true}(b, h);
}

Var Codebook::decode(Binder& b, Var z) const {
  Var h = relu(Conv2dLayer<float>{"dec.c1", cfg.code_dim, cfg.hidden, 3, 1, 1, true}(b, z));
  h = upsample_nearest2x(h);
  h = relu(Conv2dLayer<float>{"dec.c2", cfg.hidden, cfg.hidden, 3, 1, 1, true}(b, h));
  h = upsample_nearest2x(h);
  return Conv2dLayer<float>{"dec.c3", cfg.hidden, 3, 3, 1, 1, true}(b, h);
}

std::vector<i64> Codebook::nearest_codes(const Tensor& latents_rows) const {
  PTK_CHECK(latents_rows.rank() == 2 && latents_rows.shape[1] == cfg.code_dim,
            "nearest_codes: want [M,d] latents");
  const Tensor& codes = params.get("codes");
  std::vector<i64> out;
  out.reserve(std::size_t(latents_rows.shape[0]));
  for (i64 m = 0; m < latents_rows.shape[0]; ++m) {
    i64 best = 0;
    double best_d = 1e300;
    for (i64 k = 0; k < cfg.codes; ++k) {
      double d = 0;
      for (i64 j = 0; j < cfg.code_dim; ++j) {
        const double diff = double(latents_rows.at2(m, j)) - double(codes.at2(k, j));
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out.push_back(best);
  }
  return out;
}

namespace {

// latent grid -> rows [N*h*w, d]
Var latent_rows(Var z) {
  const auto& s = z.value().shape;
  return reshape(nchw_to_ntc(z), {s[0] * s[2] * s[3], s[1]});
}

Var rows_to_latent(Var rows, const std::vector<i64>& grid_shape) {
  return ntc_to_nchw(reshape(rows, {grid_shape[0], grid_shape[2] * grid_shape[3], grid_shape[1]}),
                     grid_shape[2], grid_shape[3]);
}

}  // namespace

RerepresenterResult train_rerepresenter(const std::vector<Tensor>& images,
                                        const RerepresenterConfig& cfg) {
  PTK_CHECK(i64(images.size()) >= cfg.codebook.codes || images.size() >= 2,
            "train_rerepresenter: need training patches");
  RerepresenterResult res;
  res.codebook.cfg = cfg.codebook;
  Rng rng(fnv1a("rerepresenter", cfg.seed));
  res.codebook.init(rng);

  // seed the codes from actual encoder latents; a random init far from the
  // latent distribution collapses onto one code
  {
    Tape tape;
    Binder bind(tape, res.codebook.params, false);
    std::vector<i64> pick;
    for (i64 i = 0; i < std::min<i64>(8, i64(images.size())); ++i)
      pick.push_back(rng.uniform_int(i64(images.size())));
    Var z = res.codebook.encode(bind, tape.constant(harness::make_batch(images, pick)));
    const Tensor rows = tape.value(latent_rows(z));
    Tensor& codes = res.codebook.params.get("codes");
    for (i64 k = 0; k < cfg.codebook.codes; ++k) {
      const i64 src = rng.uniform_int(rows.shape[0]);
      for (i64 j = 0; j < cfg.codebook.code_dim; ++j)
        codes.at2(k, j) = rows.at2(src, j) + float(rng.normal(0.0, 0.01));
    }
  }

  OptConfig oc;
  oc.kind = OptKind::AdamW;
  oc.weight_decay = 0;
  Optimizer opt(oc);

  for (i64 step = 0; step < cfg.steps; ++step) {
    std::vector<i64> pick;
    for (i64 i = 0; i < cfg.batch; ++i) pick.push_back(rng.uniform_int(i64(images.size())));
    Tensor batch = harness::make_batch(images, pick);

    Tape tape;
    Binder bind(tape, res.codebook.params, /*training=*/true);
    Var x = tape.constant(batch);
    Var z_e = res.codebook.encode(bind, x);
    const auto grid_shape = z_e.value().shape;
    Var flat_e = latent_rows(z_e);
    const auto idx = res.codebook.nearest_codes(tape.value(flat_e));
    Var z_q = gather_rows(bind("codes"), idx);
    // straight-through: decode sees the quantized values, the encoder the grads
    Var z_st = add(flat_e, detach(sub(z_q, flat_e)));
    Var recon = res.codebook.decode(bind, rows_to_latent(z_st, grid_shape));
    Var recon_loss = mse_loss(recon, x);
    Var codebook_loss = mse_loss(z_q, detach(flat_e));
    Var commit_loss = mse_loss(flat_e, detach(z_q));
    Var total = add(recon_loss, add(codebook_loss, mul_scalar(commit_loss, cfg.codebook.beta)));

    res.losses.push_back(double(tape.value(total)[0]));
    res.recon_losses.push_back(double(tape.value(recon_loss)[0]));
    tape.backward(total);
    auto grads = bind.gradients();
    opt.step(res.codebook.params, grads, cfg.lr);
  }

  // dead-code sweep over the corpus
  std::vector<bool> used(std::size_t(cfg.codebook.codes), false);
  {
    Tape tape;
    Binder bind(tape, res.codebook.params, false);
    for (std::size_t i = 0; i < images.size(); ++i) {
      Var z = res.codebook.encode(bind, tape.constant(harness::make_batch(images, {i64(i)})));
      for (i64 k : res.codebook.nearest_codes(tape.value(latent_rows(z)))) used[std::size_t(k)] = true;
    }
  }
  for (bool u : used)
    if (!u) ++res.dead_codes;
  res.dead_code_warning = res.dead_codes > 0;
  return res;
}

Tensor rerepresent(const Tensor& images, const Codebook& codebook) {
  Tape tape;
  // the codebook is fixed here; an inference binder cannot touch it
  Binder bind(tape, const_cast<ParamStore&>(codebook.params), /*training=*/false);
  Var z = codebook.encode(bind, tape.constant(images));
  const auto grid_shape = z.value().shape;
  Var flat = latent_rows(z);
  const auto idx = codebook.nearest_codes(tape.value(flat));
  Var z_q = gather_rows(bind("codes"), idx);
  Var out = codebook.decode(bind, rows_to_latent(z_q, grid_shape));
  return tape.value(out);
}

std::vector<Tensor> rerepresent(const std::vector<Tensor>& images, const Codebook& codebook) {
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    Tensor batch({1, img.shape[0], img.shape[1], img.shape[2]}, img.data);
    Tensor rec = rerepresent(batch, codebook);
    out.push_back(rec.reshaped({img.shape[0], img.shape[1], img.shape[2]}));
  }
  return out;
}

// ---------------------------------------------------------------- fine-tuning

std::vector<double> log_spaced(double lo, double hi, i64 count) {
  PTK_CHECK(count >= 2 && lo > 0 && hi > lo, "log_spaced: bad range");
  std::vector<double> out;
  for (i64 i = 0; i < count; ++i)
    out.push_back(std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * double(i) /
                                              double(count - 1)));
  return out;
}

namespace {

struct ClsModel {
  nas::ArchSpec arch;
  i64 classes;

  BackboneT<float> backbone() const { return {"backbone", 3, nas::arch_to_stages(arch)}; }

  Var logits(Binder& b, Var images) const {
    auto fm = backbone()(b, images);
    return ClassifierHeadT<float>{"head", backbone().out_channels("C5"), classes}(b,
                                                                                  fm.at("C5"));
  }
};

double accuracy_of(const ClsModel& model, ParamStore& params,
                   const harness::ClsDataset& data, const std::vector<i64>& idx) {
  if (idx.empty()) return 0;
  i64 correct = 0;
  const i64 chunk = 16;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    std::vector<i64> pick(idx.begin() + i64(start),
                          idx.begin() + i64(std::min(idx.size(), start + chunk)));
    Tape tape;
    Binder bind(tape, params, /*training=*/false);
    Var logits = model.logits(bind, tape.constant(harness::make_batch(data.images, pick)));
    const auto& lv = tape.value(logits);
    for (i64 r = 0; r < lv.shape[0]; ++r) {
      i64 best = 0;
      for (i64 c = 1; c < lv.shape[1]; ++c)
        if (lv.at2(r, c) > lv.at2(r, best)) best = c;
      if (best == data.labels[std::size_t(pick[std::size_t(r)])]) ++correct;
    }
  }
  return double(correct) / double(idx.size());
}

// image-granularity embedding for the contrastive arm: unit-normalized GAP(C5)
Var image_embedding(const ClsModel& model, Binder& b, Var images) {
  auto fm = model.backbone()(b, images);
  return l2_normalize_rows(global_avg_pool(fm.at("C5")));
}

Tensor jitter_images(const Tensor& batch, Rng& rng) {
  Tensor out = batch;
  const i64 n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
  for (i64 b = 0; b < n; ++b) {
    const bool flip = rng.uniform() < 0.5;
    const float bright = float(rng.uniform(-0.05, 0.05));
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x)
          out.at4(b, ch, y, x) = batch.at4(b, ch, y, flip ? w - 1 - x : x) + bright;
  }
  return out;
}

struct FinetuneOutcome {
  ParamStore params;
  double val_accuracy = 0;
};

FinetuneOutcome finetune_cells_worker(const ClsModel& model, const ParamStore& start,
                                      const harness::ClsDataset& data,
                                      const std::vector<i64>& train_idx,
                                      const std::vector<i64>& val_idx, double lr, double wd,
                                      i64 steps, i64 batch, bool contrastive,
                                      double contrastive_weight, i64 history_capacity,
                                      u64 seed) {
  FinetuneOutcome out;
  out.params = start.clone();
  OptConfig oc;
  oc.kind = OptKind::SgdNesterov;
  oc.momentum = 0.9;
  oc.weight_decay = wd;
  Optimizer opt(oc);
  Rng rng(fnv1a("stage4-cell", seed));
  LrSchedule sched{LrKind::Multistep, lr, 0.0, steps, 0};

  SampleContrastiveState scs;
  scs.capacity = history_capacity;
  if (contrastive) {
    scs.momentum = out.params.clone();
  }

  for (i64 step = 0; step < steps; ++step) {
    std::vector<i64> pick;
    std::vector<i64> labels;
    for (i64 i = 0; i < batch; ++i) {
      const i64 idx = train_idx[std::size_t(rng.uniform_int(i64(train_idx.size())))];
      pick.push_back(idx);
      labels.push_back(data.labels[std::size_t(idx)]);
    }
    Tensor images = harness::make_batch(data.images, pick);

    Tape tape;
    Binder bind(tape, out.params, /*training=*/true);
    Var loss = cross_entropy(model.logits(bind, tape.constant(images)), labels);

    if (contrastive) {
      Tensor aug_q = jitter_images(images, rng);
      Tensor aug_k = jitter_images(images, rng);
      Var f_q = image_embedding(model, bind, tape.constant(aug_q));
      Binder mbind(tape, scs.momentum, /*training=*/false);
      Var f_k = image_embedding(model, mbind, tape.constant(aug_k));
      Var reg = sample_contrastive_loss(f_q, f_k, scs.history_vec(), scs.tau);
      loss = add(loss, mul_scalar(reg, contrastive_weight));
      scs.push_history(tape.value(f_k));
    }

    tape.backward(loss);
    auto grads = bind.gradients();
    opt.step(out.params, grads, lr_at(sched, step));
    if (contrastive) momentum_update_subset(scs.momentum, out.params, scs.ema);
  }
  out.val_accuracy = accuracy_of(model, out.params, data, val_idx);
  return out;
}

}  // namespace

Stage3Result mf_stage3(const nas::ArchSpec& arch, const ParamStore& pretrained,
                       const std::vector<Tensor>& images, const std::vector<i64>& labels,
                       i64 classes, const MfConfig& cfg) {
  PTK_CHECK(images.size() == labels.size() && !images.empty(), "mf_stage3: bad inputs");
  ClsModel model{arch, classes};
  Stage3Result res;
  Rng rng(fnv1a("stage3", cfg.seed));

  // the pretrained trunk, bit-identical throughout; a fresh head
  for (const auto& name : pretrained.names())
    if (name.rfind("backbone.", 0) == 0)
      res.model.add(name, pretrained.get(name), pretrained.trainable(name));
  const i64 c5 = model.backbone().out_channels("C5");
  ClassifierHeadT<float>{"head", c5, classes}.init(res.model, rng);

  // lr sampled log-uniformly from the configured range; logged for replay
  res.sampled_lr = std::exp(rng.uniform(std::log(cfg.stage3_lr_min), std::log(cfg.stage3_lr_max)));

  // frozen backbone: extract features once, then train the head on them
  std::vector<Tensor> feats(images.size());
  {
    const i64 chunk = 16;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
      std::vector<i64> pick;
      for (std::size_t i = start; i < std::min(images.size(), start + chunk); ++i)
        pick.push_back(i64(i));
      Tape tape;
      Binder bind(tape, res.model, /*training=*/false);
      auto fm = model.backbone()(bind, tape.constant(harness::make_batch(images, pick)));
      const Tensor pooled = tape.value(global_avg_pool(fm.at("C5")));
      for (std::size_t r = 0; r < pick.size(); ++r) {
        Tensor row({pooled.shape[1]});
        for (i64 j = 0; j < pooled.shape[1]; ++j) row[j] = pooled.at2(i64(r), j);
        feats[start + r] = std::move(row);
      }
    }
  }

  OptConfig oc;
  oc.kind = OptKind::SgdNesterov;
  oc.momentum = 0.9;
  oc.weight_decay = cfg.stage3_weight_decay;
  Optimizer opt(oc);
  LrSchedule sched{LrKind::Multistep, res.sampled_lr, 0.0, cfg.stage3_steps, 0};

  for (i64 step = 0; step < cfg.stage3_steps; ++step) {
    std::vector<i64> labels_batch;
    Tensor fb({cfg.stage3_batch, c5});
    for (i64 i = 0; i < cfg.stage3_batch; ++i) {
      const i64 idx = rng.uniform_int(i64(images.size()));
      labels_batch.push_back(labels[std::size_t(idx)]);
      for (i64 j = 0; j < c5; ++j) fb.at2(i, j) = feats[std::size_t(idx)][j];
    }
    Tape tape;
    Binder bind(tape, res.model, /*training=*/true);
    Var logits = LinearLayer<float>{"head.fc", c5, classes}(bind, tape.constant(fb));
    Var loss = cross_entropy(logits, labels_batch);
    res.train_loss = double(tape.value(loss)[0]);
    tape.backward(loss);
    auto grads = bind.gradients();
    opt.step(res.model, grads, lr_at(sched, step));
  }
  return res;
}

MfResult mf_stage4(const nas::ArchSpec& arch, const ParamStore& stage3_model,
                   const harness::ClsDataset& data, const std::vector<i64>& train_idx,
                   const std::vector<i64>& val_idx, const MfConfig& cfg) {
  PTK_CHECK(!val_idx.empty(), "mf_stage4: empty validation split");
  ClsModel model{arch, data.classes};
  const auto lrs = log_spaced(cfg.stage4_lr_min, cfg.stage4_lr_max, cfg.stage4_lr_grid);
  const auto wds = log_spaced(cfg.stage4_wd_min, cfg.stage4_wd_max, cfg.stage4_wd_grid);

  MfResult res;
  bool have_best = false;
  FinetuneOutcome best;
  // grid order: lr ascending then wd ascending; strict improvement keeps the
  // earliest (smallest) hyperparameters on ties
  for (std::size_t li = 0; li < lrs.size(); ++li)
    for (std::size_t wi = 0; wi < wds.size(); ++wi) {
      auto outcome = finetune_cells_worker(
          model, stage3_model, data, train_idx, val_idx, lrs[li], wds[wi], cfg.stage4_steps,
          cfg.stage4_batch, cfg.contrastive, cfg.contrastive_weight, cfg.history_capacity,
          fnv1a("cell", cfg.seed + li * 100 + wi));
      res.log.push_back(GridEntry{lrs[li], wds[wi], outcome.val_accuracy});
      if (!have_best || outcome.val_accuracy > best.val_accuracy) {
        best = std::move(outcome);
        res.chosen_lr = lrs[li];
        res.chosen_wd = wds[wi];
        have_best = true;
      }
    }
  res.model = std::move(best.params);
  res.val_accuracy = best.val_accuracy;
  return res;
}

MfResult multi_stage_finetune(const nas::ArchSpec& arch, const ParamStore& pretrained,
                              const Codebook& codebook, const harness::ClsDataset& data,
                              const std::vector<i64>& train_idx,
                              const std::vector<i64>& val_idx, const MfConfig& cfg) {
  // stage 2: re-represent the training split through the frozen codebook
  std::vector<Tensor> rec_images;
  std::vector<i64> rec_labels;
  for (i64 idx : train_idx) {
    rec_images.push_back(data.images[std::size_t(idx)]);
    rec_labels.push_back(data.labels[std::size_t(idx)]);
  }
  rec_images = rerepresent(rec_images, codebook);
  // stage 3: head-only on re-represented data
  Stage3Result s3 = mf_stage3(arch, pretrained, rec_images, rec_labels, data.classes, cfg);
  // stage 4: full fine-tune on the originals
  return mf_stage4(arch, s3.model, data, train_idx, val_idx, cfg);
}

PlainFtResult plain_finetune(const nas::ArchSpec& arch, const ParamStore& pretrained,
                             const harness::ClsDataset& data,
                             const std::vector<i64>& train_idx,
                             const std::vector<i64>& val_idx, const MfConfig& cfg, double lr,
                             double wd) {
  ClsModel model{arch, data.classes};
  ParamStore start;
  for (const auto& name : pretrained.names())
    if (name.rfind("backbone.", 0) == 0)
      start.add(name, pretrained.get(name), pretrained.trainable(name));
  Rng rng(fnv1a("plain-ft", cfg.seed));
  ClassifierHeadT<float>{"head", model.backbone().out_channels("C5"), data.classes}.init(start,
                                                                                         rng);
  auto outcome = finetune_cells_worker(model, start, data, train_idx, val_idx, lr, wd,
                                       cfg.stage4_steps, cfg.stage4_batch,
                                       /*contrastive=*/false, 0, 0, fnv1a("plain", cfg.seed));
  return PlainFtResult{std::move(outcome.params), outcome.val_accuracy};
}

// --------------------------------------------------- sample-based contrastive

Granularity granularity_from_name(const std::string& s) {
  if (s == "image") return Granularity::Image;
  if (s == "instance") return Granularity::Instance;
  if (s == "pixel") return Granularity::Pixel;
  PTK_FAIL("unknown contrastive granularity: " << s);
}

void init_contrastive_head(ParamStore& store, Rng& rng, Granularity g, i64 cin,
                           i64 embed_dim) {
  switch (g) {
    case Granularity::Image:
      LinearLayer<float>{"scl.img", cin, embed_dim}.init(store, rng);
      break;
    case Granularity::Instance:
      LinearLayer<float>{"scl.inst", cin * 7 * 7, embed_dim}.init(store, rng);
      break;
    case Granularity::Pixel:
      Conv2dLayer<float>{"scl.pix1", cin, embed_dim, 1, 1, 0, true}.init(store, rng);
      Conv2dLayer<float>{"scl.pix2", embed_dim, embed_dim, 1, 1, 0, true}.init(store, rng);
      break;
  }
}

Var image_granularity_embed(Binder& b, Var feats, i64 cin, i64 embed_dim) {
  return l2_normalize_rows(
      LinearLayer<float>{"scl.img", cin, embed_dim}(b, global_avg_pool(feats)));
}

Var instance_granularity_embed(Binder& b, Var feats, const std::vector<Roi>& crops, i64 cin,
                               i64 embed_dim) {
  PTK_CHECK(!crops.empty(), "instance embedding: no crops");
  Var pooled = roi_align(feats, crops, 7);
  Var flat = reshape(pooled, {i64(crops.size()), cin * 7 * 7});
  return l2_normalize_rows(LinearLayer<float>{"scl.inst", cin * 7 * 7, embed_dim}(b, flat));
}

PixelPoolRows pixel_granularity_embed(Binder& b, Var feats, const Tensor& class_map, i64 cin,
                                      i64 embed_dim) {
  const auto& fs = feats.value().shape;
  PTK_CHECK(class_map.rank() == 4 && class_map.shape[0] == fs[0] &&
                class_map.shape[2] == fs[2] && class_map.shape[3] == fs[3],
            "pixel embedding: class map shape mismatch");
  const i64 n = fs[0], h = fs[2], w = fs[3];

  Var proj = relu(Conv2dLayer<float>{"scl.pix1", cin, embed_dim, 1, 1, 0, true}(b, feats));
  proj = Conv2dLayer<float>{"scl.pix2", embed_dim, embed_dim, 1, 1, 0, true}(b, proj);
  Var flat = reshape(nchw_to_ntc(proj), {n * h * w, embed_dim});

  // same-class average pooling as a constant selection matrix
  PixelPoolRows out;
  std::map<std::pair<i64, i64>, std::vector<i64>> members;
  for (i64 img = 0; img < n; ++img)
    for (i64 p = 0; p < h * w; ++p) {
      const i64 cls = i64(class_map.data[std::size_t(img * h * w + p)]);
      members[{img, cls}].push_back(img * h * w + p);
    }
  Tensor select({i64(members.size()), n * h * w});
  i64 row = 0;
  for (const auto& [owner, positions] : members) {
    for (i64 p : positions) select.at2(row, p) = float(1.0 / double(positions.size()));
    out.owners.push_back(owner);
    ++row;
  }
  out.rows = l2_normalize_rows(matmul(b.tape().constant(select), flat));
  return out;
}

void SampleContrastiveState::push_history(const Tensor& rows) {
  PTK_CHECK(rows.rank() == 2, "history: want [N,D]");
  for (i64 i = 0; i < rows.shape[0]; ++i) {
    Tensor e({rows.shape[1]});
    for (i64 j = 0; j < rows.shape[1]; ++j) e[j] = rows.at2(i, j);
    history.push_back(std::move(e));
    if (i64(history.size()) > capacity) history.pop_front();
  }
}

std::vector<Tensor> SampleContrastiveState::history_vec() const {
  return std::vector<Tensor>(history.begin(), history.end());
}

// ------------------------------------------------------------------ FD score

namespace {

// Jacobi eigendecomposition of a symmetric matrix; returns eigenvalues and
// fills V column-wise with eigenvectors.
void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& eig,
                  std::vector<std::vector<double>>& v) {
  const std::size_t n = a.size();
  v.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
  }
  eig.resize(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a[i][i];
}

// Symmetric PSD square root with eigenvalue clamping at zero.
std::vector<std::vector<double>> sqrtm_psd(const std::vector<std::vector<double>>& s) {
  const std::size_t n = s.size();
  std::vector<double> eig;
  std::vector<std::vector<double>> v;
  jacobi_eigen(s, eig, v);
  std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k)
        out[i][j] += v[i][k] * std::sqrt(std::max(0.0, eig[k])) * v[j][k];
  return out;
}

std::vector<std::vector<double>> matmul_sym(const std::vector<std::vector<double>>& a,
                                            const std::vector<std::vector<double>>& b) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a[i][k];
      if (aik == 0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i][j] += aik * b[k][j];
    }
  return out;
}

}  // namespace

double fd_score(const std::vector<std::vector<double>>& feats_a,
                const std::vector<std::vector<double>>& feats_b) {
  PTK_CHECK(feats_a.size() >= 2 && feats_b.size() >= 2, "fd_score: need >= 2 samples per side");
  const std::size_t d = feats_a[0].size();
  PTK_CHECK(d > 0 && feats_b[0].size() == d, "fd_score: feature dims differ");

  auto stats = [&](const std::vector<std::vector<double>>& f) {
    std::vector<double> mu(d, 0.0);
    for (const auto& row : f) {
      PTK_CHECK(row.size() == d, "fd_score: ragged features");
      for (std::size_t j = 0; j < d; ++j) mu[j] += row[j];
    }
    for (auto& m : mu) m /= double(f.size());
    std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
    for (const auto& row : f)
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
          cov[i][j] += (row[i] - mu[i]) * (row[j] - mu[j]);
    for (auto& r : cov)
      for (auto& v : r) v /= double(f.size());
    return std::make_pair(mu, cov);
  };

  auto [mu_a, cov_a] = stats(feats_a);
  auto [mu_b, cov_b] = stats(feats_b);

  double mean_term = 0;
  for (std::size_t j = 0; j < d; ++j)
    mean_term += (mu_a[j] - mu_b[j]) * (mu_a[j] - mu_b[j]);

  // Tr((SA SB)^1/2) via the symmetric form (SA^1/2 SB SA^1/2)^1/2
  auto root_a = sqrtm_psd(cov_a);
  auto inner = matmul_sym(matmul_sym(root_a, cov_b), root_a);
  // symmetrize against round-off before decomposing
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double s = 0.5 * (inner[i][j] + inner[j][i]);
      inner[i][j] = s;
      inner[j][i] = s;
    }
  std::vector<double> eig;
  std::vector<std::vector<double>> v;
  jacobi_eigen(inner, eig, v);
  double tr_sqrt = 0;
  for (double e : eig) tr_sqrt += std::sqrt(std::max(0.0, e));

  double tr_a = 0, tr_b = 0;
  for (std::size_t i = 0; i < d; ++i) {
    tr_a += cov_a[i][i];
    tr_b += cov_b[i][i];
  }
  const double result = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
  return std::max(0.0, result);
}

}  // namespace ptk::adapt
