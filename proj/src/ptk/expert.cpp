#include "ptk/expert.hpp"

#include <algorithm>
#include <set>

namespace ptk::expert {

const char* task_name(TaskType t) {
  switch (t) {
    case TaskType::Classification: return "classification";
    case TaskType::Patchwise: return "patchwise";
    case TaskType::Pixelwise: return "pixelwise";
  }
  return "?";
}

TaskType task_from_name(const std::string& s) {
  if (s == "classification" || s == "cls") return TaskType::Classification;
  if (s == "patchwise" || s == "patch") return TaskType::Patchwise;
  if (s == "pixelwise" || s == "pixel") return TaskType::Pixelwise;
  PTK_FAIL("unknown task type: " << s);
}

void DatasetDescriptor::validate() const {
  PTK_CHECK(!id.empty(), "dataset descriptor: empty id");
  std::set<std::string> seen;
  for (const auto& n : label_names)
    PTK_CHECK(seen.insert(n).second, "dataset " << id << ": duplicate label name " << n);
}

// -------------------------------------------------------------- label spaces

LabelSpaceMapping merge_label_spaces(const std::vector<DatasetDescriptor>& datasets,
                                     MergeScheme scheme,
                                     const std::vector<SynonymPair>& synonyms) {
  for (const auto& ds : datasets) ds.validate();
  LabelSpaceMapping out;
  out.scheme = scheme;

  if (scheme == MergeScheme::Natural) {
    for (const auto& ds : datasets) {
      std::vector<i64> id(ds.label_names.size());
      for (std::size_t i = 0; i < id.size(); ++i) id[i] = i64(i);
      out.per_dataset[ds.id] = std::move(id);
    }
    out.global_size = 0;
    return out;
  }

  // ordered keys: (dataset, label) in declaration order
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::size_t> key_index;
  for (const auto& ds : datasets)
    for (const auto& name : ds.label_names) {
      key_index[{ds.id, name}] = keys.size();
      keys.emplace_back(ds.id, name);
    }

  std::vector<std::size_t> parent(keys.size());
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };

  if (scheme == MergeScheme::PartiallyMerged) {
    for (const auto& syn : synonyms) {
      auto a = key_index.find({syn.dataset_a, syn.label_a});
      auto b = key_index.find({syn.dataset_b, syn.label_b});
      PTK_CHECK(a != key_index.end(), "synonym references unknown class "
                                          << syn.dataset_a << "/" << syn.label_a);
      PTK_CHECK(b != key_index.end(), "synonym references unknown class "
                                          << syn.dataset_b << "/" << syn.label_b);
      parent[find(a->second)] = find(b->second);
    }
  }

  std::map<std::size_t, i64> root_to_global;
  i64 next = 0;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::size_t r = find(i);
    if (!root_to_global.count(r)) root_to_global[r] = next++;
  }
  out.global_size = next;
  for (const auto& ds : datasets) {
    std::vector<i64> map(ds.label_names.size());
    for (std::size_t i = 0; i < ds.label_names.size(); ++i)
      map[i] = root_to_global.at(find(key_index.at({ds.id, ds.label_names[i]})));
    out.per_dataset[ds.id] = std::move(map);
  }
  return out;
}

std::vector<i64> largest_remainder_quotas(const std::vector<i64>& sizes, i64 total) {
  PTK_CHECK(!sizes.empty() && total >= 0, "quotas: bad arguments");
  i64 mass = 0;
  for (i64 s : sizes) {
    PTK_CHECK(s >= 0, "quotas: negative size");
    mass += s;
  }
  PTK_CHECK(mass > 0, "quotas: zero total size");
  std::vector<i64> quota(sizes.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  i64 assigned = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double exact = double(total) * double(sizes[i]) / double(mass);
    quota[i] = i64(std::floor(exact));
    assigned += quota[i];
    remainders.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (i64 k = 0; k < total - assigned; ++k) ++quota[remainders[std::size_t(k)].second];
  return quota;
}

std::map<std::string, std::vector<i64>> partition_batch(const std::vector<TaggedSample>& samples) {
  std::map<std::string, std::vector<i64>> out;
  for (const auto& s : samples) out[s.dataset].push_back(s.index);
  return out;
}

// -------------------------------------------------------------------- expert

FpnT<float> Expert::fpn() const {
  auto bb = backbone();
  FpnT<float> f;
  f.prefix = "fpn";
  f.in_channels = {{"C2", bb.out_channels("C2")},
                   {"C3", bb.out_channels("C3")},
                   {"C4", bb.out_channels("C4")},
                   {"C5", bb.out_channels("C5")}};
  f.out_ch = fpn_channels;
  return f;
}

i64 Expert::head_classes(const DatasetDescriptor& ds) const {
  if (mapping.scheme == MergeScheme::Natural) return i64(ds.label_names.size());
  return mapping.global_size;
}

Var Expert::cls_logits(Binder& b, Var c5, const std::string& dataset) const {
  const i64 cin = backbone().out_channels("C5");
  if (mapping.scheme == MergeScheme::Natural) {
    for (const auto& ds : datasets)
      if (ds.id == dataset)
        return ClassifierHeadT<float>{"head." + dataset, cin, i64(ds.label_names.size())}(b, c5);
    PTK_FAIL("expert: unknown dataset " << dataset);
  }
  Var global = ClassifierHeadT<float>{"head.global", cin, mapping.global_size}(b, c5);
  if (mapping.scheme == MergeScheme::Unified) return global;
  // partially merged: restrict the candidate set to this dataset's classes,
  // in local label order, over the shared global weights
  const auto& ids = mapping.per_dataset.at(dataset);
  return transpose(gather_rows(transpose(global), ids));
}

Expert build_expert(TaskType task, const std::vector<DatasetDescriptor>& datasets,
                    const nas::ArchSpec& arch, const ParamStore& init, MergeScheme scheme,
                    const std::vector<SynonymPair>& synonyms, u64 seed) {
  PTK_CHECK(!datasets.empty(), "build_expert: need at least one dataset");
  for (const auto& ds : datasets)
    PTK_CHECK(ds.task == task, "build_expert: dataset " << ds.id << " is "
                                                        << task_name(ds.task) << ", expert is "
                                                        << task_name(task));
  PTK_CHECK(scheme == MergeScheme::Natural || task == TaskType::Classification,
            "build_expert: merge schemes apply to classification experts");

  Expert e;
  e.task = task;
  e.arch = arch;
  e.datasets = datasets;
  e.mapping = merge_label_spaces(datasets, scheme, synonyms);

  Rng rng(fnv1a("expert", seed));
  auto bb = e.backbone();
  bb.init(e.params, rng);
  if (task == TaskType::Patchwise) e.fpn().init(e.params, rng);

  // trunk warm start from the checkpoint, shapes permitting
  for (const auto& name : init.names()) {
    const bool trunk = name.rfind("backbone.", 0) == 0 ||
                       (task == TaskType::Patchwise && name.rfind("fpn.", 0) == 0);
    if (!trunk || !e.params.has(name)) continue;
    if (e.params.get(name).shape == init.get(name).shape) e.params.get(name) = init.get(name);
  }

  const i64 c5 = bb.out_channels("C5");
  if (task == TaskType::Classification) {
    if (e.mapping.scheme == MergeScheme::Natural) {
      for (const auto& ds : datasets)
        ClassifierHeadT<float>{"head." + ds.id, c5, i64(ds.label_names.size())}.init(e.params,
                                                                                     rng);
    } else {
      ClassifierHeadT<float>{"head.global", c5, e.mapping.global_size}.init(e.params, rng);
    }
  } else if (task == TaskType::Patchwise) {
    for (const auto& ds : datasets)
      RoiBoxHeadT<float>{"head." + ds.id, e.fpn_channels, 7, 64,
                         i64(ds.label_names.size()) + 1}
          .init(e.params, rng);
  } else {
    for (const auto& ds : datasets)
      PixelHeadT<float>{"head." + ds.id, bb.out_channels("C2"), 32,
                        i64(ds.label_names.size())}
          .init(e.params, rng);
  }
  return e;
}

// ------------------------------------------------------------------- losses

int level_for_box(double x1, double y1, double x2, double y2) {
  const double side = std::sqrt(std::max(1.0, (x2 - x1) * (y2 - y1)));
  const int level = 2 + int(std::floor(std::log2(std::max(1.0, side / 8.0))));
  return std::clamp(level, 2, 5);
}

std::array<double, 4> box_deltas(const amateur::Proposal& p, const std::array<double, 4>& gt) {
  const double pw = p.x2 - p.x1, ph = p.y2 - p.y1;
  const double pcx = 0.5 * (p.x1 + p.x2), pcy = 0.5 * (p.y1 + p.y2);
  const double gw = gt[2] - gt[0], gh = gt[3] - gt[1];
  const double gcx = 0.5 * (gt[0] + gt[2]), gcy = 0.5 * (gt[1] + gt[3]);
  return {(gcx - pcx) / pw, (gcy - pcy) / ph, std::log(gw / pw), std::log(gh / ph)};
}

namespace {

double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = ix * iy;
  const double ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

}  // namespace

Var patch_group_loss(Binder& b, const FeatureMapSetT<float>& pyramid, const Group& g,
                     const std::string& head_prefix, i64 fpn_ch, i64 classes_with_bg,
                     Rng& rng) {
  const i64 n = g.images.shape[0];
  // proposals: each ground-truth box plus jittered and random distractors
  std::vector<amateur::Proposal> proposals;
  std::vector<i64> prop_image, prop_class;
  std::vector<std::array<double, 4>> prop_target;
  const i64 background = classes_with_bg - 1;
  for (i64 img = 0; img < n; ++img) {
    auto random_props = amateur::gen_proposals(rng, 3, harness::kImageSize);
    for (const auto& gt : g.boxes[std::size_t(img)]) {
      amateur::Proposal pos{gt.box[0], gt.box[1], gt.box[2], gt.box[3], -1};
      proposals.push_back(pos);
      prop_image.push_back(img);
      prop_class.push_back(gt.cls);
      prop_target.push_back(box_deltas(pos, gt.box));
      // jittered positive
      const double w = gt.box[2] - gt.box[0], h = gt.box[3] - gt.box[1];
      amateur::Proposal jit{std::max(0.0, gt.box[0] + rng.uniform(-0.1, 0.1) * w),
                            std::max(0.0, gt.box[1] + rng.uniform(-0.1, 0.1) * h),
                            std::min(double(harness::kImageSize),
                                     gt.box[2] + rng.uniform(-0.1, 0.1) * w),
                            std::min(double(harness::kImageSize),
                                     gt.box[3] + rng.uniform(-0.1, 0.1) * h),
                            -1};
      if (jit.x2 > jit.x1 && jit.y2 > jit.y1) {
        proposals.push_back(jit);
        prop_image.push_back(img);
        if (iou({jit.x1, jit.y1, jit.x2, jit.y2}, gt.box) > 0.5) {
          prop_class.push_back(gt.cls);
          prop_target.push_back(box_deltas(jit, gt.box));
        } else {
          prop_class.push_back(background);
          prop_target.push_back({0, 0, 0, 0});
        }
      }
    }
    for (const auto& rp : random_props) {
      proposals.push_back(rp);
      prop_image.push_back(img);
      i64 cls = background;
      std::array<double, 4> tgt{0, 0, 0, 0};
      for (const auto& gt : g.boxes[std::size_t(img)])
        if (iou({rp.x1, rp.y1, rp.x2, rp.y2}, gt.box) > 0.5) {
          cls = gt.cls;
          tgt = box_deltas(rp, gt.box);
        }
      prop_class.push_back(cls);
      prop_target.push_back(tgt);
    }
  }

  // pool per pyramid level chosen by box size, then restore proposal order
  std::vector<Var> level_feats;
  std::vector<i64> order;
  for (int level = 2; level <= 5; ++level) {
    std::vector<Roi> rois;
    const double stride = double(1 << level);
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      const auto& p = proposals[i];
      if (level_for_box(p.x1, p.y1, p.x2, p.y2) != level) continue;
      rois.push_back(Roi{prop_image[i], p.x1 / stride, p.y1 / stride, p.x2 / stride,
                         p.y2 / stride});
      order.push_back(i64(i));
    }
    if (rois.empty()) continue;
    level_feats.push_back(roi_align(pyramid.at("P" + std::to_string(level)), rois, 7));
  }
  Var feats = concat_dim0(level_feats);
  // scatter back to pooled order: labels/targets follow `order`
  std::vector<i64> cls_labels(order.size());
  Tensor targets({i64(order.size()), 4});
  std::vector<i64> positive_rows;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const i64 src = order[k];
    cls_labels[k] = prop_class[std::size_t(src)];
    for (i64 j = 0; j < 4; ++j) targets.at2(i64(k), j) = float(prop_target[std::size_t(src)][j]);
    if (prop_class[std::size_t(src)] != background) positive_rows.push_back(i64(k));
  }

  RoiBoxHeadT<float> head{head_prefix, fpn_ch, 7, 64, classes_with_bg};
  auto [logits, box] = head(b, feats);
  Var loss = cross_entropy(logits, cls_labels);
  if (!positive_rows.empty()) {
    Var pos_pred = gather_rows(box, positive_rows);
    Var pos_tgt = gather_rows(b.tape().constant(targets), positive_rows);
    loss = add(loss, mse_loss(pos_pred, pos_tgt));
  }
  return loss;
}

Var pixel_group_loss(Binder& b, Var c2, const Group& g, const std::string& head_prefix,
                     i64 cin, i64 classes) {
  PixelHeadT<float> head{head_prefix, cin, 32, classes};
  Var logits = head(b, c2);  // [N,classes,16,16] at stride 4
  const i64 n = logits.value().shape[0];
  const i64 hw = logits.value().shape[2] * logits.value().shape[3];
  Var rows = reshape(nchw_to_ntc(logits), {n * hw, classes});
  // nearest-neighbor downsample of the dense labels to stride 4
  std::vector<i64> labels;
  labels.reserve(std::size_t(n * hw));
  const i64 side = logits.value().shape[2];
  const i64 factor = g.dense_map.shape[2] / side;
  for (i64 img = 0; img < n; ++img)
    for (i64 y = 0; y < side; ++y)
      for (i64 x = 0; x < side; ++x)
        labels.push_back(i64(g.dense_map.at4(img, 0, y * factor, x * factor)));
  return cross_entropy(rows, labels);
}

// --------------------------------------------------------------- train step

StepResult expert_step(Expert& expert, const std::vector<Group>& groups, Optimizer& opt,
                       const StepOptions& options) {
  PTK_CHECK(!groups.empty(), "expert_step: no groups");
  StepResult result;

  Tape tape;
  Binder bind(tape, expert.params, /*training=*/true);
  std::vector<Var> images;
  std::vector<i64> sizes;
  for (const auto& g : groups) {
    images.push_back(tape.constant(g.images));
    sizes.push_back(g.images.shape[0]);
  }
  // one forward over the union batch: batch-norm statistics are shared by
  // construction (the simulated-device equivalent of global sync)
  Var unioned = concat_dim0(images);
  auto bb = expert.backbone();
  auto fm = bb(bind, unioned);
  FeatureMapSetT<float> pyramid;
  if (expert.task == TaskType::Patchwise) pyramid = expert.fpn()(bind, fm);

  Rng fallback_rng(fnv1a("expert-step", 0));
  Rng& rng = options.rng ? *options.rng : fallback_rng;

  Var total;
  bool first = true;
  i64 offset = 0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const Group& g = groups[gi];
    const i64 n = sizes[gi];
    Var loss;
    if (expert.task == TaskType::Classification) {
      Var c5 = slice_dim0(fm.at("C5"), offset, offset + n);
      std::vector<i64> labels = g.labels;
      if (expert.mapping.scheme == MergeScheme::Unified) {
        const auto& map = expert.mapping.per_dataset.at(g.dataset);
        for (auto& l : labels) l = map.at(std::size_t(l));
      }
      loss = cross_entropy(expert.cls_logits(bind, c5, g.dataset), labels);
    } else {
      const DatasetDescriptor* desc = nullptr;
      for (const auto& d : expert.datasets)
        if (d.id == g.dataset) desc = &d;
      PTK_CHECK(desc, "expert_step: unknown dataset group " << g.dataset);
      if (expert.task == TaskType::Patchwise) {
        FeatureMapSetT<float> slice;
        for (int lvl = 2; lvl <= 6; ++lvl) {
          const std::string name = "P" + std::to_string(lvl);
          slice.set(name, slice_dim0(pyramid.at(name), offset, offset + n));
        }
        loss = patch_group_loss(bind, slice, g, "head." + g.dataset, expert.fpn_channels,
                                i64(desc->label_names.size()) + 1, rng);
      } else {
        Var c2 = slice_dim0(fm.at("C2"), offset, offset + n);
        loss = pixel_group_loss(bind, c2, g, "head." + g.dataset,
                                expert.backbone().out_channels("C2"),
                                i64(desc->label_names.size()));
      }
    }
    result.losses[g.dataset] = double(tape.value(loss)[0]);
    total = first ? loss : add(total, loss);
    first = false;
    offset += n;
  }

  result.total = double(tape.value(total)[0]);
  tape.backward(total);
  auto grads = bind.gradients();
  if (options.clip_norm > 0) clip_global_norm(grads, options.clip_norm);
  opt.step(expert.params, grads, options.lr);
  return result;
}

// ----------------------------------------------------------------- trainers

namespace {

Optimizer make_expert_optimizer(const TrainConfig& cfg) {
  OptConfig oc;
  oc.kind = OptKind::AdamW;
  oc.weight_decay = cfg.weight_decay;
  Optimizer opt(oc);
  if (cfg.head_weight_decay >= 0) opt.set_weight_decay_override("head.", cfg.head_weight_decay);
  return opt;
}

}  // namespace

Expert train_expert_cls(const nas::ArchSpec& arch, const ParamStore& init,
                        const std::vector<const harness::ClsDataset*>& datasets,
                        const TrainConfig& cfg, MergeScheme scheme,
                        const std::vector<SynonymPair>& synonyms) {
  PTK_CHECK(!datasets.empty(), "train_expert_cls: no datasets");
  std::vector<DatasetDescriptor> descs;
  std::vector<i64> sizes;
  for (const auto* ds : datasets) {
    DatasetDescriptor d;
    d.id = ds->id;
    d.task = TaskType::Classification;
    for (i64 c = 0; c < ds->classes; ++c) d.label_names.push_back("c" + std::to_string(c));
    d.sample_count = i64(ds->train_idx.size());
    descs.push_back(std::move(d));
    sizes.push_back(i64(ds->train_idx.size()));
  }
  Expert expert = build_expert(TaskType::Classification, descs, arch, init, scheme, synonyms,
                               cfg.seed);
  Optimizer opt = make_expert_optimizer(cfg);
  Rng rng(fnv1a("expert-cls", cfg.seed));
  const auto quotas = largest_remainder_quotas(sizes, cfg.total_batch);
  LrSchedule sched{LrKind::Cosine, cfg.lr, 0.0, cfg.steps, 0};

  for (i64 step = 0; step < cfg.steps; ++step) {
    std::vector<Group> groups;
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      if (quotas[d] == 0) continue;
      const auto* ds = datasets[d];
      std::vector<i64> pick;
      Group g;
      g.dataset = ds->id;
      for (i64 i = 0; i < quotas[d]; ++i) {
        const i64 idx = ds->train_idx[std::size_t(rng.uniform_int(i64(ds->train_idx.size())))];
        pick.push_back(idx);
        g.labels.push_back(ds->labels[std::size_t(idx)]);
      }
      g.images = harness::make_batch(ds->images, pick);
      groups.push_back(std::move(g));
    }
    StepOptions so;
    so.lr = lr_at(sched, step);
    so.rng = &rng;
    expert_step(expert, groups, opt, so);
  }
  return expert;
}

Expert train_expert_patch(const nas::ArchSpec& arch, const ParamStore& init,
                          const harness::DetDataset& dataset, const TrainConfig& cfg) {
  DatasetDescriptor d;
  d.id = dataset.id;
  d.task = TaskType::Patchwise;
  for (i64 c = 0; c < dataset.classes; ++c) d.label_names.push_back("c" + std::to_string(c));
  d.sample_count = i64(dataset.train_idx.size());
  Expert expert = build_expert(TaskType::Patchwise, {d}, arch, init, MergeScheme::Natural, {},
                               cfg.seed);
  Optimizer opt = make_expert_optimizer(cfg);
  Rng rng(fnv1a("expert-patch", cfg.seed));
  LrSchedule sched{LrKind::Multistep, cfg.lr, 0.0, cfg.steps, 0};

  for (i64 step = 0; step < cfg.steps; ++step) {
    Group g;
    g.dataset = dataset.id;
    std::vector<i64> pick;
    for (i64 i = 0; i < cfg.total_batch; ++i) {
      const i64 idx =
          dataset.train_idx[std::size_t(rng.uniform_int(i64(dataset.train_idx.size())))];
      pick.push_back(idx);
      g.boxes.push_back(dataset.boxes[std::size_t(idx)]);
    }
    g.images = harness::make_batch(dataset.images, pick);
    StepOptions so;
    so.lr = lr_at(sched, step);
    so.rng = &rng;
    expert_step(expert, {g}, opt, so);
  }
  return expert;
}

Expert train_expert_pixel(const nas::ArchSpec& arch, const ParamStore& init,
                          const harness::DenseDataset& dataset, const TrainConfig& cfg) {
  DatasetDescriptor d;
  d.id = dataset.id;
  d.task = TaskType::Pixelwise;
  for (i64 c = 0; c < dataset.classes; ++c) d.label_names.push_back("c" + std::to_string(c));
  d.sample_count = i64(dataset.train_idx.size());
  Expert expert = build_expert(TaskType::Pixelwise, {d}, arch, init, MergeScheme::Natural, {},
                               cfg.seed);
  Optimizer opt = make_expert_optimizer(cfg);
  Rng rng(fnv1a("expert-pixel", cfg.seed));
  LrSchedule sched{LrKind::Polynomial, cfg.lr, 0.0, cfg.steps, 0};

  for (i64 step = 0; step < cfg.steps; ++step) {
    Group g;
    g.dataset = dataset.id;
    std::vector<i64> pick;
    for (i64 i = 0; i < cfg.total_batch; ++i)
      pick.push_back(
          dataset.train_idx[std::size_t(rng.uniform_int(i64(dataset.train_idx.size())))]);
    g.images = harness::make_batch(dataset.images, pick);
    Tensor maps({i64(pick.size()), 1, harness::kImageSize, harness::kImageSize});
    for (std::size_t i = 0; i < pick.size(); ++i) {
      const auto& m = dataset.maps[std::size_t(pick[i])];
      std::copy(m.data.begin(), m.data.end(), maps.data.begin() + i64(i) * m.numel());
    }
    g.dense_map = maps;
    StepOptions so;
    so.lr = lr_at(sched, step);
    so.clip_norm = 4.0;  // dense-prediction runs clip at norm 4
    so.rng = &rng;
    expert_step(expert, {g}, opt, so);
  }
  return expert;
}

}  // namespace ptk::expert
