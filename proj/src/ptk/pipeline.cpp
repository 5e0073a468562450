#include "ptk/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ptk::pipeline {

namespace {

std::string opt_str(const std::map<std::string, std::string>& o, const std::string& key,
                    const std::string& def) {
  auto it = o.find(key);
  return it == o.end() ? def : it->second;
}
i64 opt_i64(const std::map<std::string, std::string>& o, const std::string& key, i64 def) {
  auto it = o.find(key);
  return it == o.end() ? def : std::stoll(it->second);
}
double opt_dbl(const std::map<std::string, std::string>& o, const std::string& key, double def) {
  auto it = o.find(key);
  return it == o.end() ? def : std::stod(it->second);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string item;
  while (std::getline(iss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string logical_timestamp() {
  const char* env = std::getenv("PTK_TIMESTAMP");
  return env ? std::string(env) : std::string("0");
}

const harness::ClsDataset* cls_by_id(const harness::TaskSuite& suite, const std::string& id) {
  for (const auto* d : {&suite.cls16, &suite.cls_shape, &suite.cls_color})
    if (d->id == id) return d;
  PTK_FAIL("unknown classification dataset: " << id);
}

}  // namespace

nas::ArchSpec default_arch() {
  std::vector<i64> tokens;
  for (int i = 0; i < 6; ++i) tokens.insert(tokens.end(), {0, 0, 2, 2});
  return nas::decode(tokens, nas::SearchSpace::desk_default());
}

// -------------------------------------------------------------- checkpoints

void save_amateur(const std::string& path, const nas::ArchSpec& arch,
                  const ParamStore& params) {
  CheckpointMeta meta;
  meta.stage = "amateur";
  meta.arch_hash = nas::arch_hash(arch);
  meta.extra["arch_text"] = nas::arch_to_text(arch);
  save_checkpoint(path, meta, params);
}

namespace {

std::string dataset_field(const std::vector<expert::DatasetDescriptor>& ds) {
  std::string out;
  for (const auto& d : ds) {
    if (!out.empty()) out += ",";
    out += d.id + ":" + std::to_string(d.label_names.size());
  }
  return out;
}

std::vector<expert::DatasetDescriptor> datasets_from_field(const std::string& field,
                                                           expert::TaskType task) {
  std::vector<expert::DatasetDescriptor> out;
  for (const auto& item : split_list(field)) {
    const auto colon = item.find(':');
    PTK_CHECK(colon != std::string::npos, "bad dataset field: " << item);
    expert::DatasetDescriptor d;
    d.id = item.substr(0, colon);
    d.task = task;
    const i64 classes = std::stoll(item.substr(colon + 1));
    for (i64 c = 0; c < classes; ++c) d.label_names.push_back("c" + std::to_string(c));
    out.push_back(std::move(d));
  }
  return out;
}

const char* scheme_name(expert::MergeScheme s) {
  switch (s) {
    case expert::MergeScheme::Natural: return "natural";
    case expert::MergeScheme::Unified: return "unified";
    case expert::MergeScheme::PartiallyMerged: return "partial";
  }
  return "natural";
}

expert::MergeScheme scheme_from(const std::string& s) {
  if (s == "natural") return expert::MergeScheme::Natural;
  if (s == "unified") return expert::MergeScheme::Unified;
  if (s == "partial") return expert::MergeScheme::PartiallyMerged;
  PTK_FAIL("unknown merge scheme: " << s);
}

}  // namespace

void save_expert(const std::string& path, const expert::Expert& e) {
  CheckpointMeta meta;
  meta.stage = "expert";
  meta.arch_hash = nas::arch_hash(e.arch);
  meta.extra["arch_text"] = nas::arch_to_text(e.arch);
  meta.extra["task"] = expert::task_name(e.task);
  meta.extra["datasets"] = dataset_field(e.datasets);
  meta.extra["scheme"] = scheme_name(e.mapping.scheme);
  meta.extra["fpn_channels"] = std::to_string(e.fpn_channels);
  save_checkpoint(path, meta, e.params);
}

void save_generalist(const std::string& path, const generalist::Generalist& g) {
  CheckpointMeta meta;
  meta.stage = "generalist";
  meta.arch_hash = nas::arch_hash(g.branches[0].source.arch);
  meta.extra["arch_text"] = nas::arch_to_text(g.branches[0].source.arch);
  std::string branches;
  for (const auto& br : g.branches) {
    if (!branches.empty()) branches += "|";
    branches += std::string(expert::task_name(br.source.task)) + ";" +
                dataset_field(br.source.datasets) + ";" +
                std::to_string(br.source.fpn_channels);
  }
  meta.extra["branches"] = branches;
  switch (g.scheme) {
    case generalist::ConnectionScheme::HardSharing: meta.extra["scheme"] = "hard_sharing"; break;
    case generalist::ConnectionScheme::SameLevel: meta.extra["scheme"] = "same_level"; break;
    case generalist::ConnectionScheme::LowLevel: meta.extra["scheme"] = "low_level"; break;
    case generalist::ConnectionScheme::HighLevel: meta.extra["scheme"] = "high_level"; break;
    case generalist::ConnectionScheme::CrossLevel: meta.extra["scheme"] = "cross_level"; break;
  }
  meta.extra["module"] = g.module_kind == generalist::TransferKind::Channel ? "channel"
                                                                            : "non_linear";
  save_checkpoint(path, meta, g.params);
}

expert::Expert expert_from_checkpoint(const std::string& path) {
  ParamStore params;
  CheckpointMeta meta = load_checkpoint(path, &params);
  PTK_CHECK(meta.stage == "expert", "not an expert checkpoint: " << path);
  expert::Expert e;
  e.arch = nas::arch_from_text(meta.extra.at("arch_text"));
  e.task = expert::task_from_name(meta.extra.at("task"));
  e.datasets = datasets_from_field(meta.extra.at("datasets"), e.task);
  e.mapping = expert::merge_label_spaces(e.datasets, scheme_from(meta.extra.at("scheme")));
  e.fpn_channels = std::stoll(meta.extra.at("fpn_channels"));
  e.params = std::move(params);
  return e;
}

LoadedModel load_model(const std::string& path) {
  LoadedModel out;
  ParamStore params;
  CheckpointMeta meta = load_checkpoint(path, &params);
  out.stage = meta.stage;
  out.arch = nas::arch_from_text(meta.extra.at("arch_text"));
  if (meta.stage == "expert") {
    out.expert = expert_from_checkpoint(path);
    out.params = out.expert.params;
    return out;
  }
  if (meta.stage == "generalist") {
    // rebuild the branch experts from the prefixed parameter slices, then
    // re-assemble the structure and restore every stored entry
    std::vector<expert::Expert> experts;
    const auto branch_fields = split_list(meta.extra.at("branches"), '|');
    for (std::size_t i = 0; i < branch_fields.size(); ++i) {
      const auto parts = split_list(branch_fields[i], ';');
      PTK_CHECK(parts.size() == 3, "bad generalist branch field");
      expert::Expert e;
      e.task = expert::task_from_name(parts[0]);
      e.arch = out.arch;
      e.datasets = datasets_from_field(parts[1], e.task);
      e.mapping = expert::merge_label_spaces(e.datasets, expert::MergeScheme::Natural);
      e.fpn_channels = std::stoll(parts[2]);
      const std::string prefix = "br" + std::to_string(i) + ".";
      for (const auto& name : params.names_with_prefix(prefix))
        e.params.add(name.substr(prefix.size()), params.get(name), params.trainable(name));
      experts.push_back(std::move(e));
    }
    out.gen = generalist::build_generalist(
        experts, generalist::scheme_from_name(meta.extra.at("scheme")),
        generalist::transfer_from_name(meta.extra.at("module")));
    for (const auto& name : out.gen.params.names())
      out.gen.params.get(name) = params.get(name);
    out.params = out.gen.params;
    return out;
  }
  out.params = std::move(params);
  return out;
}

// ---------------------------------------------------------------- extraction

std::vector<std::vector<double>> backbone_features(const nas::ArchSpec& arch,
                                                   const ParamStore& params,
                                                   const std::vector<Tensor>& images,
                                                   const std::vector<i64>& idx) {
  BackboneT<float> bb{"backbone", 3, nas::arch_to_stages(arch)};
  std::vector<std::vector<double>> out;
  const i64 chunk = 16;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    std::vector<i64> pick(idx.begin() + i64(start),
                          idx.begin() + i64(std::min(idx.size(), start + chunk)));
    Tape tape;
    Binder bind(tape, const_cast<ParamStore&>(params), /*training=*/false);
    auto fm = bb(bind, tape.constant(harness::make_batch(images, pick)));
    const Tensor pooled = tape.value(global_avg_pool(fm.at("C5")));
    for (i64 r = 0; r < pooled.shape[0]; ++r) {
      std::vector<double> row;
      for (i64 j = 0; j < pooled.shape[1]; ++j) row.push_back(double(pooled.at2(r, j)));
      out.push_back(std::move(row));
    }
  }
  return out;
}

std::vector<std::vector<double>> generalist_features(const generalist::Generalist& g,
                                                     const std::vector<Tensor>& images,
                                                     const std::vector<i64>& idx) {
  std::vector<std::vector<double>> out;
  const i64 chunk = 16;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    std::vector<i64> pick(idx.begin() + i64(start),
                          idx.begin() + i64(std::min(idx.size(), start + chunk)));
    Tape tape;
    Binder bind(tape, const_cast<ParamStore&>(g.params), /*training=*/false);
    auto feats = generalist::forward_branches(g, bind, tape.constant(harness::make_batch(images, pick)));
    auto fused = generalist::unified_image_repr(g, feats);
    const Tensor pooled = tape.value(global_avg_pool(fused));
    for (i64 r = 0; r < pooled.shape[0]; ++r) {
      std::vector<double> row;
      for (i64 j = 0; j < pooled.shape[1]; ++j) row.push_back(double(pooled.at2(r, j)));
      out.push_back(std::move(row));
    }
  }
  return out;
}

// -------------------------------------------------------------- probe helpers

ProbeOutcome percentage_probe(const FeatureFn& features, const harness::ClsDataset& data,
                              double percent, u64 seed,
                              const bench::ProbeProtocol& protocol) {
  // split over the training side only
  std::vector<i64> train_labels;
  for (i64 i : data.train_idx) train_labels.push_back(data.labels[std::size_t(i)]);
  bench::Split split = bench::percentage_shot_split(train_labels, percent / 100.0, seed);
  split.dataset = data.id;

  std::vector<i64> selected;  // indices into data.images
  std::vector<i64> selected_labels;
  for (i64 local : split.indices()) {
    const i64 global = data.train_idx[std::size_t(local)];
    selected.push_back(global);
    selected_labels.push_back(data.labels[std::size_t(global)]);
  }
  PTK_CHECK(!selected.empty(), "percentage probe: empty selection, raise the percent");

  auto train_feats = features(data.images, selected);
  auto val_feats = features(data.images, data.val_idx);
  std::vector<i64> val_labels;
  for (i64 i : data.val_idx) val_labels.push_back(data.labels[std::size_t(i)]);

  auto probe = bench::linear_probe(train_feats, selected_labels, val_feats, val_labels,
                                   protocol, data.classes);
  auto preds = bench::probe_predict(probe, val_feats);

  ProbeOutcome out;
  out.accuracy = bench::accuracy(preds, val_labels);
  out.mean_per_class = bench::mean_per_class(preds, val_labels);
  // one-vs-rest scores from the probe head
  std::vector<std::vector<double>> scores;
  for (const auto& row : val_feats) {
    std::vector<double> s(std::size_t(data.classes), 0.0);
    for (i64 k = 0; k < data.classes; ++k) {
      double v = probe.weights.back()[std::size_t(k)];
      for (std::size_t j = 0; j + 1 < probe.weights.size(); ++j)
        v += row[j] * probe.weights[j][std::size_t(k)];
      s[std::size_t(k)] = v;
    }
    scores.push_back(std::move(s));
  }
  out.fpr_at_recall90 = bench::fpr_at_recall(scores, val_labels, 0.9);
  out.split = std::move(split);
  return out;
}

DenseFeatureFn backbone_c2_features(const nas::ArchSpec& arch, const ParamStore& params) {
  BackboneT<float> bb{"backbone", 3, nas::arch_to_stages(arch)};
  DenseFeatureFn fn;
  fn.channels = bb.out_channels("C2");
  fn.maps = [arch, &params](const std::vector<Tensor>& images, const std::vector<i64>& idx) {
    BackboneT<float> bb2{"backbone", 3, nas::arch_to_stages(arch)};
    Tape tape;
    Binder bind(tape, const_cast<ParamStore&>(params), false);
    auto fm = bb2(bind, tape.constant(harness::make_batch(images, idx)));
    return tape.value(fm.at("C2"));
  };
  return fn;
}

DenseFeatureFn generalist_pixel_features(const generalist::Generalist& g) {
  DenseFeatureFn fn;
  const int dense = g.pixel_branch >= 0 ? g.pixel_branch : g.patch_branch;
  PTK_CHECK(dense >= 0, "generalist pixel features: no dense branch");
  fn.channels = g.branches[std::size_t(dense)].source.backbone().out_channels("C2");
  fn.maps = [&g](const std::vector<Tensor>& images, const std::vector<i64>& idx) {
    Tape tape;
    Binder bind(tape, const_cast<ParamStore&>(g.params), false);
    auto feats = generalist::forward_branches(g, bind, tape.constant(harness::make_batch(images, idx)));
    auto repr = generalist::unified_pixel_repr(g, feats);
    return tape.value(repr.at("C2"));
  };
  return fn;
}

double depth_rmse(const DenseFeatureFn& features, const harness::DenseDataset& depth,
                  u64 seed, i64 steps, i64 batch, double lr) {
  ParamStore head_params;
  Rng rng(fnv1a("depth-head", seed));
  DepthHeadT<float> head{"dhead", features.channels, 16};
  head.init(head_params, rng);
  OptConfig oc;
  oc.kind = OptKind::AdamW;
  Optimizer opt(oc);

  // the extractor is frozen: compute every needed feature map once
  std::map<i64, Tensor> cache;
  auto cache_maps = [&](const std::vector<i64>& idx) {
    const i64 chunk = 16;
    std::vector<i64> missing;
    for (i64 i : idx)
      if (!cache.count(i)) missing.push_back(i);
    for (std::size_t start = 0; start < missing.size(); start += chunk) {
      std::vector<i64> pick(missing.begin() + i64(start),
                            missing.begin() + i64(std::min(missing.size(), start + chunk)));
      const Tensor maps = features.maps(depth.images, pick);
      const i64 per = maps.numel() / i64(pick.size());
      for (std::size_t r = 0; r < pick.size(); ++r) {
        Tensor one({1, maps.shape[1], maps.shape[2], maps.shape[3]});
        std::copy(maps.data.begin() + i64(r) * per, maps.data.begin() + i64(r + 1) * per,
                  one.data.begin());
        cache[pick[r]] = std::move(one);
      }
    }
  };
  cache_maps(depth.train_idx);
  cache_maps(depth.val_idx);

  auto batch_maps = [&](const std::vector<i64>& pick) {
    const Tensor& first = cache.at(pick[0]);
    Tensor out({i64(pick.size()), first.shape[1], first.shape[2], first.shape[3]});
    const i64 per = first.numel();
    for (std::size_t i = 0; i < pick.size(); ++i) {
      const Tensor& m = cache.at(pick[i]);
      std::copy(m.data.begin(), m.data.end(), out.data.begin() + i64(i) * per);
    }
    return out;
  };

  auto target_at_stride4 = [&](const std::vector<i64>& pick) {
    Tensor t({i64(pick.size()), 1, 16, 16});
    for (std::size_t i = 0; i < pick.size(); ++i) {
      const auto& m = depth.maps[std::size_t(pick[i])];
      for (i64 y = 0; y < 16; ++y)
        for (i64 x = 0; x < 16; ++x)
          t.at4(i64(i), 0, y, x) = m.at3(0, y * 4, x * 4);
    }
    return t;
  };

  for (i64 step = 0; step < steps; ++step) {
    std::vector<i64> pick;
    for (i64 i = 0; i < batch; ++i)
      pick.push_back(depth.train_idx[std::size_t(rng.uniform_int(i64(depth.train_idx.size())))]);
    Tape tape;
    Binder bind(tape, head_params, /*training=*/true);
    Var pred = head(bind, tape.constant(batch_maps(pick)));
    Var loss = mse_loss(pred, tape.constant(target_at_stride4(pick)));
    tape.backward(loss);
    auto grads = bind.gradients();
    opt.step(head_params, grads, lr);
  }

  // validation RMSE at stride 4, all cells valid
  std::vector<double> preds, gts;
  const i64 chunk = 16;
  for (std::size_t start = 0; start < depth.val_idx.size(); start += chunk) {
    std::vector<i64> pick(depth.val_idx.begin() + i64(start),
                          depth.val_idx.begin() + i64(std::min(depth.val_idx.size(), start + chunk)));
    Tape tape;
    Binder bind(tape, head_params, false);
    const Tensor out = tape.value(head(bind, tape.constant(batch_maps(pick))));
    const Tensor gt = target_at_stride4(pick);
    for (i64 i = 0; i < out.numel(); ++i) {
      preds.push_back(double(out[i]));
      gts.push_back(double(gt[i]));
    }
  }
  return bench::rmse_depth(preds, gts, std::vector<bool>(preds.size(), true));
}

// --------------------------------------------------------------- stage runner

namespace {

void write_loss_log(const std::string& path, const std::vector<double>& losses) {
  std::ofstream f(path);
  PTK_CHECK(f.good(), "cannot write log: " << path);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    nlohmann::json j;
    j["step"] = i;
    j["loss"] = losses[i];
    f << j.dump() << '\n';
  }
}

nas::ArchSpec arch_from_options(const std::map<std::string, std::string>& options) {
  const std::string path = opt_str(options, "arch", "");
  return path.empty() ? default_arch() : nas::load_arch(path);
}

std::vector<std::string> run_amateur(const harness::RunSpec& spec, const std::string& out) {
  const auto& o = spec.options;
  auto corpus = harness::gen_multimodal(spec.seed, opt_i64(o, "corpus", 400));
  nas::ArchSpec arch = arch_from_options(o);

  amateur::GlobalPhaseConfig gcfg;
  gcfg.steps = opt_i64(o, "steps", 240);
  gcfg.batch = opt_i64(o, "batch", 12);
  gcfg.lr = opt_dbl(o, "lr", 2e-3);
  gcfg.alpha = opt_dbl(o, "alpha", 0.5);
  gcfg.tau_init = opt_dbl(o, "tau_init", 0.07);
  gcfg.embed_dim = opt_i64(o, "embed_dim", 32);
  gcfg.queue_capacity = std::size_t(opt_i64(o, "queue_capacity", 512));
  gcfg.monitor_threshold = opt_dbl(o, "monitor_threshold", 0.5);
  gcfg.seed = spec.seed;
  auto global_phase = amateur::train_global_phase(arch, corpus, gcfg);

  amateur::LocalPhaseConfig lcfg;
  lcfg.steps = opt_i64(o, "local_steps", 80);
  lcfg.proposals_per_image = opt_i64(o, "proposal_count", 8);
  lcfg.ema_momentum = opt_dbl(o, "ema_momentum", 0.99);
  lcfg.seed = spec.seed;
  auto local_phase = amateur::train_local_phase(arch, global_phase.params, corpus, lcfg);

  // full amateur model: the global-phase encoders plus the local adapters
  ParamStore merged = global_phase.params.clone();
  for (const auto& name : local_phase.params.names())
    if (!merged.has(name)) merged.add(name, local_phase.params.get(name), local_phase.params.trainable(name));

  const std::string ckpt = out + "/amateur.ckpt";
  save_amateur(ckpt, arch, merged);
  const std::string log = out + "/amateur_log.jsonl";
  write_loss_log(log, global_phase.losses);
  return {ckpt, log};
}

std::vector<std::string> run_expert(const harness::RunSpec& spec, const std::string& out) {
  const auto& o = spec.options;
  const std::string task = opt_str(o, "task", "cls");
  auto suite = harness::gen_task_suite(spec.seed, opt_i64(o, "corpus", 400));
  nas::ArchSpec arch = arch_from_options(o);

  ParamStore init;
  const std::string init_path = opt_str(o, "init", "");
  if (!init_path.empty()) {
    LoadedModel m = load_model(init_path);
    PTK_CHECK(nas::arch_hash(m.arch) == nas::arch_hash(arch),
              "expert init: architecture mismatch with " << init_path);
    init = std::move(m.params);
  }

  expert::TrainConfig cfg;
  cfg.steps = opt_i64(o, "steps", 260);
  cfg.total_batch = opt_i64(o, "batch", 12);
  cfg.lr = opt_dbl(o, "lr", 2e-3);
  cfg.weight_decay = opt_dbl(o, "weight_decay", 1e-8);
  cfg.head_weight_decay = opt_dbl(o, "head_weight_decay", -1);
  cfg.seed = spec.seed;

  expert::Expert trained;
  if (task == "cls" || task == "classification") {
    std::vector<const harness::ClsDataset*> datasets;
    for (const auto& id : split_list(opt_str(o, "datasets", "syn-cls16")))
      datasets.push_back(cls_by_id(suite, id));
    std::vector<expert::SynonymPair> synonyms;
    for (const auto& pair : split_list(opt_str(o, "synonyms", ""))) {
      const auto eq = pair.find('=');
      PTK_CHECK(eq != std::string::npos, "bad synonym pair: " << pair);
      const auto a = split_list(pair.substr(0, eq), ':');
      const auto b = split_list(pair.substr(eq + 1), ':');
      PTK_CHECK(a.size() == 2 && b.size() == 2, "bad synonym pair: " << pair);
      synonyms.push_back({a[0], a[1], b[0], b[1]});
    }
    trained = expert::train_expert_cls(arch, init, datasets, cfg,
                                       scheme_from(opt_str(o, "scheme", "natural")), synonyms);
  } else if (task == "patch" || task == "patchwise") {
    trained = expert::train_expert_patch(arch, init, suite.det, cfg);
  } else if (task == "pixel" || task == "pixelwise") {
    trained = expert::train_expert_pixel(arch, init, suite.seg, cfg);
  } else {
    PTK_FAIL("unknown expert task: " << task);
  }
  const std::string ckpt = out + "/expert_" + expert::task_name(trained.task) + ".ckpt";
  save_expert(ckpt, trained);
  return {ckpt};
}

std::vector<std::string> run_generalist(const harness::RunSpec& spec, const std::string& out) {
  const auto& o = spec.options;
  auto suite = harness::gen_task_suite(spec.seed, opt_i64(o, "corpus", 400));
  std::vector<expert::Expert> experts;
  for (const auto& path : split_list(opt_str(o, "experts", "")))
    experts.push_back(expert_from_checkpoint(path));
  PTK_CHECK(experts.size() >= 2, "generalist: need --experts with at least two checkpoints");

  generalist::TrainConfig cfg;
  cfg.steps = opt_i64(o, "steps", 160);
  cfg.batch_per_task = opt_i64(o, "batch", 6);
  cfg.lr = opt_dbl(o, "lr", 1e-3);
  cfg.warmup = opt_i64(o, "warmup", -1);
  cfg.seed = spec.seed;
  auto g = generalist::train_generalist(
      experts, suite, cfg, generalist::scheme_from_name(opt_str(o, "scheme", "cross_level")),
      generalist::transfer_from_name(opt_str(o, "module", "non_linear")));
  const std::string ckpt = out + "/generalist.ckpt";
  save_generalist(ckpt, g);
  return {ckpt};
}

std::vector<std::string> run_adapt(const harness::RunSpec& spec, const std::string& out) {
  const auto& o = spec.options;
  auto suite = harness::gen_task_suite(spec.seed, opt_i64(o, "corpus", 400));
  LoadedModel init = load_model(opt_str(o, "init", ""));

  // stage 1 re-representer: load or train once on upstream data
  adapt::Codebook codebook;
  const std::string rr = opt_str(o, "rerepresenter", "train");
  if (rr == "train") {
    adapt::RerepresenterConfig rcfg;
    rcfg.codebook.codes = opt_i64(o, "codebook_size", 32);
    rcfg.codebook.beta = opt_dbl(o, "commitment_beta", 0.25);
    rcfg.seed = spec.seed;
    auto corpus = harness::gen_multimodal(spec.seed, opt_i64(o, "corpus", 400));
    std::vector<Tensor> imgs;
    for (const auto& s : corpus) imgs.push_back(s.image);
    codebook = adapt::train_rerepresenter(imgs, rcfg).codebook;
    CheckpointMeta meta;
    meta.stage = "rerepresenter";
    meta.extra["codes"] = std::to_string(rcfg.codebook.codes);
    meta.extra["code_dim"] = std::to_string(rcfg.codebook.code_dim);
    meta.extra["hidden"] = std::to_string(rcfg.codebook.hidden);
    meta.extra["beta"] = std::to_string(rcfg.codebook.beta);
    save_checkpoint(out + "/rerepresenter.ckpt", meta, codebook.params);
  } else {
    CheckpointMeta meta = load_checkpoint(rr, &codebook.params);
    PTK_CHECK(meta.stage == "rerepresenter", "not a rerepresenter checkpoint: " << rr);
    codebook.cfg.codes = std::stoll(meta.extra.at("codes"));
    codebook.cfg.code_dim = std::stoll(meta.extra.at("code_dim"));
    codebook.cfg.hidden = std::stoll(meta.extra.at("hidden"));
    codebook.cfg.beta = std::stod(meta.extra.at("beta"));
  }

  const auto* data = cls_by_id(suite, opt_str(o, "task", "syn-cls16"));
  const double percent = opt_dbl(o, "percent", 10.0);
  std::vector<i64> train_labels;
  for (i64 i : data->train_idx) train_labels.push_back(data->labels[std::size_t(i)]);
  auto split = bench::percentage_shot_split(train_labels, percent / 100.0, spec.seed);
  std::vector<i64> train_sel;
  for (i64 local : split.indices()) train_sel.push_back(data->train_idx[std::size_t(local)]);

  adapt::MfConfig cfg;
  cfg.stage3_steps = opt_i64(o, "stage3_steps", 160);
  cfg.stage3_batch = opt_i64(o, "batch", 16);
  cfg.stage4_steps = opt_i64(o, "stage4_steps", 40);
  cfg.stage4_batch = opt_i64(o, "batch", 8);
  cfg.contrastive = opt_str(o, "contrastive", "on") == "on";
  cfg.seed = spec.seed;
  auto res = adapt::multi_stage_finetune(init.arch, init.params, codebook, *data, train_sel,
                                         data->val_idx, cfg);

  const std::string log = out + "/adapt_search_log.jsonl";
  {
    std::ofstream f(log);
    for (const auto& e : res.log) {
      nlohmann::json j;
      j["lr"] = e.lr;
      j["wd"] = e.wd;
      j["val_accuracy"] = e.val_accuracy;
      f << j.dump() << '\n';
    }
  }
  CheckpointMeta meta;
  meta.stage = "adapt";
  meta.arch_hash = nas::arch_hash(init.arch);
  meta.extra["arch_text"] = nas::arch_to_text(init.arch);
  meta.extra["chosen_lr"] = std::to_string(res.chosen_lr);
  meta.extra["chosen_wd"] = std::to_string(res.chosen_wd);
  const std::string ckpt = out + "/adapt.ckpt";
  save_checkpoint(ckpt, meta, res.model);
  return {ckpt, log};
}

std::vector<std::string> run_benchmark(const harness::RunSpec& spec, const std::string& out) {
  const auto& o = spec.options;
  auto suite = harness::gen_task_suite(spec.seed, opt_i64(o, "corpus", 400));
  LoadedModel model = load_model(opt_str(o, "model", ""));
  const double percent = opt_dbl(o, "percent", 10.0);
  const std::string protocol_name = opt_str(o, "protocol", "lbfgs");
  bench::ProbeProtocol protocol = protocol_name == "sgd" ? bench::ProbeProtocol::sgd_default()
                                                         : bench::ProbeProtocol::lbfgs_default();
  if (protocol.strategy == bench::ProbeStrategy::SgdGrid) protocol.max_iterations = 200;

  std::vector<std::string> tasks = split_list(opt_str(o, "suite", "classification,depth"));

  FeatureFn features;
  DenseFeatureFn dense;
  if (model.stage == "generalist") {
    features = [&](const std::vector<Tensor>& im, const std::vector<i64>& idx) {
      return generalist_features(model.gen, im, idx);
    };
    dense = generalist_pixel_features(model.gen);
  } else {
    features = [&](const std::vector<Tensor>& im, const std::vector<i64>& idx) {
      return backbone_features(model.arch, model.params, im, idx);
    };
    dense = backbone_c2_features(model.arch, model.params);
  }

  std::vector<bench::MetricReport> reports;
  for (const auto& task : tasks) {
    if (task == "classification") {
      auto outcome = percentage_probe(features, suite.cls16, percent, spec.seed, protocol);
      bench::MetricReport r;
      r.dataset = suite.cls16.id;
      {
        std::ostringstream oss;
        oss << "percentage(p=" << percent / 100.0 << ",seed=" << spec.seed << ")";
        r.split = oss.str();
      }
      r.protocol = "linear_probe/" + protocol_name;
      r.values["accuracy"] = outcome.accuracy;
      r.values["mean_per_class"] = outcome.mean_per_class;
      r.values["fpr_at_recall90"] = outcome.fpr_at_recall90;
      r.seed = spec.seed;
      r.timestamp = logical_timestamp();
      reports.push_back(std::move(r));
    } else if (task == "depth") {
      const double rmse = depth_rmse(dense, suite.depth, spec.seed);
      bench::MetricReport r;
      r.dataset = suite.depth.id;
      r.split = "full";
      r.protocol = "frozen_features/depth_head";
      r.values["rmse"] = rmse;
      r.seed = spec.seed;
      r.timestamp = logical_timestamp();
      reports.push_back(std::move(r));
    } else {
      PTK_FAIL("benchmark: unknown suite task " << task);
    }
  }
  const std::string path = out + "/metrics.jsonl";
  bench::write_jsonl(path, reports);
  return {path};
}

std::vector<std::string> run_nas(const harness::RunSpec& spec, const std::string& out) {
  const auto& o = spec.options;
  nas::SearchSpace space = nas::SearchSpace::desk_default();
  const std::string space_path = opt_str(o, "space", "");
  if (!space_path.empty()) {
    std::ifstream f(space_path);
    PTK_CHECK(f.good(), "cannot open space file: " << space_path);
    nlohmann::json j;
    f >> j;
    space.base.clear();
    for (const auto& st : j.at("base"))
      space.base.push_back({st.at("repeats").get<i64>(), st.at("channels").get<i64>(),
                            st.at("stride").get<i64>()});
  }

  nas::SearchConfig cfg;
  cfg.budget = opt_i64(o, "budget", 40);
  cfg.topk = opt_i64(o, "topk", 5);
  cfg.alpha = opt_dbl(o, "alpha", -0.07);
  cfg.target_flops = opt_dbl(o, "target_flops", 0);
  cfg.resolution = opt_i64(o, "resolution", 64);
  cfg.seed = spec.seed;

  const std::string oracle_name = opt_str(o, "oracle", "surrogate");
  std::function<double(const nas::ArchSpec&)> oracle;
  harness::TaskSuite suite;
  if (oracle_name == "surrogate") {
    // deterministic stand-in: smooth gain with cost plus a stable per-genotype
    // jitter, so the search has structure without any training
    const double t = cfg.target_flops > 0 ? cfg.target_flops : 2e7;
    oracle = [t, &cfg](const nas::ArchSpec& a) {
      const double f = double(nas::flops(a, cfg.resolution));
      const double gain = 0.55 + 0.2 * std::tanh(std::log(f / t));
      const double jitter = double(nas::arch_hash(a) % 1000) / 1000.0 * 0.05;
      return std::min(1.0, std::max(0.0, gain + jitter));
    };
  } else if (oracle_name == "proxy-train") {
    // the proxy trains briefly at half resolution, which keeps early-stage
    // attention candidates (32x32 feature grids at full size) affordable
    suite = harness::gen_task_suite(spec.seed, opt_i64(o, "corpus", 200));
    auto downscale = [](const Tensor& img) {
      const i64 c = img.shape[0], side = img.shape[1];
      Tensor out({c, side / 2, side / 2});
      for (i64 ch = 0; ch < c; ++ch)
        for (i64 y = 0; y < side / 2; ++y)
          for (i64 x = 0; x < side / 2; ++x) {
            double s = 0;
            for (i64 dy = 0; dy < 2; ++dy)
              for (i64 dx = 0; dx < 2; ++dx)
                s += img.data[std::size_t((ch * side + 2 * y + dy) * side + 2 * x + dx)];
            out.data[std::size_t((ch * side / 2 + y) * side / 2 + x)] = float(s / 4.0);
          }
      return out;
    };
    auto proxy = std::make_shared<harness::ClsDataset>(suite.cls16);
    for (auto& img : proxy->images) img = downscale(img);
    oracle = [proxy, &spec](const nas::ArchSpec& a) {
      expert::TrainConfig tc;
      tc.steps = 24;
      tc.total_batch = 8;
      tc.seed = spec.seed;
      auto e = expert::train_expert_cls(a, ParamStore{}, {proxy.get()}, tc);
      auto features = [&](const std::vector<Tensor>& im, const std::vector<i64>& idx) {
        return backbone_features(a, e.params, im, idx);
      };
      auto outcome = percentage_probe(features, *proxy, 100.0, spec.seed,
                                      bench::ProbeProtocol::lbfgs_default());
      return outcome.accuracy;
    };
  } else {
    PTK_FAIL("nas: unknown oracle " << oracle_name);
  }

  const std::string log_path = out + "/nas_log.jsonl";
  std::ofstream log(log_path);
  auto top = nas::search(space, oracle, cfg, [&](i64 step, const nas::ScoredArch& s) {
    nlohmann::json j;
    j["step"] = step;
    j["tokens"] = s.tokens;
    j["flops"] = s.flops;
    j["acc"] = s.acc;
    j["reward"] = s.reward;
    log << j.dump() << '\n';
  });
  std::vector<std::string> artifacts = {log_path};
  for (std::size_t i = 0; i < top.size(); ++i) {
    const std::string path = out + "/arch_top" + std::to_string(i) + ".txt";
    nas::save_arch(path, top[i].arch);
    artifacts.push_back(path);
  }
  return artifacts;
}

}  // namespace

std::vector<std::string> run_stage(const harness::RunSpec& spec, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  if (spec.stage == "amateur") return run_amateur(spec, out_dir);
  if (spec.stage == "expert") return run_expert(spec, out_dir);
  if (spec.stage == "generalist") return run_generalist(spec, out_dir);
  if (spec.stage == "adapt") return run_adapt(spec, out_dir);
  if (spec.stage == "benchmark") return run_benchmark(spec, out_dir);
  if (spec.stage == "nas") return run_nas(spec, out_dir);
  PTK_FAIL("unknown stage: " << spec.stage);
}

}  // namespace ptk::pipeline
