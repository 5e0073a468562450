#include "doctest.h"
#include "ptk/checkpoint.hpp"
#include "ptk/expert.hpp"

using namespace ptk;
using namespace ptk::expert;

namespace {

nas::ArchSpec tiny_arch() {
  std::vector<i64> tokens;
  for (int i = 0; i < 6; ++i) tokens.insert(tokens.end(), {0, 0, 2, 2});
  return nas::decode(tokens, nas::SearchSpace::desk_default());
}

std::vector<DatasetDescriptor> cls_descs(int count, int classes = 3) {
  std::vector<DatasetDescriptor> out;
  for (int d = 0; d < count; ++d) {
    DatasetDescriptor ds;
    ds.id = "ds" + std::to_string(d);
    ds.task = TaskType::Classification;
    for (int c = 0; c < classes; ++c) ds.label_names.push_back("c" + std::to_string(c));
    ds.sample_count = 100;
    out.push_back(ds);
  }
  return out;
}

}  // namespace

TEST_CASE("merge label spaces: natural is the per-dataset identity") {
  auto m = merge_label_spaces(cls_descs(2), MergeScheme::Natural);
  CHECK(m.per_dataset.at("ds0") == std::vector<i64>{0, 1, 2});
  CHECK(m.per_dataset.at("ds1") == std::vector<i64>{0, 1, 2});
}

TEST_CASE("merge label spaces: unified size is the sum of class counts") {
  auto descs = cls_descs(2);
  descs[0].label_names = {"cat", "dog", "car"};
  descs[1].label_names = {"tree", "bus", "cat2", "x"};
  auto m = merge_label_spaces(descs, MergeScheme::Unified);
  CHECK(m.global_size == 7);
  // injective into one global space
  std::set<i64> seen;
  for (const auto& [ds, map] : m.per_dataset)
    for (i64 g : map) CHECK(seen.insert(g).second);
}

TEST_CASE("merge label spaces: synonyms share a global index") {
  auto descs = cls_descs(2);
  descs[0].label_names = {"cat", "dog", "car"};
  descs[1].label_names = {"tree", "bus", "kitty", "x"};
  std::vector<SynonymPair> syn = {{"ds0", "cat", "ds1", "kitty"}};
  auto m = merge_label_spaces(descs, MergeScheme::PartiallyMerged, syn);
  CHECK(m.global_size == 6);  // 7 classes, one merged pair
  CHECK(m.per_dataset.at("ds0")[0] == m.per_dataset.at("ds1")[2]);
}

TEST_CASE("merge label spaces: unknown synonym class is an error") {
  auto descs = cls_descs(2);
  std::vector<SynonymPair> syn = {{"ds0", "nope", "ds1", "c0"}};
  CHECK_THROWS(merge_label_spaces(descs, MergeScheme::PartiallyMerged, syn));
}

TEST_CASE("largest remainder: 3:1 at quota 8 gives 6 and 2") {
  CHECK(largest_remainder_quotas({3, 1}, 8) == std::vector<i64>{6, 2});
  CHECK(largest_remainder_quotas({100}, 5) == std::vector<i64>{5});
  // quotas always sum to the requested total
  Rng rng(5);
  for (int it = 0; it < 50; ++it) {
    std::vector<i64> sizes;
    const int n = 1 + int(rng.uniform_int(5));
    for (int i = 0; i < n; ++i) sizes.push_back(1 + rng.uniform_int(1000));
    const i64 total = rng.uniform_int(64);
    auto q = largest_remainder_quotas(sizes, total);
    i64 sum = 0;
    for (i64 v : q) sum += v;
    CHECK(sum == total);
  }
}

TEST_CASE("partition batch: groups keyed by dataset, single dataset passthrough") {
  std::vector<TaggedSample> samples = {{"a", 0}, {"b", 1}, {"a", 2}, {"a", 3}};
  auto groups = partition_batch(samples);
  CHECK(groups.size() == 2);
  CHECK(groups.at("a") == std::vector<i64>{0, 2, 3});
  CHECK(groups.at("b") == std::vector<i64>{1});
}

TEST_CASE("build expert: structure and trunk reuse") {
  auto arch = tiny_arch();
  ParamStore init;
  {
    Rng rng(1);
    BackboneT<float> bb{"backbone", 3, nas::arch_to_stages(arch)};
    bb.init(init, rng);
  }
  auto descs = cls_descs(3);
  Expert e = build_expert(TaskType::Classification, descs, arch, init);
  // three heads, one trunk initialized from the checkpoint
  int heads = 0;
  for (const auto& name : e.params.names())
    if (name.rfind("head.", 0) == 0 && name.find(".fc.w") != std::string::npos) ++heads;
  CHECK(heads == 3);
  for (const auto& name : init.names())
    CHECK(bit_equal(init.get(name), e.params.get(name)));

  // trunk parameter count independent of dataset count
  Expert e1 = build_expert(TaskType::Classification, cls_descs(1), arch, init);
  auto count_trunk = [](const Expert& ex) {
    i64 c = 0;
    for (const auto& n : ex.params.names())
      if (n.rfind("backbone.", 0) == 0) c += ex.params.get(n).numel();
    return c;
  };
  CHECK(count_trunk(e) == count_trunk(e1));
}

TEST_CASE("build expert: task type mismatch is an error") {
  auto descs = cls_descs(2);
  descs[1].task = TaskType::Pixelwise;
  CHECK_THROWS(build_expert(TaskType::Classification, descs, tiny_arch(), ParamStore{}));
}

TEST_CASE("expert step: foreign heads receive exactly zero gradient") {
  auto arch = tiny_arch();
  auto suite = harness::gen_task_suite(31, 24);
  Expert e = build_expert(TaskType::Classification, cls_descs(2, 16), arch, ParamStore{});

  // one group for ds0 only; ds1's head must not move beyond decay (wd=0 here)
  Group g;
  g.dataset = "ds0";
  g.images = harness::make_batch(suite.cls16.images, {0, 1, 2, 3});
  g.labels = {suite.cls16.labels[0], suite.cls16.labels[1], suite.cls16.labels[2],
              suite.cls16.labels[3]};

  ParamStore before = e.params.clone();
  OptConfig oc;
  oc.kind = OptKind::AdamW;
  oc.weight_decay = 0.0;
  Optimizer opt(oc);
  StepOptions so;
  so.lr = 1e-2;
  expert_step(e, {g}, opt, so);

  bool head0_moved = false;
  for (const auto& name : e.params.names_with_prefix("head.ds0."))
    head0_moved = head0_moved || !bit_equal(before.get(name), e.params.get(name));
  CHECK(head0_moved);
  for (const auto& name : e.params.names_with_prefix("head.ds1."))
    CHECK(bit_equal(before.get(name), e.params.get(name)));
}

TEST_CASE("expert step: identical groups give identical head gradients") {
  auto arch = tiny_arch();
  auto suite = harness::gen_task_suite(32, 16);
  Expert e = build_expert(TaskType::Classification, cls_descs(2, 16), arch, ParamStore{});
  Group g0, g1;
  g0.dataset = "ds0";
  g1.dataset = "ds1";
  g0.images = harness::make_batch(suite.cls16.images, {0, 1, 2});
  g1.images = g0.images;
  g0.labels = {suite.cls16.labels[0], suite.cls16.labels[1], suite.cls16.labels[2]};
  g1.labels = g0.labels;

  // equalize the two heads first so their outputs (and so gradients) agree
  for (const auto& name : e.params.names_with_prefix("head.ds1."))
    e.params.get(name) = e.params.get("head.ds0." + name.substr(9));

  OptConfig oc;
  oc.kind = OptKind::SgdNesterov;
  oc.momentum = 0;
  oc.weight_decay = 0;
  Optimizer opt(oc);
  StepOptions so;
  so.lr = 0.5;
  expert_step(e, {g0, g1}, opt, so);
  for (const auto& name : e.params.names_with_prefix("head.ds0.")) {
    const auto& a = e.params.get(name);
    const auto& b = e.params.get("head.ds1." + name.substr(9));
    CHECK(bit_equal(a, b));  // identical updates from identical groups
  }
}

TEST_CASE("expert step: near-zero weight decay default") {
  CHECK(TrainConfig{}.weight_decay == 1e-8);
}

TEST_CASE("expert: determinism of a short classification run") {
  auto arch = tiny_arch();
  auto suite = harness::gen_task_suite(33, 32);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.total_batch = 6;
  cfg.seed = 4;
  std::vector<const harness::ClsDataset*> ds = {&suite.cls_shape, &suite.cls_color};
  Expert a = train_expert_cls(arch, ParamStore{}, ds, cfg);
  Expert b = train_expert_cls(arch, ParamStore{}, ds, cfg);
  CHECK(params_bit_equal(a.params, b.params));
}

TEST_CASE("expert: unified and partially merged schemes train") {
  auto arch = tiny_arch();
  auto suite = harness::gen_task_suite(34, 24);
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.total_batch = 6;
  std::vector<const harness::ClsDataset*> ds = {&suite.cls_shape, &suite.cls_color};
  Expert uni = train_expert_cls(arch, ParamStore{}, ds, cfg, MergeScheme::Unified);
  CHECK(uni.mapping.global_size == 8);
  std::vector<SynonymPair> syn = {{"syn-shape", "c0", "syn-color", "c1"}};
  Expert part = train_expert_cls(arch, ParamStore{}, ds, cfg, MergeScheme::PartiallyMerged, syn);
  CHECK(part.mapping.global_size == 7);
  CHECK(part.mapping.per_dataset.at("syn-shape")[0] == part.mapping.per_dataset.at("syn-color")[1]);
}

TEST_CASE("expert: patchwise and pixelwise trainers run and stay finite") {
  auto arch = tiny_arch();
  auto suite = harness::gen_task_suite(35, 20);
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.total_batch = 3;
  Expert det = train_expert_patch(arch, ParamStore{}, suite.det, cfg);
  CHECK(det.task == TaskType::Patchwise);
  bool has_fpn = false;
  for (const auto& n : det.params.names()) has_fpn = has_fpn || n.rfind("fpn.", 0) == 0;
  CHECK(has_fpn);
  Expert seg = train_expert_pixel(arch, ParamStore{}, suite.seg, cfg);
  CHECK(seg.task == TaskType::Pixelwise);
  for (const auto& n : seg.params.names()) CHECK(seg.params.get(n).all_finite());
}

TEST_CASE("level_for_box: deterministic size rule") {
  CHECK(level_for_box(0, 0, 10, 10) == 2);
  CHECK(level_for_box(0, 0, 20, 20) == 3);
  CHECK(level_for_box(0, 0, 40, 40) == 4);
  CHECK(level_for_box(0, 0, 64, 64) == 5);
}
