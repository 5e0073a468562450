#pragma once

// Single-task, multi-dataset pretraining: a shared trunk (backbone, plus a
// shared pyramid for patchwise tasks) with one head per dataset. Devices are
// simulated as sub-batch groups in one process; a single forward over the
// union batch makes plain batch norm exactly the globally synchronized
// variant. Label spaces can stay natural, be fully unified or merge only
// synonym classes.

#include "ptk/amateur.hpp"
#include "ptk/blocks.hpp"
#include "ptk/harness.hpp"
#include "ptk/nas.hpp"

namespace ptk::expert {

enum class TaskType { Classification, Patchwise, Pixelwise };

const char* task_name(TaskType t);
TaskType task_from_name(const std::string& s);

struct DatasetDescriptor {
  std::string id;
  TaskType task = TaskType::Classification;
  std::vector<std::string> label_names;  // unique within the dataset
  i64 sample_count = 0;

  void validate() const;
};

enum class MergeScheme { Natural, Unified, PartiallyMerged };

struct SynonymPair {
  std::string dataset_a, label_a;
  std::string dataset_b, label_b;
};

struct LabelSpaceMapping {
  MergeScheme scheme = MergeScheme::Natural;
  // dataset id -> local index -> global index. Natural mappings are the
  // identity into each dataset's own space.
  std::map<std::string, std::vector<i64>> per_dataset;
  i64 global_size = 0;  // merged space size (unified / partially merged)
};

LabelSpaceMapping merge_label_spaces(const std::vector<DatasetDescriptor>& datasets,
                                     MergeScheme scheme,
                                     const std::vector<SynonymPair>& synonyms = {});

// Largest-remainder quota allocation proportional to dataset sizes.
std::vector<i64> largest_remainder_quotas(const std::vector<i64>& sizes, i64 total);

// Samples tagged with a dataset id, grouped preserving input order.
struct TaggedSample {
  std::string dataset;
  i64 index = 0;
};
std::map<std::string, std::vector<i64>> partition_batch(const std::vector<TaggedSample>& samples);

// ------------------------------------------------------------------ expert

struct Expert {
  TaskType task = TaskType::Classification;
  nas::ArchSpec arch;
  std::vector<DatasetDescriptor> datasets;
  LabelSpaceMapping mapping;
  ParamStore params;
  i64 fpn_channels = 16;

  BackboneT<float> backbone() const { return {"backbone", 3, nas::arch_to_stages(arch)}; }
  FpnT<float> fpn() const;
  i64 head_classes(const DatasetDescriptor& ds) const;

  // Forward for one dataset group in a caller-provided binder context.
  Var cls_logits(Binder& b, Var c5, const std::string& dataset) const;
};

// Trunk from an init checkpoint (backbone and, when patchwise, pyramid
// entries are copied when present); heads are freshly initialized.
Expert build_expert(TaskType task, const std::vector<DatasetDescriptor>& datasets,
                    const nas::ArchSpec& arch, const ParamStore& init,
                    MergeScheme scheme = MergeScheme::Natural,
                    const std::vector<SynonymPair>& synonyms = {}, u64 seed = 0);

// One training group per dataset.
struct Group {
  std::string dataset;
  Tensor images;                                       // [N,3,H,W]
  std::vector<i64> labels;                             // classification
  std::vector<std::vector<harness::BoxAnnotation>> boxes;  // patchwise
  Tensor dense_map;                                    // pixelwise [N,1,H,W]
};

struct StepResult {
  std::map<std::string, double> losses;  // per dataset
  double total = 0;
};

struct StepOptions {
  double lr = 1e-3;
  double clip_norm = 0;  // pixelwise runs default to 4 in the trainer
  Rng* rng = nullptr;    // proposal jitter for patchwise groups
};

// Union forward with synchronized statistics, one head per group, summed
// loss, one optimizer step. Heads without a group receive no gradient.
StepResult expert_step(Expert& expert, const std::vector<Group>& groups, Optimizer& opt,
                       const StepOptions& options);

// ---------------------------------------------------------------- trainers

struct TrainConfig {
  i64 steps = 200;
  i64 total_batch = 12;
  double lr = 2e-3;
  double weight_decay = 1e-8;        // near-zero decay default
  double head_weight_decay = -1;     // <0: same as weight_decay
  u64 seed = 0;
};

Expert train_expert_cls(const nas::ArchSpec& arch, const ParamStore& init,
                        const std::vector<const harness::ClsDataset*>& datasets,
                        const TrainConfig& cfg, MergeScheme scheme = MergeScheme::Natural,
                        const std::vector<SynonymPair>& synonyms = {});

Expert train_expert_patch(const nas::ArchSpec& arch, const ParamStore& init,
                          const harness::DetDataset& dataset, const TrainConfig& cfg);

Expert train_expert_pixel(const nas::ArchSpec& arch, const ParamStore& init,
                          const harness::DenseDataset& dataset, const TrainConfig& cfg);

// Patchwise helpers shared with the generalist and the benchmark.
int level_for_box(double x1, double y1, double x2, double y2);
std::array<double, 4> box_deltas(const amateur::Proposal& p, const std::array<double, 4>& gt);

// Group losses over caller-provided features; the generalist reuses these
// with its own head prefixes.
Var patch_group_loss(Binder& b, const FeatureMapSetT<float>& pyramid, const Group& g,
                     const std::string& head_prefix, i64 fpn_ch, i64 classes_with_bg,
                     Rng& rng);
Var pixel_group_loss(Binder& b, Var c2, const Group& g, const std::string& head_prefix,
                     i64 cin, i64 classes);

}  // namespace ptk::expert
