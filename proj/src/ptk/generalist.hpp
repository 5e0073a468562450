#pragma once

// Multi-task unification of experts: each expert backbone becomes a branch,
// branches exchange features through zero-initialized knowledge-transfer
// modules (gradient-detached on the input side), and task heads run over
// unified representations. With modules at zero output, every branch's task
// forward reproduces its source expert bit-exactly.

#include "ptk/expert.hpp"

namespace ptk::generalist {

enum class BranchKind { ImageWise, PatchWise, PixelWise };
enum class TransferKind { NonLinear, Scalable, Channel, Attention, Policy, Gating, Nddr };
enum class ConnectionScheme { HardSharing, SameLevel, LowLevel, HighLevel, CrossLevel };

TransferKind transfer_from_name(const std::string& s);
ConnectionScheme scheme_from_name(const std::string& s);

struct Branch {
  BranchKind kind = BranchKind::ImageWise;
  std::string prefix;        // "br<i>."
  expert::Expert source;     // architecture, datasets and head layout
};

struct ModuleRef {
  int main = 0;      // target branch index
  int aux = 0;       // source branch index
  int level = 2;     // target stage C<level>
  std::vector<int> aux_levels;  // consumed source stages

  std::string name() const;
};

struct Generalist {
  std::vector<Branch> branches;
  ConnectionScheme scheme = ConnectionScheme::CrossLevel;
  TransferKind module_kind = TransferKind::NonLinear;
  std::vector<ModuleRef> modules;
  ParamStore params;

  int image_branch = -1, patch_branch = -1, pixel_branch = -1;

  const Branch& branch_of(BranchKind kind) const;
};

// Branches wired per the connection scheme; module output layers are
// zero-initialized so the build preserves each expert's forward exactly.
Generalist build_generalist(const std::vector<expert::Expert>& experts,
                            ConnectionScheme scheme = ConnectionScheme::CrossLevel,
                            TransferKind module_kind = TransferKind::NonLinear, u64 seed = 0);

// Lockstep forward of every branch with cross-branch fusion. Returns per-
// branch feature sets (C2..C5, post-fusion). When `responses` is non-null it
// collects each module's output alongside its main feature for diagnostics.
struct ModuleResponse {
  Var output;
  Var main_feature;
};
std::vector<FeatureMapSetT<float>> forward_branches(
    const Generalist& g, Binder& b, Var images,
    std::map<std::string, ModuleResponse>* responses = nullptr);

// Fused main-branch feature: main + module(aux features), aux detached.
Var transfer_forward(const Generalist& g, Binder& b, const ModuleRef& m, Var main_feat,
                     const std::vector<Var>& aux_feats);

// Unified representations. detach_foreign detaches every non-main slice (the
// training path for task losses); the plain call fuses without detachment.
Var unified_image_repr(const Generalist& g, const std::vector<FeatureMapSetT<float>>& feats,
                       int main_branch = -1);
FeatureMapSetT<float> unified_patch_repr(const Generalist& g, Binder& b,
                                         const std::vector<FeatureMapSetT<float>>& feats,
                                         bool detach_foreign = true);
FeatureMapSetT<float> unified_pixel_repr(const Generalist& g,
                                         const std::vector<FeatureMapSetT<float>>& feats);

// Image-task logits over the fused C5 (foreign slices detached), reproducing
// the source expert exactly at zero module init.
Var image_logits(const Generalist& g, Binder& b, const std::vector<FeatureMapSetT<float>>& feats,
                 const std::string& dataset);

// ----------------------------------------------------------------- training

struct TaskGroups {
  std::vector<expert::Group> image;   // classification groups
  std::vector<expert::Group> patch;   // detection groups
  std::vector<expert::Group> pixel;   // dense groups
};

struct GeneralistStepState {
  Optimizer image_opt, patch_opt, pixel_opt;
  LrSchedule image_sched, patch_sched, pixel_sched;
  i64 step = 0;

  GeneralistStepState(double lr, i64 total_steps, i64 warmup);
};

std::map<std::string, double> generalist_step(Generalist& g, const TaskGroups& groups,
                                              GeneralistStepState& state, Rng& rng);

struct TrainConfig {
  i64 steps = 150;
  i64 batch_per_task = 8;
  double lr = 1e-3;
  i64 warmup = -1;  // <0: max(10, 0.02*steps)
  u64 seed = 0;
};

Generalist train_generalist(const std::vector<expert::Expert>& experts,
                            const harness::TaskSuite& suite, const TrainConfig& cfg,
                            ConnectionScheme scheme = ConnectionScheme::CrossLevel,
                            TransferKind module_kind = TransferKind::NonLinear);

// Per-module distribution of |module output| / |main feature| L2 ratios per
// spatial position over probe batches; histogram mass sums to 1.
struct ResponseHistogram {
  std::vector<double> bin_edges;
  std::vector<double> mass;
  double mean_ratio = 0;
};
std::map<std::string, ResponseHistogram> response_stats(const Generalist& g,
                                                        const std::vector<Tensor>& probe_batches,
                                                        int bins = 16);

}  // namespace ptk::generalist
