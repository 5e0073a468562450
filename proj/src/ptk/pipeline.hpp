#pragma once

// End-to-end orchestration: stage runners behind the CLI, checkpoint
// (de)serialization of stage models, probe feature extraction and the
// benchmark driver. Everything is seeded and hermetic on the synthetic suite.

#include "ptk/adapt.hpp"
#include "ptk/amateur.hpp"
#include "ptk/bench.hpp"
#include "ptk/checkpoint.hpp"
#include "ptk/expert.hpp"
#include "ptk/generalist.hpp"
#include "ptk/harness.hpp"

namespace ptk::pipeline {

// The desk-scale default backbone used when no architecture file is given.
nas::ArchSpec default_arch();

// ------------------------------------------------------------ checkpoint i/o

void save_amateur(const std::string& path, const nas::ArchSpec& arch, const ParamStore& params);
void save_expert(const std::string& path, const expert::Expert& e);
void save_generalist(const std::string& path, const generalist::Generalist& g);

struct LoadedModel {
  std::string stage;  // amateur | expert | generalist | adapt
  nas::ArchSpec arch;
  ParamStore params;
  // populated per stage
  expert::Expert expert;
  generalist::Generalist gen;
};
LoadedModel load_model(const std::string& path);
expert::Expert expert_from_checkpoint(const std::string& path);

// --------------------------------------------------------------- extraction

// GAP(C5) rows from a plain backbone.
std::vector<std::vector<double>> backbone_features(const nas::ArchSpec& arch,
                                                   const ParamStore& params,
                                                   const std::vector<Tensor>& images,
                                                   const std::vector<i64>& idx);

// Concatenated per-branch GAP(C5) rows after cross-branch fusion.
std::vector<std::vector<double>> generalist_features(const generalist::Generalist& g,
                                                     const std::vector<Tensor>& images,
                                                     const std::vector<i64>& idx);

// ------------------------------------------------------------ probe helpers

struct ProbeOutcome {
  double accuracy = 0;
  double mean_per_class = 0;
  double fpr_at_recall90 = 0;
  bench::Split split;
};

using FeatureFn = std::function<std::vector<std::vector<double>>(
    const std::vector<Tensor>&, const std::vector<i64>&)>;

// Percentage-shot linear probe on a classification dataset: split the train
// side per class, fit the probe, evaluate on the validation indices.
ProbeOutcome percentage_probe(const FeatureFn& features, const harness::ClsDataset& data,
                              double percent, u64 seed,
                              const bench::ProbeProtocol& protocol);

// Depth evaluation on a held-out dense task: trains a small conv head on
// frozen stride-4 feature maps and reports validation RMSE at that stride.
struct DenseFeatureFn {
  // returns the stride-4 feature map [N,C,16,16] for the given images
  std::function<Tensor(const std::vector<Tensor>&, const std::vector<i64>&)> maps;
  i64 channels = 0;
};
double depth_rmse(const DenseFeatureFn& features, const harness::DenseDataset& depth,
                  u64 seed, i64 steps = 160, i64 batch = 8, double lr = 2e-3);

DenseFeatureFn backbone_c2_features(const nas::ArchSpec& arch, const ParamStore& params);
DenseFeatureFn generalist_pixel_features(const generalist::Generalist& g);

// ------------------------------------------------------------- stage runners

// One call per CLI subcommand; options are the validated string map from the
// run spec. Returns the artifact paths written.
std::vector<std::string> run_stage(const harness::RunSpec& spec, const std::string& out_dir);

}  // namespace ptk::pipeline
