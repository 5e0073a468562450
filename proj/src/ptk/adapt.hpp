#pragma once

// Downstream adaptation: a vector-quantized autoencoder re-representer
// (trained once on upstream data, reused frozen), the four-stage fine-tuning
// pipeline with a log-spaced hyperparameter grid, sample-based contrastive
// regularization against supervision collapse, and the Frechet feature
// distance used to compare dataset similarity.

#include <deque>

#include "ptk/blocks.hpp"
#include "ptk/harness.hpp"
#include "ptk/losses.hpp"
#include "ptk/nas.hpp"

namespace ptk::adapt {

// ------------------------------------------------------------- re-representer

struct CodebookConfig {
  i64 codes = 128;       // K
  i64 code_dim = 8;      // d
  double beta = 0.25;    // commitment weight
  i64 hidden = 16;
};

// Non-adversarial vector-quantized autoencoder: stride-4 conv encoder, K code
// vectors, mirrored decoder. Quantization maps each latent position to its
// Euclidean-nearest code.
struct Codebook {
  CodebookConfig cfg;
  ParamStore params;

  void init(Rng& rng);
  Var encode(Binder& b, Var images) const;  // [N,d,H/4,W/4]
  Var decode(Binder& b, Var z) const;       // [N,3,H,W]

  // Nearest-code index per latent position (host-side scan).
  std::vector<i64> nearest_codes(const Tensor& latents_rows) const;  // rows [M,d]
};

struct RerepresenterConfig {
  CodebookConfig codebook;
  i64 steps = 200;
  i64 batch = 8;
  double lr = 2e-3;
  u64 seed = 0;
};

struct RerepresenterResult {
  Codebook codebook;
  std::vector<double> losses;       // total per step
  std::vector<double> recon_losses;
  i64 dead_codes = 0;               // codes never selected in the final sweep
  bool dead_code_warning = false;
};

RerepresenterResult train_rerepresenter(const std::vector<Tensor>& images,
                                        const RerepresenterConfig& cfg);

// decode(quantize(encode(x))) with the codebook fixed; deterministic.
Tensor rerepresent(const Tensor& images, const Codebook& codebook);
std::vector<Tensor> rerepresent(const std::vector<Tensor>& images, const Codebook& codebook);

// --------------------------------------------------------------- fine-tuning

struct MfConfig {
  // stage 3: head-only training on re-represented data
  i64 stage3_steps = 5000;
  i64 stage3_batch = 64;
  double stage3_lr_min = 1e-3, stage3_lr_max = 1.0;  // log-uniform draw
  double stage3_weight_decay = 1e-5;
  // stage 4: full fine-tune over a log-spaced grid
  i64 stage4_lr_grid = 5;
  i64 stage4_wd_grid = 4;
  double stage4_lr_min = 1e-5, stage4_lr_max = 1e-2;
  double stage4_wd_min = 1e-5, stage4_wd_max = 1e-3;
  i64 stage4_steps = 60;
  i64 stage4_batch = 8;
  bool contrastive = true;
  double contrastive_weight = 0.1;
  i64 history_capacity = 256;
  u64 seed = 0;
};

std::vector<double> log_spaced(double lo, double hi, i64 count);

struct Stage3Result {
  ParamStore model;       // backbone + trained head
  double sampled_lr = 0;  // the logged log-uniform draw
  double train_loss = 0;
};

// Frozen backbone, freshly initialized linear head trained on (typically
// re-represented) images. The backbone entries stay bit-identical.
Stage3Result mf_stage3(const nas::ArchSpec& arch, const ParamStore& pretrained,
                       const std::vector<Tensor>& images, const std::vector<i64>& labels,
                       i64 classes, const MfConfig& cfg);

struct GridEntry {
  double lr = 0, wd = 0;
  double val_accuracy = 0;
};

struct MfResult {
  ParamStore model;
  double chosen_lr = 0, chosen_wd = 0;
  double val_accuracy = 0;
  std::vector<GridEntry> log;  // one entry per grid cell, grid order
};

// Full-model fine-tune on original data over the stage-4 grid; selection by
// validation accuracy, ties toward smaller lr then smaller wd.
MfResult mf_stage4(const nas::ArchSpec& arch, const ParamStore& stage3_model,
                   const harness::ClsDataset& data, const std::vector<i64>& train_idx,
                   const std::vector<i64>& val_idx, const MfConfig& cfg);

// The whole pipeline on a classification dataset: re-represent the training
// split, stage 3 on it, stage 4 on the originals.
MfResult multi_stage_finetune(const nas::ArchSpec& arch, const ParamStore& pretrained,
                              const Codebook& codebook, const harness::ClsDataset& data,
                              const std::vector<i64>& train_idx,
                              const std::vector<i64>& val_idx, const MfConfig& cfg);

// Single-stage baseline: fresh head, one full fine-tune at fixed
// hyperparameters and the same per-run budget as one grid cell.
struct PlainFtResult {
  ParamStore model;
  double val_accuracy = 0;
};
PlainFtResult plain_finetune(const nas::ArchSpec& arch, const ParamStore& pretrained,
                             const harness::ClsDataset& data,
                             const std::vector<i64>& train_idx,
                             const std::vector<i64>& val_idx, const MfConfig& cfg,
                             double lr = 1e-3, double wd = 1e-4);

// --------------------------------------------------- sample-based contrastive

enum class Granularity { Image, Instance, Pixel };

Granularity granularity_from_name(const std::string& s);

struct SampleContrastiveState {
  Granularity granularity = Granularity::Image;
  ParamStore momentum;           // EMA twin of the online embedding path
  std::deque<Tensor> history;    // FIFO of past momentum features (unit rows)
  i64 capacity = 256;
  double tau = 0.2;
  double ema = 0.99;

  void push_history(const Tensor& rows);
  std::vector<Tensor> history_vec() const;
};

// Embedding heads for the three granularities over a stride-4 feature map:
// image pools globally, instance RoI-aligns crops through a single linear
// layer, pixel pools same-class positions through two 1x1 convolutions with
// a ReLU between. All emit unit-normalized rows.
void init_contrastive_head(ParamStore& store, Rng& rng, Granularity g, i64 cin,
                           i64 embed_dim);

Var image_granularity_embed(Binder& b, Var feats, i64 cin, i64 embed_dim);
Var instance_granularity_embed(Binder& b, Var feats, const std::vector<Roi>& crops, i64 cin,
                               i64 embed_dim);

struct PixelPoolRows {
  Var rows;                                   // [R, embed_dim], unit-normalized
  std::vector<std::pair<i64, i64>> owners;    // (sample, class) per row
};
// class_map: [N,1,h,w] integer class ids at the feature stride; rows appear
// for every (sample, class) pair present in the map.
PixelPoolRows pixel_granularity_embed(Binder& b, Var feats, const Tensor& class_map, i64 cin,
                                      i64 embed_dim);

// ---------------------------------------------------------------- FD score

// ||muA - muB||^2 + Tr(SA + SB - 2 (SA SB)^(1/2)), population covariance,
// matrix square roots by symmetric eigendecomposition with eigenvalues
// clamped at zero.
double fd_score(const std::vector<std::vector<double>>& feats_a,
                const std::vector<std::vector<double>>& feats_b);

}  // namespace ptk::adapt
