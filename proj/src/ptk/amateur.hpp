#pragma once

// Task-agnostic multi-modal pretraining. Global phase: paired image/text
// encoders trained with grouped supervision (intra-modal cosine, masked-token
// prediction, cross-modal InfoNCE and similar-text retrieval from a FIFO
// queue) under loss monitoring with rollback. Local phase: a feature pyramid
// and head adapted on a frozen backbone with an online/target consistency
// objective over randomly assigned object proposals.

#include "ptk/blocks.hpp"
#include "ptk/harness.hpp"
#include "ptk/losses.hpp"
#include "ptk/monitor.hpp"
#include "ptk/nas.hpp"

namespace ptk::amateur {

// ------------------------------------------------------------ encoder pair

struct EncoderConfig {
  nas::ArchSpec arch;
  i64 embed_dim = 32;       // shared projection dim D
  i64 text_dim = 32;        // token feature width
  i64 vocab = harness::vocab::kSize;
  i64 caption_len = harness::vocab::kCaptionLen;
  double tau_init = 0.07;
};

// Image branch: backbone -> GAP(C5) -> projection -> L2 norm. Text branch:
// token embedding + learned positions -> one attention block -> mean pool ->
// projection -> L2 norm, plus a masked-token head over token features.
struct EncoderPair {
  EncoderConfig cfg;

  void init(ParamStore& store, Rng& rng) const;

  Var image_embed(Binder& b, Var images) const;  // [N,D], unit rows

  struct TextForward {
    Var embed;                    // [N,D], unit rows
    Var token_features;           // [N,T,text_dim]
  };
  TextForward text_forward(Binder& b, const std::vector<std::vector<i64>>& tokens) const;

  // Masked-language pass: masks ~15% of non-pad tokens (at least one), returns
  // logits over the vocabulary for masked positions plus their true ids.
  struct MlmForward {
    Var logits;                   // [M, vocab]
    std::vector<i64> targets;     // M true token ids
  };
  MlmForward text_mlm(Binder& b, const std::vector<std::vector<i64>>& tokens, Rng& rng) const;

  Var temperature(Binder& b) const;  // tau = exp(log_tau) > 0
};

// -------------------------------------------------------------- proposals

struct Proposal {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // image pixels
  int level = -1;                          // 2..5 after assignment

  void validate(i64 image_size) const {
    PTK_CHECK(x2 > x1 && y2 > y1, "proposal: degenerate box");
    PTK_CHECK(x1 >= 0 && y1 >= 0 && x2 <= double(image_size) && y2 <= double(image_size),
              "proposal: outside image bounds");
  }
};

// Seeded random boxes with area >= 1/64 of the image (selective-search
// stand-in).
std::vector<Proposal> gen_proposals(Rng& rng, i64 count, i64 image_size);

// Random pyramid assignment: P2..P5 i.i.d. with probabilities 0.1/0.2/0.3/0.4.
void assign_proposals(std::vector<Proposal>& proposals, Rng& rng);

// ------------------------------------------------------------ global phase

struct GlobalPhaseConfig {
  i64 steps = 240;
  i64 batch = 12;
  double lr = 2e-3;
  double alpha = 0.5;             // group-supervision mix
  double tau_init = 0.07;
  i64 embed_dim = 32;
  std::size_t queue_capacity = 512;
  double monitor_threshold = 0.5;
  u64 seed = 0;
};

struct GlobalPhaseResult {
  ParamStore params;
  std::vector<double> losses;
  i64 rollbacks = 0;
};

GlobalPhaseResult train_global_phase(const nas::ArchSpec& arch,
                      const std::vector<harness::MultimodalSample>& corpus,
                      const GlobalPhaseConfig& cfg);

// ------------------------------------------------------------- local phase

struct LocalPhaseConfig {
  i64 steps = 120;
  i64 batch = 4;
  i64 proposals_per_image = 8;  // default proposal budget
  double lr = 1e-3;
  double ema_momentum = 0.99;
  i64 fpn_channels = 16;
  i64 proj_dim = 16;
  u64 seed = 0;
};

struct LocalPhaseResult {
  ParamStore params;       // frozen backbone + adapted fpn/head/projector/predictor
  ParamStore target;       // EMA twin (fpn/head/projector)
  std::vector<double> losses;
};

// The backbone entries of `global_params` stay bit-identical: only the pyramid,
// head, projector and predictor train.
LocalPhaseResult train_local_phase(const nas::ArchSpec& arch, const ParamStore& global_params,
                      const std::vector<harness::MultimodalSample>& corpus,
                      const LocalPhaseConfig& cfg);

}  // namespace ptk::amateur
