#pragma once

// Unified architecture search: genotype encoding over 6 stages, analytic MAC
// cost model, weighted-product reward, a recurrent categorical controller
// trained with clipped-surrogate policy gradients, top-k retention and model
// scaling.

#include <functional>

#include "ptk/blocks.hpp"
#include "ptk/optim.hpp"

namespace ptk::nas {

// Per-stage decision slots, in order: operator, expansion, repeat shift,
// channel multiplier.
constexpr int kChoicesPerStage = 4;

struct SearchSpace {
  struct BaseStage {
    i64 repeats = 1;
    i64 channels = 8;
    i64 stride = 1;
  };
  std::vector<BaseStage> base;  // exactly 6 stages
  std::vector<OperatorKind> operators = {OperatorKind::DwConv, OperatorKind::SelfAttention};
  std::vector<i64> expansions = {2, 3, 4, 5, 6};
  std::vector<i64> repeat_shifts = {-2, -1, 0, 1, 2};
  std::vector<double> channel_mults = {0.5, 0.75, 1.0, 1.25, 1.5};
  i64 attention_window = 4;

  // The full pretraining space always has 6 stages; reduced spaces are legal
  // for small exhaustive experiments.
  void validate() const {
    PTK_CHECK(!base.empty(), "search space: no stages");
    PTK_CHECK(!operators.empty() && !expansions.empty() && !repeat_shifts.empty() &&
                  !channel_mults.empty(),
              "search space: empty option list");
  }

  int num_slots() const { return int(base.size()) * kChoicesPerStage; }

  i64 options_at(int slot) const {
    switch (slot % kChoicesPerStage) {
      case 0: return i64(operators.size());
      case 1: return i64(expansions.size());
      case 2: return i64(repeat_shifts.size());
      default: return i64(channel_mults.size());
    }
  }

  static SearchSpace desk_default();
};

// Exact cardinality: product of per-slot option counts.
i64 space_size(const SearchSpace& space);

// Per-layer analytic MAC counts used by flops(); exposed for direct checks.
inline i64 conv_macs(i64 k, i64 cin, i64 cout, i64 h, i64 w) { return k * k * cin * cout * h * w; }
inline i64 attention_macs(i64 c, i64 tokens) { return 4 * c * c * tokens + 2 * tokens * tokens * c; }

struct ArchSpec {
  struct Stage {
    OperatorKind op = OperatorKind::DwConv;
    i64 expansion = 4;
    i64 repeats = 1;
    i64 channels = 8;
    i64 stride = 1;
    i64 window = 4;

    bool operator==(const Stage&) const = default;
  };
  std::vector<Stage> stages;

  bool operator==(const ArchSpec&) const = default;
};

// Tokens -> resolved spec via the relative-shift rule. repeats are floored
// at 1, channels at 1.
ArchSpec decode(const std::vector<i64>& tokens, const SearchSpace& space);

// Inverse of decode for specs inside the clamp-free range.
std::vector<i64> encode(const ArchSpec& spec, const SearchSpace& space);

// Analytic multiply-accumulate count at the given input resolution.
// Convolutions count k^2*Cin*Cout*H*W, attention counts its four projections
// plus the two T^2*c score/mix terms, the FFN its two projections. Bias,
// normalization and activations are not counted (MAC convention).
i64 flops(const ArchSpec& arch, i64 resolution);

// r(m) = acc * (f / t)^alpha: exact accuracy at the target cost, a strict
// penalty for exceeding it when alpha < 0.
double reward(double acc, double f, double t, double alpha);

// Stage records in a textual architecture description file.
std::string arch_to_text(const ArchSpec& arch);
ArchSpec arch_from_text(const std::string& text);
void save_arch(const std::string& path, const ArchSpec& arch);
ArchSpec load_arch(const std::string& path);
u64 arch_hash(const ArchSpec& arch);

// Backbone stages for a decoded architecture.
std::vector<StageSpec> arch_to_stages(const ArchSpec& arch);

// ------------------------------------------------------------- controller

struct Trajectory {
  std::vector<i64> tokens;
  std::vector<double> logps;  // one per slot
  double reward = 0;

  double total_logp() const {
    double s = 0;
    for (double v : logps) s += v;
    return s;
  }
};

// Single recurrent cell (tanh), hidden width 64, one categorical output head
// per decision slot. Input at each slot is the one-hot of the previous token.
class ControllerPolicy {
 public:
  explicit ControllerPolicy(const SearchSpace& space, u64 seed = 0, i64 hidden = 64);

  Trajectory sample(Rng& rng) const;
  std::vector<double> log_prob_of(const std::vector<i64>& tokens) const;
  // Probabilities of one slot given fixed previous tokens (diagnostics/tests).
  std::vector<double> slot_probs(const std::vector<i64>& prefix_tokens, int slot) const;

  // Clipped-surrogate policy-gradient step over a batch of trajectories.
  // The baseline is an exponential moving average of rewards, updated here.
  void ppo_update(const std::vector<Trajectory>& trajectories, double clip_eps = 0.2);

  double baseline() const { return baseline_; }
  const SearchSpace& space() const { return space_; }

 private:
  friend struct ControllerTestPeer;
  SearchSpace space_;
  i64 hidden_;
  i64 in_dim_;
  ParamStore params_;
  Optimizer opt_;
  double baseline_ = 0;
  bool baseline_init_ = false;
};

// ------------------------------------------------------------------ search

struct ScoredArch {
  ArchSpec arch;
  std::vector<i64> tokens;
  double acc = 0;
  double flops = 0;
  double reward = 0;
};

struct SearchConfig {
  i64 budget = 40;
  i64 topk = 5;  // default per the search pipeline
  i64 batch = 8; // trajectories per controller update
  double clip_eps = 0.2;
  double alpha = -0.07;
  double target_flops = 0;  // 0: median flops of the first batch
  i64 resolution = 64;
  u64 seed = 0;
};

// Samples `budget` architectures with the controller, scores each with the
// accuracy oracle and the reward, updates the controller between batches and
// returns the top-k distinct architectures by reward (descending). The log
// callback receives one entry per evaluated architecture.
std::vector<ScoredArch> search(
    const SearchSpace& space, const std::function<double(const ArchSpec&)>& oracle,
    const SearchConfig& cfg,
    const std::function<void(i64 step, const ScoredArch&)>& log = nullptr);

// Channels scaled by width (rounded to a multiple of 8, floor 8), repeats by
// ceil(depth * r). Resolution is untouched.
ArchSpec scale_model(const ArchSpec& base, double width_coeff, double depth_coeff);

}  // namespace ptk::nas
