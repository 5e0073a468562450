#pragma once

// Online loss monitoring with low-cost local resume: a spike above the rolling
// reference skips the batch and rolls parameters and optimizer state back ten
// iterations.

#include <deque>

#include "ptk/optim.hpp"

namespace ptk {

class LossMonitor {
 public:
  enum class Action { Proceed, SkipAndRollback };

  explicit LossMonitor(double threshold = 0.5, std::size_t depth = 10)
      : threshold_(threshold), depth_(depth) {}

  // Call with the batch loss before applying the update. Proceed: a snapshot
  // of the pre-update state was pushed and the loss recorded. SkipAndRollback:
  // params/opt were restored to the oldest ring entry (depth iterations back
  // once the ring is full); the caller must skip backward and update.
  Action step(double loss, ParamStore& params, std::vector<Optimizer*> opts) {
    if (!losses_.empty() && loss - reference() > threshold_) {
      const Snapshot& back = ring_.front();
      params.assign_from(back.params);
      for (std::size_t i = 0; i < opts.size(); ++i) opts[i]->restore(back.opts[i]);
      Snapshot keep = back;
      ring_.clear();
      ring_.push_back(std::move(keep));
      ++rollbacks_;
      return Action::SkipAndRollback;
    }
    Snapshot snap{params.clone(), {}};
    for (Optimizer* o : opts) snap.opts.push_back(o->snapshot());
    ring_.push_back(std::move(snap));
    if (ring_.size() > depth_) ring_.pop_front();
    losses_.push_back(loss);
    if (losses_.size() > depth_) losses_.pop_front();
    return Action::Proceed;
  }

  Action step(double loss, ParamStore& params, Optimizer& opt) {
    return step(loss, params, std::vector<Optimizer*>{&opt});
  }

  // Rolling reference: mean of the last `depth` recorded losses.
  double reference() const {
    PTK_CHECK(!losses_.empty(), "loss monitor: no recorded losses yet");
    double s = 0;
    for (double v : losses_) s += v;
    return s / double(losses_.size());
  }

  std::size_t ring_size() const { return ring_.size(); }
  std::size_t depth() const { return depth_; }
  i64 rollbacks() const { return rollbacks_; }

 private:
  struct Snapshot {
    ParamStore params;
    std::vector<Optimizer::State> opts;
  };

  double threshold_;
  std::size_t depth_;
  std::deque<double> losses_;
  std::deque<Snapshot> ring_;
  i64 rollbacks_ = 0;
};

}  // namespace ptk
