#pragma once

// Percentage-shot and k-shot splitting, linear-probe protocols (SGD grid and
// full-batch quasi-Newton), and the metric suite: accuracy, mean-per-class,
// one-vs-rest FPR at recall, AP at IoU 0.5, miss rate at FPPI, mIoU and
// masked RMSE. All functions are pure and deterministic.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "ptk/common.hpp"
#include "ptk/rng.hpp"

namespace ptk::bench {

// -------------------------------------------------------------------- splits

struct Split {
  std::string dataset;
  std::string mode;  // "percentage" | "n_way_k_shot" | "full"
  double p = 1.0;
  i64 k = 0;
  u64 seed = 0;
  std::map<i64, std::vector<i64>> per_class;  // class -> selected sample indices
  bool truncated = false;                     // k-shot: some class had < k samples

  std::vector<i64> indices() const;
  i64 total() const;
};

// Per-class seeded shuffle, first floor(p * n_c) selected. The selection for a
// smaller p is a prefix of the selection for a larger p under the same seed.
Split percentage_shot_split(const std::vector<i64>& labels, double p, u64 seed);

// Exactly min(k, n_c) per class; sets `truncated` when any class undershoots.
Split n_way_k_shot_split(const std::vector<i64>& labels, i64 k, u64 seed);

// --------------------------------------------------------------- linear probe

enum class ProbeStrategy { SgdGrid, QuasiNewtonFullBatch };

struct ProbeProtocol {
  ProbeStrategy strategy = ProbeStrategy::QuasiNewtonFullBatch;
  // sgd grid
  std::vector<double> lr_grid;        // default: 4 log-spaced in [1e-4, 0.1]
  std::vector<double> wd_grid;        // default: 4 log-spaced in [1e-6, 1e-3]
  std::vector<double> momentum_grid = {0.9, 0.99};
  i64 max_iterations = 10000;
  i64 batch = 64;
  // quasi-Newton
  i64 qn_max_iterations = 1000;
  std::vector<double> qn_reg_grid = {1e-4, 1e-2, 1.0};

  static ProbeProtocol sgd_default();
  static ProbeProtocol lbfgs_default();
};

struct ProbeGridEntry {
  double lr = 0, wd = 0, momentum = 0, reg = 0;
  double val_accuracy = 0;
};

struct ProbeResult {
  std::vector<std::vector<double>> weights;  // [D+1][C], last row is the bias
  double val_accuracy = 0;
  ProbeGridEntry chosen;
  std::vector<ProbeGridEntry> log;
};

// Multinomial logistic head on frozen features. Best grid cell by validation
// accuracy; ties prefer smaller lr then smaller wd (or smaller regularizer).
ProbeResult linear_probe(const std::vector<std::vector<double>>& train_features,
                         const std::vector<i64>& train_labels,
                         const std::vector<std::vector<double>>& val_features,
                         const std::vector<i64>& val_labels, const ProbeProtocol& protocol,
                         i64 classes);

std::vector<i64> probe_predict(const ProbeResult& head,
                               const std::vector<std::vector<double>>& features);

// ------------------------------------------------------------------- metrics

double accuracy(const std::vector<i64>& preds, const std::vector<i64>& labels);
double mean_per_class(const std::vector<i64>& preds, const std::vector<i64>& labels);

// One-vs-rest FPR at required recall, averaged over classes with positives;
// classes without positives are skipped (counted via *skipped). Thresholds
// come from the observed scores plus -inf; score >= threshold is positive.
double fpr_at_recall(const std::vector<std::vector<double>>& scores,
                     const std::vector<i64>& labels, double recall, i64* skipped = nullptr);

struct ScoredBox {
  std::array<double, 4> box{};
  double score = 0;
};

struct DetectionSet {
  std::vector<std::vector<ScoredBox>> predictions;            // per image
  std::vector<std::vector<std::array<double, 4>>> ground_truth;  // per image
};

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

// Greedy score-ordered matching at IoU >= 0.5, one match per ground truth,
// all-point interpolated average precision.
double ap50(const DetectionSet& dets);

struct MissRateReport {
  std::vector<double> fppi_points;
  std::vector<double> miss_rates;      // at the largest threshold with FPPI <= point
  double log_average = 1.0;            // geometric mean over 9 log-spaced points in [1e-2, 1]
};
MissRateReport mr_at_fppi(const DetectionSet& dets, const std::vector<double>& fppi_points);

// Mean IoU over classes present in gt or prediction.
double miou(const std::vector<std::vector<i64>>& pred_maps,
            const std::vector<std::vector<i64>>& gt_maps, i64 num_classes);

double rmse_depth(const std::vector<double>& pred, const std::vector<double>& gt,
                  const std::vector<bool>& valid_mask);

// -------------------------------------------------------------------- report

struct MetricReport {
  std::string dataset;
  std::string split;     // e.g. "percentage(p=0.10,seed=7)"
  std::string protocol;  // e.g. "linear_probe/lbfgs"
  std::map<std::string, double> values;
  u64 seed = 0;
  // logical timestamp: constant unless PTK_TIMESTAMP is set in the
  // environment, keeping metric files byte-reproducible
  std::string timestamp = "0";
};

std::string to_json_line(const MetricReport& report);
void write_jsonl(const std::string& path, const std::vector<MetricReport>& reports);
std::vector<MetricReport> read_jsonl(const std::string& path);

}  // namespace ptk::bench
