#include "ptk/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>

#include "json.hpp"
#include "ptk/optim.hpp"

namespace ptk::bench {

// --------------------------------------------------------------------- splits

std::vector<i64> Split::indices() const {
  std::vector<i64> out;
  for (const auto& [cls, idx] : per_class) out.insert(out.end(), idx.begin(), idx.end());
  return out;
}

i64 Split::total() const {
  i64 n = 0;
  for (const auto& [cls, idx] : per_class) n += i64(idx.size());
  return n;
}

namespace {

std::map<i64, std::vector<i64>> shuffled_class_indices(const std::vector<i64>& labels,
                                                       u64 seed) {
  std::map<i64, std::vector<i64>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i64(i));
  for (auto& [cls, idx] : by_class) {
    Rng rng(fnv1a("split", seed) ^ u64(cls) * 0x9e3779b97f4a7c15ull);
    rng.shuffle(idx);
  }
  return by_class;
}

}  // namespace

Split percentage_shot_split(const std::vector<i64>& labels, double p, u64 seed) {
  PTK_CHECK(p > 0.0 && p <= 1.0, "percentage split: p outside (0,1]");
  Split out;
  out.mode = "percentage";
  out.p = p;
  out.seed = seed;
  for (auto& [cls, idx] : shuffled_class_indices(labels, seed)) {
    const i64 take = i64(std::floor(p * double(idx.size())));
    out.per_class[cls] = std::vector<i64>(idx.begin(), idx.begin() + take);
  }
  return out;
}

Split n_way_k_shot_split(const std::vector<i64>& labels, i64 k, u64 seed) {
  PTK_CHECK(k >= 1, "k-shot split: k must be >= 1");
  Split out;
  out.mode = "n_way_k_shot";
  out.k = k;
  out.seed = seed;
  for (auto& [cls, idx] : shuffled_class_indices(labels, seed)) {
    const i64 take = std::min<i64>(k, i64(idx.size()));
    if (take < k) out.truncated = true;
    out.per_class[cls] = std::vector<i64>(idx.begin(), idx.begin() + take);
  }
  return out;
}

// --------------------------------------------------------------- linear probe

ProbeProtocol ProbeProtocol::sgd_default() {
  ProbeProtocol p;
  p.strategy = ProbeStrategy::SgdGrid;
  for (int i = 0; i < 4; ++i) {
    p.lr_grid.push_back(std::exp(std::log(1e-4) + (std::log(0.1) - std::log(1e-4)) * i / 3.0));
    p.wd_grid.push_back(std::exp(std::log(1e-6) + (std::log(1e-3) - std::log(1e-6)) * i / 3.0));
  }
  return p;
}

ProbeProtocol ProbeProtocol::lbfgs_default() {
  ProbeProtocol p;
  p.strategy = ProbeStrategy::QuasiNewtonFullBatch;
  return p;
}

namespace {

struct SoftmaxData {
  const std::vector<std::vector<double>>* x;
  const std::vector<i64>* y;
  i64 classes;
  double l2 = 0;
};

// objective and gradient of multinomial logistic regression; w is [D+1][C]
// flattened, bias in the last row, bias excluded from the regularizer
double softmax_loss_grad(const SoftmaxData& data, const std::vector<double>& w,
                         std::vector<double>* grad) {
  const auto& xs = *data.x;
  const auto& ys = *data.y;
  const i64 n = i64(xs.size());
  const i64 d = i64(xs[0].size());
  const i64 c = data.classes;
  if (grad) grad->assign(std::size_t((d + 1) * c), 0.0);
  double loss = 0;
  std::vector<double> logits(std::size_t(c), 0.0);
  for (i64 i = 0; i < n; ++i) {
    for (i64 k = 0; k < c; ++k) {
      double s = w[std::size_t(d * c + k)];  // bias
      for (i64 j = 0; j < d; ++j) s += xs[std::size_t(i)][std::size_t(j)] * w[std::size_t(j * c + k)];
      logits[std::size_t(k)] = s;
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0;
    for (double v : logits) z += std::exp(v - mx);
    const i64 label = ys[std::size_t(i)];
    loss += (std::log(z) + mx - logits[std::size_t(label)]) / double(n);
    if (grad) {
      for (i64 k = 0; k < c; ++k) {
        const double pk = std::exp(logits[std::size_t(k)] - mx) / z;
        const double g = (pk - (k == label ? 1.0 : 0.0)) / double(n);
        (*grad)[std::size_t(d * c + k)] += g;
        for (i64 j = 0; j < d; ++j)
          (*grad)[std::size_t(j * c + k)] += g * xs[std::size_t(i)][std::size_t(j)];
      }
    }
  }
  // L2 regularizer on the weights
  for (i64 j = 0; j < d; ++j)
    for (i64 k = 0; k < c; ++k) {
      const double wv = w[std::size_t(j * c + k)];
      loss += 0.5 * data.l2 * wv * wv;
      if (grad) (*grad)[std::size_t(j * c + k)] += data.l2 * wv;
    }
  return loss;
}

std::vector<i64> predict_rows(const std::vector<double>& w,
                              const std::vector<std::vector<double>>& xs, i64 classes) {
  std::vector<i64> preds;
  if (xs.empty()) return preds;
  const i64 d = i64(xs[0].size());
  for (const auto& row : xs) {
    i64 best = 0;
    double best_v = -1e300;
    for (i64 k = 0; k < classes; ++k) {
      double s = w[std::size_t(d * classes + k)];
      for (i64 j = 0; j < d; ++j) s += row[std::size_t(j)] * w[std::size_t(j * classes + k)];
      if (s > best_v) {
        best_v = s;
        best = k;
      }
    }
    preds.push_back(best);
  }
  return preds;
}

double val_accuracy_of(const std::vector<double>& w,
                       const std::vector<std::vector<double>>& xs,
                       const std::vector<i64>& ys, i64 classes) {
  auto preds = predict_rows(w, xs, classes);
  i64 correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == ys[i]) ++correct;
  return preds.empty() ? 0.0 : double(correct) / double(preds.size());
}

std::vector<double> train_sgd_cell(const SoftmaxData& data, double lr, double wd,
                                   double momentum, i64 iterations, i64 batch, u64 seed) {
  const i64 d = i64(data.x->front().size());
  const i64 c = data.classes;
  const i64 n = i64(data.x->size());
  std::vector<double> w(std::size_t((d + 1) * c), 0.0);
  std::vector<double> vel(w.size(), 0.0);
  Rng rng(fnv1a("probe-sgd", seed));
  std::vector<std::vector<double>> xb;
  std::vector<i64> yb;
  for (i64 it = 0; it < iterations; ++it) {
    xb.clear();
    yb.clear();
    for (i64 b = 0; b < std::min(batch, n); ++b) {
      const i64 i = rng.uniform_int(n);
      xb.push_back((*data.x)[std::size_t(i)]);
      yb.push_back((*data.y)[std::size_t(i)]);
    }
    SoftmaxData bd{&xb, &yb, c, 0.0};
    std::vector<double> grad;
    softmax_loss_grad(bd, w, &grad);
    for (std::size_t j = 0; j < w.size(); ++j) {
      const bool is_bias = j >= std::size_t(d * c);
      const double g = grad[j] + (is_bias ? 0.0 : wd * w[j]);
      vel[j] = momentum * vel[j] + g;
      w[j] -= lr * (g + momentum * vel[j]);  // nesterov form
    }
  }
  return w;
}

}  // namespace

ProbeResult linear_probe(const std::vector<std::vector<double>>& train_features,
                         const std::vector<i64>& train_labels,
                         const std::vector<std::vector<double>>& val_features,
                         const std::vector<i64>& val_labels, const ProbeProtocol& protocol,
                         i64 classes) {
  PTK_CHECK(!train_features.empty() && train_features.size() == train_labels.size(),
            "linear_probe: bad training inputs");
  PTK_CHECK(classes >= 2, "linear_probe: need at least two classes");
  {
    std::set<i64> distinct(train_labels.begin(), train_labels.end());
    PTK_CHECK(distinct.size() >= 2, "linear_probe: degenerate single-class input");
  }
  const i64 d = i64(train_features[0].size());
  SoftmaxData data{&train_features, &train_labels, classes, 0.0};

  ProbeResult res;
  bool have_best = false;
  std::vector<double> best_w;
  auto consider = [&](const ProbeGridEntry& entry, std::vector<double> w) {
    res.log.push_back(entry);
    if (!have_best || entry.val_accuracy > res.val_accuracy) {
      res.val_accuracy = entry.val_accuracy;
      res.chosen = entry;
      best_w = std::move(w);
      have_best = true;
    }
  };

  if (protocol.strategy == ProbeStrategy::SgdGrid) {
    ProbeProtocol def = ProbeProtocol::sgd_default();
    const auto& lrs = protocol.lr_grid.empty() ? def.lr_grid : protocol.lr_grid;
    const auto& wds = protocol.wd_grid.empty() ? def.wd_grid : protocol.wd_grid;
    for (double lr : lrs)
      for (double wd : wds)
        for (double mom : protocol.momentum_grid) {
          auto w = train_sgd_cell(data, lr, wd, mom, protocol.max_iterations, protocol.batch,
                                  fnv1a("cell", u64(res.log.size())));
          ProbeGridEntry e{lr, wd, mom, 0,
                           val_accuracy_of(w, val_features, val_labels, classes)};
          consider(e, std::move(w));
        }
  } else {
    for (double reg : protocol.qn_reg_grid) {
      SoftmaxData cell = data;
      cell.l2 = reg;
      std::vector<double> w(std::size_t((d + 1) * classes), 0.0);
      lbfgs_minimize(
          [&](const std::vector<double>& x, std::vector<double>& g) {
            return softmax_loss_grad(cell, x, &g);
          },
          w, int(protocol.qn_max_iterations));
      ProbeGridEntry e{0, 0, 0, reg, val_accuracy_of(w, val_features, val_labels, classes)};
      consider(e, std::move(w));
    }
  }

  res.weights.assign(std::size_t(d + 1), std::vector<double>(std::size_t(classes), 0.0));
  for (i64 j = 0; j <= d; ++j)
    for (i64 k = 0; k < classes; ++k)
      res.weights[std::size_t(j)][std::size_t(k)] = best_w[std::size_t(j * classes + k)];
  return res;
}

std::vector<i64> probe_predict(const ProbeResult& head,
                               const std::vector<std::vector<double>>& features) {
  const i64 d = i64(head.weights.size()) - 1;
  const i64 c = i64(head.weights[0].size());
  std::vector<double> flat(std::size_t((d + 1) * c), 0.0);
  for (i64 j = 0; j <= d; ++j)
    for (i64 k = 0; k < c; ++k) flat[std::size_t(j * c + k)] = head.weights[std::size_t(j)][std::size_t(k)];
  return predict_rows(flat, features, c);
}

// --------------------------------------------------------------------- metrics

double accuracy(const std::vector<i64>& preds, const std::vector<i64>& labels) {
  PTK_CHECK(!preds.empty() && preds.size() == labels.size(), "accuracy: bad inputs");
  i64 correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++correct;
  return double(correct) / double(preds.size());
}

double mean_per_class(const std::vector<i64>& preds, const std::vector<i64>& labels) {
  PTK_CHECK(!preds.empty() && preds.size() == labels.size(), "mean_per_class: bad inputs");
  std::map<i64, std::pair<i64, i64>> per;  // class -> (correct, total)
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto& [correct, total] = per[labels[i]];
    ++total;
    if (preds[i] == labels[i]) ++correct;
  }
  double sum = 0;
  for (const auto& [cls, ct] : per) sum += double(ct.first) / double(ct.second);
  return sum / double(per.size());
}

double fpr_at_recall(const std::vector<std::vector<double>>& scores,
                     const std::vector<i64>& labels, double recall, i64* skipped) {
  PTK_CHECK(recall > 0.0 && recall <= 1.0, "fpr_at_recall: recall outside (0,1]");
  PTK_CHECK(!scores.empty() && scores.size() == labels.size(), "fpr_at_recall: bad inputs");
  const i64 classes = i64(scores[0].size());
  double sum = 0;
  i64 counted = 0, skip = 0;
  for (i64 c = 0; c < classes; ++c) {
    i64 pos = 0;
    for (i64 l : labels) pos += l == c ? 1 : 0;
    const i64 neg = i64(labels.size()) - pos;
    if (pos == 0) {
      ++skip;
      continue;
    }
    // candidate thresholds: every observed score (plus "accept all")
    std::vector<double> cands;
    for (const auto& row : scores) cands.push_back(row[std::size_t(c)]);
    cands.push_back(-std::numeric_limits<double>::infinity());
    double best_fpr = 1.0;
    bool feasible = false;
    for (double t : cands) {
      i64 tp = 0, fp = 0;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i][std::size_t(c)] >= t) {
          if (labels[i] == c)
            ++tp;
          else
            ++fp;
        }
      }
      if (double(tp) / double(pos) >= recall) {
        feasible = true;
        const double fpr = neg > 0 ? double(fp) / double(neg) : 0.0;
        best_fpr = std::min(best_fpr, fpr);
      }
    }
    PTK_CHECK(feasible, "fpr_at_recall: recall unreachable (internal)");
    sum += best_fpr;
    ++counted;
  }
  if (skipped) *skipped = skip;
  PTK_CHECK(counted > 0, "fpr_at_recall: every class lacked positives");
  return sum / double(counted);
}

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = ix * iy;
  const double ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

namespace {

struct FlatDet {
  std::size_t image;
  double score;
  std::size_t index;
};

// score-ordered greedy matching; returns per-detection tp flags and gt count
std::pair<std::vector<bool>, i64> match_detections(const DetectionSet& dets,
                                                   std::vector<FlatDet>* order_out = nullptr) {
  PTK_CHECK(dets.predictions.size() == dets.ground_truth.size(),
            "detections: image count mismatch");
  std::vector<FlatDet> flat;
  for (std::size_t img = 0; img < dets.predictions.size(); ++img)
    for (std::size_t d = 0; d < dets.predictions[img].size(); ++d) {
      const double s = dets.predictions[img][d].score;
      PTK_CHECK(s >= 0.0 && s <= 1.0, "detections: score outside [0,1]");
      flat.push_back({img, s, d});
    }
  std::stable_sort(flat.begin(), flat.end(), [](const FlatDet& a, const FlatDet& b) {
    return a.score > b.score;
  });
  i64 total_gt = 0;
  for (const auto& g : dets.ground_truth) total_gt += i64(g.size());
  std::vector<std::vector<bool>> gt_used(dets.ground_truth.size());
  for (std::size_t i = 0; i < gt_used.size(); ++i)
    gt_used[i].assign(dets.ground_truth[i].size(), false);
  std::vector<bool> tp(flat.size(), false);
  for (std::size_t k = 0; k < flat.size(); ++k) {
    const auto& det = dets.predictions[flat[k].image][flat[k].index];
    double best_iou = 0.5;
    int best_gt = -1;
    const auto& gts = dets.ground_truth[flat[k].image];
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[flat[k].image][g]) continue;
      const double ov = box_iou(det.box, gts[g]);
      if (ov >= best_iou) {
        best_iou = ov;
        best_gt = int(g);
      }
    }
    if (best_gt >= 0) {
      tp[k] = true;
      gt_used[flat[k].image][std::size_t(best_gt)] = true;
    }
  }
  if (order_out) *order_out = flat;
  return {tp, total_gt};
}

}  // namespace

double ap50(const DetectionSet& dets) {
  auto [tp, total_gt] = match_detections(dets);
  if (total_gt == 0) return 0.0;
  if (tp.empty()) return 0.0;
  // precision/recall staircase with all-point interpolation
  std::vector<double> precision, recall;
  i64 tps = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    if (tp[k]) ++tps;
    precision.push_back(double(tps) / double(k + 1));
    recall.push_back(double(tps) / double(total_gt));
  }
  for (int k = int(precision.size()) - 2; k >= 0; --k)
    precision[std::size_t(k)] = std::max(precision[std::size_t(k)], precision[std::size_t(k) + 1]);
  double ap = 0, prev_recall = 0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

MissRateReport mr_at_fppi(const DetectionSet& dets, const std::vector<double>& fppi_points) {
  PTK_CHECK(!dets.predictions.empty(), "mr_at_fppi: need at least one image");
  MissRateReport out;
  out.fppi_points = fppi_points;
  std::vector<FlatDet> order;
  auto [tp, total_gt] = match_detections(dets, &order);
  const double images = double(dets.predictions.size());

  // operating points after each detection in score order
  std::vector<double> fppi_curve, mr_curve;
  i64 tps = 0, fps = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (tp[k])
      ++tps;
    else
      ++fps;
    fppi_curve.push_back(double(fps) / images);
    mr_curve.push_back(total_gt > 0 ? 1.0 - double(tps) / double(total_gt) : 0.0);
  }

  auto mr_at = [&](double point) {
    // the largest threshold (fewest detections) is the baseline: no detections
    double mr = total_gt > 0 ? 1.0 : 0.0;
    for (std::size_t k = 0; k < fppi_curve.size(); ++k)
      if (fppi_curve[k] <= point) mr = mr_curve[k];
    return mr;
  };

  for (double p : fppi_points) out.miss_rates.push_back(mr_at(p));

  double product = 1.0;
  for (int i = 0; i < 9; ++i) {
    const double p = std::pow(10.0, -2.0 + 2.0 * double(i) / 8.0);  // 1e-2 .. 1
    product *= mr_at(p);
  }
  out.log_average = std::pow(product, 1.0 / 9.0);
  return out;
}

double miou(const std::vector<std::vector<i64>>& pred_maps,
            const std::vector<std::vector<i64>>& gt_maps, i64 num_classes) {
  PTK_CHECK(pred_maps.size() == gt_maps.size() && !pred_maps.empty(), "miou: bad inputs");
  std::vector<i64> inter(std::size_t(num_classes), 0), uni(std::size_t(num_classes), 0);
  for (std::size_t m = 0; m < pred_maps.size(); ++m) {
    PTK_CHECK(pred_maps[m].size() == gt_maps[m].size(), "miou: map shapes differ");
    for (std::size_t i = 0; i < pred_maps[m].size(); ++i) {
      const i64 p = pred_maps[m][i], g = gt_maps[m][i];
      PTK_CHECK(p >= 0 && p < num_classes && g >= 0 && g < num_classes,
                "miou: class id out of range");
      if (p == g) {
        ++inter[std::size_t(p)];
        ++uni[std::size_t(p)];
      } else {
        ++uni[std::size_t(p)];
        ++uni[std::size_t(g)];
      }
    }
  }
  double sum = 0;
  i64 present = 0;
  for (i64 c = 0; c < num_classes; ++c) {
    if (uni[std::size_t(c)] == 0) continue;
    sum += double(inter[std::size_t(c)]) / double(uni[std::size_t(c)]);
    ++present;
  }
  PTK_CHECK(present > 0, "miou: no classes present");
  return sum / double(present);
}

double rmse_depth(const std::vector<double>& pred, const std::vector<double>& gt,
                  const std::vector<bool>& valid_mask) {
  PTK_CHECK(pred.size() == gt.size() && pred.size() == valid_mask.size(),
            "rmse_depth: size mismatch");
  double sum = 0;
  i64 count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!valid_mask[i]) continue;
    const double d = pred[i] - gt[i];
    sum += d * d;
    ++count;
  }
  PTK_CHECK(count > 0, "rmse_depth: empty valid mask");
  return std::sqrt(sum / double(count));
}

// --------------------------------------------------------------------- report

std::string to_json_line(const MetricReport& report) {
  nlohmann::json j;
  j["dataset"] = report.dataset;
  j["split"] = report.split;
  j["protocol"] = report.protocol;
  j["seed"] = report.seed;
  j["timestamp"] = report.timestamp;
  j["values"] = report.values;
  return j.dump();
}

void write_jsonl(const std::string& path, const std::vector<MetricReport>& reports) {
  std::ofstream f(path);
  PTK_CHECK(f.good(), "cannot write metric report: " << path);
  for (const auto& r : reports) f << to_json_line(r) << '\n';
}

std::vector<MetricReport> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  PTK_CHECK(f.good(), "cannot open metric report: " << path);
  std::vector<MetricReport> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    MetricReport r;
    r.dataset = j.at("dataset").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.protocol = j.at("protocol").get<std::string>();
    r.seed = j.at("seed").get<u64>();
    r.timestamp = j.at("timestamp").get<std::string>();
    r.values = j.at("values").get<std::map<std::string, double>>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ptk::bench
