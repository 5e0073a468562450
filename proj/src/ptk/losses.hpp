#pragma once

// Contrastive training losses: symmetric InfoNCE, the grouped intra-/cross-
// modal objective, similar-text supervision with a FIFO feature queue, the
// online/target consistency loss and the sample-based contrastive
// regularizer.

#include <deque>

#include "ptk/ops_nn.hpp"

namespace ptk {

// Symmetric InfoNCE over index-matched pairs; x and y are unit-normalized
// [N,D] embeddings, tau a positive scalar variable.
//   L = -1/N sum_i log softmax_row(x y^T / tau)[i,i]
//       -1/N sum_i log softmax_col(x y^T / tau)[i,i]
template <typename T>
VarT<T> contrastive_loss(VarT<T> x, VarT<T> y, VarT<T> tau) {
  const auto& xs = x.value().shape;
  const auto& ys = y.value().shape;
  PTK_CHECK(xs.size() == 2 && xs == ys, "contrastive_loss: want equal [N,D]");
  const i64 n = xs[0];
  PTK_CHECK(n > 0, "contrastive_loss: empty batch");
  VarT<T> inv_tau = recip(tau);
  VarT<T> logits = scale_by(matmul(x, transpose(y)), inv_tau);
  std::vector<i64> diag(std::size_t(n), 0);
  for (i64 i = 0; i < n; ++i) diag[std::size_t(i)] = i;
  return add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag));
}

template <typename T>
struct IcsTerms {
  VarT<T> cosine;   // mean negative cosine between the two image views
  VarT<T> mlm;      // masked-token cross-entropy
  VarT<T> total;    // cosine + mlm + four cross-modal InfoNCE terms
  bool mlm_empty = false;
};

// Grouped intra-modal and cross-modal supervision across augmented image/text
// pairs. mlm_logits holds one row per masked position; mlm_targets the true
// token ids (empty means no masked positions this batch).
template <typename T>
IcsTerms<T> ics_loss(VarT<T> z_img, VarT<T> z_img2, VarT<T> z_txt, VarT<T> z_txt2,
                     VarT<T> mlm_logits, const std::vector<i64>& mlm_targets,
                     VarT<T> tau) {
  IcsTerms<T> out;
  out.cosine = neg(mean(cosine_rows(z_img, z_img2)));
  if (mlm_targets.empty()) {
    out.mlm = z_img.tape->constant(TensorT<T>::scalar(T(0)));
    out.mlm_empty = true;
  } else {
    out.mlm = cross_entropy(mlm_logits, mlm_targets);
  }
  VarT<T> cl = add(contrastive_loss(z_img, z_txt, tau), contrastive_loss(z_img, z_txt2, tau));
  cl = add(cl, contrastive_loss(z_img2, z_txt, tau));
  cl = add(cl, contrastive_loss(z_img2, z_txt2, tau));
  out.total = add(add(out.cosine, out.mlm), cl);
  return out;
}

// Fixed-capacity FIFO ring of unit-normalized feature vectors.
template <typename T>
class TextQueueT {
 public:
  explicit TextQueueT(std::size_t capacity) : capacity_(capacity) {
    PTK_CHECK(capacity > 0, "text queue: capacity must be positive");
  }

  void push(const TensorT<T>& feature) {
    PTK_CHECK(feature.rank() == 1, "text queue: want 1-d features");
    double norm = 0;
    for (T v : feature.data) norm += double(v) * double(v);
    PTK_CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-3, "text queue: entry not unit-norm");
    entries_.push_back(feature);
    if (entries_.size() > capacity_) entries_.pop_front();
  }

  void push_rows(const TensorT<T>& rows) {
    PTK_CHECK(rows.rank() == 2, "text queue: want [N,D]");
    for (i64 i = 0; i < rows.shape[0]; ++i) {
      TensorT<T> e({rows.shape[1]});
      for (i64 j = 0; j < rows.shape[1]; ++j) e[j] = rows.at2(i, j);
      push(e);
    }
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const TensorT<T>& entry(std::size_t i) const { return entries_[i]; }  // 0 = oldest

  // Index of the entry with maximal cosine similarity to the query.
  std::size_t nearest(const TensorT<T>& query) const {
    PTK_CHECK(!entries_.empty(), "text queue: nearest on empty queue");
    std::size_t best = 0;
    double best_sim = -2;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < query.data.size(); ++j)
        s += double(entries_[i].data[j]) * double(query.data[j]);
      if (s > best_sim) {
        best_sim = s;
        best = i;
      }
    }
    return best;
  }

 private:
  std::size_t capacity_;
  std::deque<TensorT<T>> entries_;
};

using TextQueue = TextQueueT<float>;

// Similar-text supervision: for each sample retrieve the nearest queue entry
// to its current text feature and use it as the contrastive positive for both
// image views. The retrieved features supervise as constants (queue entries
// are history, not part of the graph).
template <typename T>
VarT<T> sts_loss(VarT<T> z_img, VarT<T> z_img2, const TextQueueT<T>& queue, VarT<T> z_txt,
                 VarT<T> tau) {
  PTK_CHECK(!queue.empty(), "sts_loss: queue is empty; seed it before use");
  const auto& zt = z_txt.value();
  const i64 n = zt.shape[0], d = zt.shape[1];
  TensorT<T> retrieved({n, d});
  for (i64 i = 0; i < n; ++i) {
    TensorT<T> q({d});
    for (i64 j = 0; j < d; ++j) q[j] = zt.at2(i, j);
    const auto& e = queue.entry(queue.nearest(q));
    for (i64 j = 0; j < d; ++j) retrieved.at2(i, j) = e[j];
  }
  VarT<T> pos = z_img.tape->constant(retrieved);
  return add(contrastive_loss(z_img, pos, tau), contrastive_loss(z_img2, pos, tau));
}

// L_GS = (1-alpha) * L_ICS + alpha * L_STS.
template <typename T>
VarT<T> group_supervision_loss(VarT<T> ics, VarT<T> sts, double alpha) {
  PTK_CHECK(alpha >= 0.0 && alpha <= 1.0, "group_supervision: alpha outside [0,1]");
  return add(mul_scalar(ics, 1.0 - alpha), mul_scalar(sts, alpha));
}

inline double group_supervision_loss(double ics, double sts, double alpha) {
  PTK_CHECK(alpha >= 0.0 && alpha <= 1.0, "group_supervision: alpha outside [0,1]");
  return (1.0 - alpha) * ics + alpha * sts;
}

// Mean of 2 - 2 cos(pred_i, target_i); the target side is detached here, so
// it contributes exactly zero gradient regardless of how it was produced.
template <typename T>
VarT<T> byol_consistency(VarT<T> pred_online, VarT<T> proj_target) {
  VarT<T> target = detach(proj_target);
  VarT<T> c = cosine_rows(pred_online, target);
  return mean(add_scalar(mul_scalar(c, -2.0), 2.0));
}

// target <- m * target + (1 - m) * online, elementwise. The subset variant
// reads matching names from `online`, which may carry extra entries (e.g. a
// predictor with no target twin).
template <typename T>
void momentum_update_subset(ParamStoreT<T>& target, const ParamStoreT<T>& online, double m) {
  PTK_CHECK(m >= 0.0 && m < 1.0, "momentum_update: m outside [0,1)");
  for (const auto& name : target.names()) {
    auto& t = target.get(name);
    const auto& o = online.get(name);
    PTK_CHECK(t.shape == o.shape, "momentum_update: shape mismatch for " << name);
    for (std::size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = T(m * double(t.data[i]) + (1.0 - m) * double(o.data[i]));
  }
}

template <typename T>
void momentum_update(ParamStoreT<T>& target, const ParamStoreT<T>& online, double m) {
  PTK_CHECK(target.names() == online.names(), "momentum_update: layout mismatch");
  momentum_update_subset(target, online, m);
}

// InfoNCE with the momentum-network feature as the positive and historical
// features as negatives. Query rows f_q carry gradient; f_k and the history
// do not.
template <typename T>
VarT<T> sample_contrastive_loss(VarT<T> f_q, VarT<T> f_k, const std::vector<TensorT<T>>& history,
                                double tau) {
  const auto& qs = f_q.value().shape;
  PTK_CHECK(qs.size() == 2 && f_k.value().shape == qs, "sample_contrastive: want equal [N,D]");
  const i64 n = qs[0], d = qs[1];
  VarT<T> fk = detach(f_k);
  VarT<T> pos = reshape(rows_dot(f_q, fk), {n, 1});
  VarT<T> logits = pos;
  if (!history.empty()) {
    TensorT<T> hist({i64(history.size()), d});
    for (std::size_t i = 0; i < history.size(); ++i) {
      PTK_CHECK(history[i].numel() == d, "sample_contrastive: history dim mismatch");
      for (i64 j = 0; j < d; ++j) hist.at2(i64(i), j) = history[i][j];
    }
    VarT<T> negs = matmul(f_q, transpose(f_q.tape->constant(hist)));
    logits = transpose(concat_dim0<T>({transpose(pos), transpose(negs)}));
  }
  logits = mul_scalar(logits, 1.0 / tau);
  std::vector<i64> labels(std::size_t(n), 0);
  return cross_entropy(logits, labels);
}

}  // namespace ptk
