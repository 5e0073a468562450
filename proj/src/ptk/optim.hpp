#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ptk/param_store.hpp"

namespace ptk {

// ------------------------------------------------------ learning-rate plans

enum class LrKind { Cosine, Multistep, Polynomial, Constant };

struct LrSchedule {
  LrKind kind = LrKind::Constant;
  double base_lr = 0.1;
  double lr_min = 0.0;             // cosine floor
  i64 total_steps = 1;
  i64 warmup_steps = 0;            // linear from 0 to base_lr
  double power = 0.9;              // polynomial decay exponent
  std::vector<double> milestones = {0.7, 0.9};  // fractions of total, x0.1 each
};

// Learning rate at a step. Steps beyond total_steps clamp to the final value.
inline double lr_at(const LrSchedule& s, i64 step) {
  PTK_CHECK(step >= 0, "lr_at: negative step");
  if (step > s.total_steps) step = s.total_steps;
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.base_lr * double(step) / double(s.warmup_steps);
  const i64 t = step - s.warmup_steps;
  const i64 total = std::max<i64>(1, s.total_steps - s.warmup_steps);
  switch (s.kind) {
    case LrKind::Constant:
      return s.base_lr;
    case LrKind::Cosine:
      return s.lr_min +
             0.5 * (s.base_lr - s.lr_min) * (1.0 + std::cos(M_PI * double(t) / double(total)));
    case LrKind::Multistep: {
      int passed = 0;
      for (double m : s.milestones)
        if (double(t) >= m * double(total)) ++passed;
      return s.base_lr * std::pow(0.1, passed);
    }
    case LrKind::Polynomial:
      return s.base_lr * std::pow(1.0 - double(t) / double(total), s.power);
  }
  return s.base_lr;
}

// --------------------------------------------------------------- optimizers

enum class OptKind { SgdNesterov, AdamW, QuasiNewtonFullBatch };

struct OptConfig {
  OptKind kind = OptKind::SgdNesterov;
  double lr = 0.1;
  double momentum = 0.9;
  bool nesterov = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Stateful first-order optimizer over a ParamStore. Quasi-Newton is a
// full-batch strategy and lives in lbfgs_minimize below, not here.
template <typename T>
class OptimizerT {
 public:
  explicit OptimizerT(OptConfig cfg) : cfg_(cfg) {
    PTK_CHECK(cfg.kind != OptKind::QuasiNewtonFullBatch,
              "quasi-Newton is full-batch; use lbfgs_minimize");
  }

  const OptConfig& config() const { return cfg_; }

  // Per-parameter-name overrides (e.g. separate head weight decay, reduced
  // temperature learning rate). Prefix match, first hit wins.
  void set_weight_decay_override(const std::string& prefix, double wd) {
    wd_override_.emplace_back(prefix, wd);
  }
  void set_lr_scale(const std::string& prefix, double scale) {
    lr_scale_.emplace_back(prefix, scale);
  }

  void step(ParamStoreT<T>& params, const std::map<std::string, TensorT<T>>& grads,
            double lr) {
    PTK_CHECK(lr > 0, "optimizer_step: lr must be positive");
    ++t_;
    for (const auto& [name, g] : grads) {
      TensorT<T>& p = params.get(name);
      PTK_CHECK(p.shape == g.shape, "optimizer_step: grad shape mismatch for " << name);
      for (T v : g.data)
        PTK_CHECK(std::isfinite(double(v)), "NaN/inf gradient for parameter " << name);
      const double wd = decay_for(name);
      const double plr = lr * lr_scale_for(name);
      switch (cfg_.kind) {
        case OptKind::SgdNesterov:
          sgd_step(name, p, g, plr, wd);
          break;
        case OptKind::AdamW:
          adamw_step(name, p, g, plr, wd);
          break;
        default:
          PTK_FAIL("unsupported optimizer kind");
      }
    }
  }

  // Snapshot/restore for the rollback monitor.
  struct State {
    std::map<std::string, std::vector<double>> m1, m2;
    i64 t = 0;
  };
  State snapshot() const { return State{m1_, m2_, t_}; }
  void restore(const State& s) {
    m1_ = s.m1;
    m2_ = s.m2;
    t_ = s.t;
  }

 private:
  double decay_for(const std::string& name) const {
    for (const auto& [prefix, wd] : wd_override_)
      if (name.rfind(prefix, 0) == 0) return wd;
    return cfg_.weight_decay;
  }
  double lr_scale_for(const std::string& name) const {
    for (const auto& [prefix, sc] : lr_scale_)
      if (name.rfind(prefix, 0) == 0) return sc;
    return 1.0;
  }

  std::vector<double>& moment(std::map<std::string, std::vector<double>>& m,
                              const std::string& name, std::size_t n) {
    auto& v = m[name];
    if (v.size() != n) v.assign(n, 0.0);
    return v;
  }

  void sgd_step(const std::string& name, TensorT<T>& p, const TensorT<T>& g, double lr,
                double wd) {
    auto& buf = moment(m1_, name, p.data.size());
    const double mu = cfg_.momentum;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      double gi = double(g.data[i]) + wd * double(p.data[i]);
      double update;
      if (mu > 0) {
        buf[i] = mu * buf[i] + gi;
        update = cfg_.nesterov ? gi + mu * buf[i] : buf[i];
      } else {
        update = gi;
      }
      p.data[i] = T(double(p.data[i]) - lr * update);
    }
  }

  void adamw_step(const std::string& name, TensorT<T>& p, const TensorT<T>& g, double lr,
                  double wd) {
    auto& m = moment(m1_, name, p.data.size());
    auto& v = moment(m2_, name, p.data.size());
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = double(g.data[i]);
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + wd * double(p.data[i]);
      p.data[i] = T(double(p.data[i]) - lr * upd);
    }
  }

  OptConfig cfg_;
  std::map<std::string, std::vector<double>> m1_, m2_;
  std::vector<std::pair<std::string, double>> wd_override_;
  std::vector<std::pair<std::string, double>> lr_scale_;
  i64 t_ = 0;
};

using Optimizer = OptimizerT<float>;

// Scale gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::map<std::string, TensorT<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (T v : g.data) sq += double(v) * double(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads)
      for (auto& v : g.data) v = T(double(v) * scale);
  }
  return norm;
}

// ------------------------------------------------------------------- L-BFGS

// Full-batch L-BFGS with Armijo backtracking; the strategy used by the
// linear-probe protocol. f(x, grad_out) returns the objective and fills the
// gradient. Returns the final objective value.
inline double lbfgs_minimize(
    const std::function<double(const std::vector<double>&, std::vector<double>&)>& f,
    std::vector<double>& x, int max_iters = 1000, int history = 10, double tol = 1e-9) {
  const std::size_t n = x.size();
  std::vector<double> g(n), gprev(n), xprev(n), d(n), xnew(n), gnew(n);
  double fx = f(x, g);
  std::vector<std::vector<double>> s_hist, y_hist;
  std::vector<double> rho_hist;
  for (int iter = 0; iter < max_iters; ++iter) {
    double gnorm = 0;
    for (double v : g) gnorm += v * v;
    if (std::sqrt(gnorm) < tol) break;

    // two-loop recursion
    d = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = int(s_hist.size()) - 1; i >= 0; --i) {
      double a = 0;
      for (std::size_t j = 0; j < n; ++j) a += s_hist[std::size_t(i)][j] * d[j];
      a *= rho_hist[std::size_t(i)];
      alpha[std::size_t(i)] = a;
      for (std::size_t j = 0; j < n; ++j) d[j] -= a * y_hist[std::size_t(i)][j];
    }
    if (!s_hist.empty()) {
      double sy = 0, yy = 0;
      const auto& s = s_hist.back();
      const auto& y = y_hist.back();
      for (std::size_t j = 0; j < n; ++j) {
        sy += s[j] * y[j];
        yy += y[j] * y[j];
      }
      const double gamma = yy > 0 ? sy / yy : 1.0;
      for (auto& v : d) v *= gamma;
    }
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      double b = 0;
      for (std::size_t j = 0; j < n; ++j) b += y_hist[i][j] * d[j];
      b *= rho_hist[i];
      for (std::size_t j = 0; j < n; ++j) d[j] += (alpha[i] - b) * s_hist[i][j];
    }
    for (auto& v : d) v = -v;

    double dg = 0;
    for (std::size_t j = 0; j < n; ++j) dg += d[j] * g[j];
    if (dg > -1e-16) {  // not a descent direction, fall back to steepest
      for (std::size_t j = 0; j < n; ++j) d[j] = -g[j];
      dg = -gnorm;
    }

    // Armijo backtracking
    double step = 1.0;
    const double c1 = 1e-4;
    double fnew = fx;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      for (std::size_t j = 0; j < n; ++j) xnew[j] = x[j] + step * d[j];
      fnew = f(xnew, gnew);
      if (std::isfinite(fnew) && fnew <= fx + c1 * step * dg) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    xprev = x;
    gprev = g;
    x = xnew;
    g = gnew;
    const double decrease = fx - fnew;
    fx = fnew;

    std::vector<double> s(n), y(n);
    double sy = 0;
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = x[j] - xprev[j];
      y[j] = g[j] - gprev[j];
      sy += s[j] * y[j];
    }
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (int(s_hist.size()) > history) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
    if (decrease < tol * std::max(1.0, std::abs(fx))) break;
  }
  return fx;
}

}  // namespace ptk
