#include "ptk/nas.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ptk::nas {

SearchSpace SearchSpace::desk_default() {
  SearchSpace s;
  s.base = {{1, 8, 2}, {1, 12, 2}, {1, 16, 2}, {1, 24, 2}, {1, 32, 2}, {1, 32, 1}};
  return s;
}

i64 space_size(const SearchSpace& space) {
  space.validate();
  i64 total = 1;
  for (int slot = 0; slot < space.num_slots(); ++slot) {
    const i64 opts = space.options_at(slot);
    PTK_CHECK(total <= std::numeric_limits<i64>::max() / opts, "space_size overflow");
    total *= opts;
  }
  return total;
}

ArchSpec decode(const std::vector<i64>& tokens, const SearchSpace& space) {
  space.validate();
  PTK_CHECK(int(tokens.size()) == space.num_slots(),
            "decode: want " << space.num_slots() << " tokens, got " << tokens.size());
  ArchSpec arch;
  for (std::size_t s = 0; s < space.base.size(); ++s) {
    const i64* t = tokens.data() + s * kChoicesPerStage;
    for (int j = 0; j < kChoicesPerStage; ++j)
      PTK_CHECK(t[j] >= 0 && t[j] < space.options_at(int(s) * kChoicesPerStage + j),
                "decode: token " << t[j] << " out of range in stage " << s);
    ArchSpec::Stage st;
    st.op = space.operators[std::size_t(t[0])];
    st.expansion = space.expansions[std::size_t(t[1])];
    st.repeats = std::max<i64>(1, space.base[s].repeats + space.repeat_shifts[std::size_t(t[2])]);
    st.channels = std::max<i64>(
        1, i64(std::llround(double(space.base[s].channels) * space.channel_mults[std::size_t(t[3])])));
    st.stride = space.base[s].stride;
    st.window = space.attention_window;
    arch.stages.push_back(st);
  }
  return arch;
}

std::vector<i64> encode(const ArchSpec& spec, const SearchSpace& space) {
  space.validate();
  PTK_CHECK(spec.stages.size() == space.base.size(), "encode: stage count mismatch");
  auto index_of = [](auto& list, auto value, const char* what) -> i64 {
    for (std::size_t i = 0; i < list.size(); ++i)
      if (list[i] == value) return i64(i);
    PTK_FAIL("encode: value not representable for " << what);
  };
  std::vector<i64> tokens;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const auto& st = spec.stages[s];
    tokens.push_back(index_of(space.operators, st.op, "operator"));
    tokens.push_back(index_of(space.expansions, st.expansion, "expansion"));
    tokens.push_back(index_of(space.repeat_shifts, st.repeats - space.base[s].repeats, "repeats"));
    double mult = double(st.channels) / double(space.base[s].channels);
    i64 best = -1;
    for (std::size_t i = 0; i < space.channel_mults.size(); ++i)
      if (i64(std::llround(space.base[s].channels * space.channel_mults[i])) == st.channels)
        best = i64(i);
    PTK_CHECK(best >= 0, "encode: channels " << st.channels << " not representable (mult "
                                             << mult << ")");
    tokens.push_back(best);
  }
  return tokens;
}

i64 flops(const ArchSpec& arch, i64 resolution) {
  PTK_CHECK(resolution % 32 == 0, "flops: resolution must be divisible by 32");
  i64 total = 0;
  i64 h = resolution, w = resolution;
  i64 cin = 3;
  for (const auto& st : arch.stages) {
    PTK_CHECK(st.stride == 1 || st.stride == 2, "flops: bad stride");
    h /= st.stride;
    w /= st.stride;
    // stage transition: 3x3 conv cin -> c
    total += 9 * cin * st.channels * h * w;
    const i64 c = st.channels, ec = c * st.expansion, t = h * w;
    for (i64 r = 0; r < st.repeats; ++r) {
      switch (st.op) {
        case OperatorKind::Conv:
          total += c * ec * t + 9 * ec * ec * t + ec * c * t;
          break;
        case OperatorKind::DwConv:
          total += c * ec * t + 9 * ec * t + ec * c * t;
          break;
        case OperatorKind::SelfAttention:
          total += 4 * c * c * t + 2 * t * t * c + 2 * c * ec * t;
          break;
        case OperatorKind::LocalSelfAttention: {
          const i64 win = std::min(st.window, std::min(h, w));
          const i64 tw = win * win;                 // tokens per window
          const i64 windows = t / tw;
          total += 4 * c * c * t + windows * 2 * tw * tw * c + 2 * c * ec * t;
          break;
        }
      }
    }
    cin = st.channels;
  }
  return total;
}

double reward(double acc, double f, double t, double alpha) {
  PTK_CHECK(acc >= 0.0 && acc <= 1.0, "reward: accuracy outside [0,1]");
  PTK_CHECK(f > 0 && t > 0, "reward: flops and target must be positive");
  return acc * std::pow(f / t, alpha);
}

std::string arch_to_text(const ArchSpec& arch) {
  std::ostringstream oss;
  oss << "# stages: operator expansion repeats channels stride window\n";
  for (const auto& st : arch.stages)
    oss << operator_name(st.op) << ' ' << st.expansion << ' ' << st.repeats << ' '
        << st.channels << ' ' << st.stride << ' ' << st.window << '\n';
  return oss.str();
}

ArchSpec arch_from_text(const std::string& text) {
  ArchSpec arch;
  std::istringstream iss(text);
  std::string line;
  while (std::getline(iss, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string op;
    if (!(ls >> op)) continue;
    ArchSpec::Stage st;
    st.op = operator_from_name(op);
    PTK_CHECK(bool(ls >> st.expansion >> st.repeats >> st.channels >> st.stride),
              "arch file: malformed stage line: " << line);
    if (!(ls >> st.window)) st.window = 4;
    arch.stages.push_back(st);
  }
  PTK_CHECK(!arch.stages.empty(), "arch file: no stages found");
  return arch;
}

void save_arch(const std::string& path, const ArchSpec& arch) {
  std::ofstream f(path);
  PTK_CHECK(f.good(), "cannot write architecture file: " << path);
  f << arch_to_text(arch);
}

ArchSpec load_arch(const std::string& path) {
  std::ifstream f(path);
  PTK_CHECK(f.good(), "cannot open architecture file: " << path);
  std::stringstream ss;
  ss << f.rdbuf();
  return arch_from_text(ss.str());
}

u64 arch_hash(const ArchSpec& arch) { return fnv1a(arch_to_text(arch)); }

std::vector<StageSpec> arch_to_stages(const ArchSpec& arch) {
  std::vector<StageSpec> out;
  for (const auto& st : arch.stages) {
    StageSpec s;
    s.stride = st.stride;
    s.out_channels = st.channels;
    for (i64 r = 0; r < st.repeats; ++r)
      s.blocks.push_back(BlockConfig{st.op, st.channels, st.expansion, st.window});
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------- controller

namespace {
constexpr i64 kMaxOptions = 5;
}

ControllerPolicy::ControllerPolicy(const SearchSpace& space, u64 seed, i64 hidden)
    : space_(space), hidden_(hidden), in_dim_(kMaxOptions),
      opt_([] {
        OptConfig c;
        c.kind = OptKind::AdamW;
        c.weight_decay = 0.0;
        c.lr = 0.02;
        return c;
      }()) {
  space_.validate();
  Rng rng(fnv1a("controller", seed));
  params_.add("wx", Tensor::randn({in_dim_, hidden_}, rng, 0.2));
  params_.add("wh", Tensor::randn({hidden_, hidden_}, rng, 0.2));
  params_.add("bh", Tensor::zeros({hidden_}));
  for (int slot = 0; slot < space_.num_slots(); ++slot) {
    const i64 opts = space_.options_at(slot);
    // zero-init heads: uniform distributions at the start
    params_.add("head" + std::to_string(slot) + ".w", Tensor::zeros({hidden_, opts}));
    params_.add("head" + std::to_string(slot) + ".b", Tensor::zeros({opts}));
  }
}

// Host-side recurrent forward producing per-slot probability vectors for a
// given token prefix (and optionally sampling as it goes).
namespace {
struct RolloutCtx {
  std::vector<double> h;
  std::vector<double> x;
};

std::vector<double> slot_distribution(const ParamStore& params, i64 hidden, i64 in_dim,
                                      RolloutCtx& ctx, int slot, i64 opts) {
  const auto& wx = params.get("wx");
  const auto& wh = params.get("wh");
  const auto& bh = params.get("bh");
  std::vector<double> hnew(std::size_t(hidden), 0.0);
  for (i64 j = 0; j < hidden; ++j) {
    double s = double(bh[j]);
    for (i64 i = 0; i < in_dim; ++i) s += ctx.x[std::size_t(i)] * double(wx.at2(i, j));
    for (i64 i = 0; i < hidden; ++i) s += ctx.h[std::size_t(i)] * double(wh.at2(i, j));
    hnew[std::size_t(j)] = std::tanh(s);
  }
  ctx.h = hnew;
  const auto& w = params.get("head" + std::to_string(slot) + ".w");
  const auto& b = params.get("head" + std::to_string(slot) + ".b");
  std::vector<double> logits(std::size_t(opts), 0.0);
  for (i64 o = 0; o < opts; ++o) {
    double s = double(b[o]);
    for (i64 i = 0; i < hidden; ++i) s += ctx.h[std::size_t(i)] * double(w.at2(i, o));
    logits[std::size_t(o)] = s;
  }
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : logits) v /= z;
  return logits;  // probabilities
}
}  // namespace

Trajectory ControllerPolicy::sample(Rng& rng) const {
  Trajectory traj;
  RolloutCtx ctx{std::vector<double>(std::size_t(hidden_), 0.0),
                 std::vector<double>(std::size_t(in_dim_), 0.0)};
  for (int slot = 0; slot < space_.num_slots(); ++slot) {
    const i64 opts = space_.options_at(slot);
    auto probs = slot_distribution(params_, hidden_, in_dim_, ctx, slot, opts);
    const i64 pick = rng.categorical(probs);
    traj.tokens.push_back(pick);
    traj.logps.push_back(std::log(std::max(probs[std::size_t(pick)], 1e-300)));
    std::fill(ctx.x.begin(), ctx.x.end(), 0.0);
    ctx.x[std::size_t(pick)] = 1.0;
  }
  return traj;
}

std::vector<double> ControllerPolicy::log_prob_of(const std::vector<i64>& tokens) const {
  PTK_CHECK(int(tokens.size()) == space_.num_slots(), "log_prob_of: token count");
  std::vector<double> out;
  RolloutCtx ctx{std::vector<double>(std::size_t(hidden_), 0.0),
                 std::vector<double>(std::size_t(in_dim_), 0.0)};
  for (int slot = 0; slot < space_.num_slots(); ++slot) {
    const i64 opts = space_.options_at(slot);
    auto probs = slot_distribution(params_, hidden_, in_dim_, ctx, slot, opts);
    out.push_back(std::log(std::max(probs[std::size_t(tokens[std::size_t(slot)])], 1e-300)));
    std::fill(ctx.x.begin(), ctx.x.end(), 0.0);
    ctx.x[std::size_t(tokens[std::size_t(slot)])] = 1.0;
  }
  return out;
}

std::vector<double> ControllerPolicy::slot_probs(const std::vector<i64>& prefix_tokens,
                                                 int slot) const {
  RolloutCtx ctx{std::vector<double>(std::size_t(hidden_), 0.0),
                 std::vector<double>(std::size_t(in_dim_), 0.0)};
  std::vector<double> probs;
  for (int s = 0; s <= slot; ++s) {
    probs = slot_distribution(params_, hidden_, in_dim_, ctx, s, space_.options_at(s));
    if (s < slot) {
      PTK_CHECK(s < int(prefix_tokens.size()), "slot_probs: prefix too short");
      std::fill(ctx.x.begin(), ctx.x.end(), 0.0);
      ctx.x[std::size_t(prefix_tokens[std::size_t(s)])] = 1.0;
    }
  }
  return probs;
}

void ControllerPolicy::ppo_update(const std::vector<Trajectory>& trajectories,
                                  double clip_eps) {
  PTK_CHECK(!trajectories.empty(), "ppo_update: empty batch");
  double batch_mean = 0;
  for (const auto& t : trajectories) batch_mean += t.reward;
  batch_mean /= double(trajectories.size());
  if (!baseline_init_) {
    baseline_ = batch_mean;
    baseline_init_ = true;
  }

  // Rebuild log-probs on a tape and assemble the clipped surrogate. Ratios in
  // the clipped region contribute a constant, hence no gradient term.
  Tape tape;
  Binder bind(tape, params_, /*training=*/true);
  Var wx = bind("wx"), wh = bind("wh"), bh = bind("bh");

  std::vector<Var> terms;
  for (const auto& traj : trajectories) {
    const double adv = traj.reward - baseline_;
    if (adv == 0) continue;
    Var h = tape.constant(Tensor::zeros({1, hidden_}));
    Var x = tape.constant(Tensor::zeros({1, in_dim_}));
    for (int slot = 0; slot < space_.num_slots(); ++slot) {
      const i64 opts = space_.options_at(slot);
      Var hnew = tanh_op(add(add(matmul(x, wx), matmul(h, wh)),
                             reshape(bh, std::vector<i64>{1, hidden_})));
      Var head_w = bind("head" + std::to_string(slot) + ".w");
      Var head_b = bind("head" + std::to_string(slot) + ".b");
      Var logits = add(matmul(hnew, head_w), reshape(head_b, std::vector<i64>{1, opts}));
      const i64 tok = traj.tokens[std::size_t(slot)];
      Var logp = neg(cross_entropy(logits, {tok}));
      const double logp_old = traj.logps[std::size_t(slot)];
      const double ratio_now = std::exp(tape.value(logp)[0] - logp_old);
      const bool clipped =
          (adv > 0 && ratio_now > 1.0 + clip_eps) || (adv < 0 && ratio_now < 1.0 - clip_eps);
      if (!clipped) {
        // ratio * adv, ratio = exp(logp - logp_old)
        Var ratio = exp_op(add_scalar(logp, -logp_old));
        terms.push_back(mul_scalar(ratio, adv));
      }
      h = hnew;
      Tensor xh = Tensor::zeros({1, in_dim_});
      xh.at2(0, tok) = 1.0f;
      x = tape.constant(xh);
    }
  }
  if (!terms.empty()) {
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    const double denom = double(trajectories.size() * std::size_t(space_.num_slots()));
    Var loss = mul_scalar(total, -1.0 / denom);  // ascend the surrogate
    tape.backward(loss);
    auto grads = bind.gradients();
    opt_.step(params_, grads, opt_.config().lr);
  }

  baseline_ = 0.9 * baseline_ + 0.1 * batch_mean;
}

// --------------------------------------------------------------------- search

std::vector<ScoredArch> search(const SearchSpace& space,
                               const std::function<double(const ArchSpec&)>& oracle,
                               const SearchConfig& cfg,
                               const std::function<void(i64, const ScoredArch&)>& log) {
  PTK_CHECK(cfg.budget >= cfg.topk, "search: budget must be >= topk");
  ControllerPolicy policy(space, cfg.seed);
  Rng rng(fnv1a("search", cfg.seed));

  std::vector<ScoredArch> seen;
  double target = cfg.target_flops;
  i64 evaluated = 0;
  while (evaluated < cfg.budget) {
    const i64 batch = std::min<i64>(cfg.batch, cfg.budget - evaluated);
    std::vector<Trajectory> trajs;
    for (i64 b = 0; b < batch; ++b) {
      Trajectory t = policy.sample(rng);
      ArchSpec arch = decode(t.tokens, space);
      const double f = double(flops(arch, cfg.resolution));
      double acc = 0;
      try {
        acc = oracle(arch);
      } catch (const std::exception& e) {
        PTK_FAIL("oracle failed for architecture:\n" << arch_to_text(arch)
                                                     << "cause: " << e.what());
      }
      if (target <= 0) target = f;  // first sampled arch anchors the target
      t.reward = reward(acc, f, target, cfg.alpha);
      ScoredArch scored{arch, t.tokens, acc, f, t.reward};
      seen.push_back(scored);
      if (log) log(evaluated, scored);
      trajs.push_back(std::move(t));
      ++evaluated;
    }
    policy.ppo_update(trajs, cfg.clip_eps);
  }

  // top-k distinct token sequences by reward, descending
  std::stable_sort(seen.begin(), seen.end(),
                   [](const ScoredArch& a, const ScoredArch& b) { return a.reward > b.reward; });
  std::vector<ScoredArch> top;
  for (const auto& s : seen) {
    bool dup = false;
    for (const auto& t : top) dup = dup || t.tokens == s.tokens;
    if (!dup) top.push_back(s);
    if (i64(top.size()) == cfg.topk) break;
  }
  return top;
}

ArchSpec scale_model(const ArchSpec& base, double width_coeff, double depth_coeff) {
  PTK_CHECK(width_coeff >= 1.0 && depth_coeff >= 1.0, "scale_model: coefficients must be >= 1");
  ArchSpec out = base;
  for (auto& st : out.stages) {
    if (width_coeff != 1.0) {
      const i64 scaled = i64(std::llround(double(st.channels) * width_coeff / 8.0)) * 8;
      st.channels = std::max<i64>(8, scaled);
    }
    st.repeats = i64(std::ceil(double(st.repeats) * depth_coeff));
  }
  return out;
}

}  // namespace ptk::nas
