#include "doctest.h"
#include "ptk/amateur.hpp"
#include "ptk/checkpoint.hpp"

using namespace ptk;
using namespace ptk::amateur;

namespace {
TensorD unit_rows(Rng& rng, i64 n, i64 d) {
  TensorD t = TensorD::randn({n, d}, rng);
  for (i64 i = 0; i < n; ++i) {
    double s = 0;
    for (i64 j = 0; j < d; ++j) s += t.at2(i, j) * t.at2(i, j);
    for (i64 j = 0; j < d; ++j) t.at2(i, j) /= std::sqrt(s);
  }
  return t;
}
}  // namespace

TEST_CASE("contrastive loss: single pair scores zero") {
  TapeD tp;
  Rng rng(1);
  auto x = tp.constant(unit_rows(rng, 1, 8));
  auto tau = tp.constant(TensorD::scalar(0.07));
  auto loss = contrastive_loss(x, x, tau);
  CHECK(tp.value(loss)[0] == doctest::Approx(0.0));
}

TEST_CASE("contrastive loss: orthonormal 2-batch closed form") {
  TapeD tp;
  TensorD x({2, 2}, {1, 0, 0, 1});
  auto xv = tp.constant(x);
  auto tau = tp.constant(TensorD::scalar(1.0));
  auto loss = contrastive_loss(xv, xv, tau);
  const double expected = 2.0 * (-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)));
  CHECK(tp.value(loss)[0] == doctest::Approx(expected).epsilon(1e-9));
  CHECK(tp.value(loss)[0] == doctest::Approx(0.6265).epsilon(1e-3));
}

TEST_CASE("contrastive loss: invariant under simultaneous row permutation") {
  TapeD tp;
  Rng rng(2);
  TensorD x = unit_rows(rng, 5, 6), y = unit_rows(rng, 5, 6);
  TensorD xp = x, yp = y;
  const int perm[5] = {3, 0, 4, 1, 2};
  for (i64 i = 0; i < 5; ++i)
    for (i64 j = 0; j < 6; ++j) {
      xp.at2(i, j) = x.at2(perm[i], j);
      yp.at2(i, j) = y.at2(perm[i], j);
    }
  auto tau = tp.constant(TensorD::scalar(0.3));
  auto a = contrastive_loss(tp.constant(x), tp.constant(y), tau);
  auto b = contrastive_loss(tp.constant(xp), tp.constant(yp), tau);
  CHECK(tp.value(a)[0] == doctest::Approx(tp.value(b)[0]).epsilon(1e-12));
}

TEST_CASE("ics loss: aligned views reach the cosine minimum") {
  TapeD tp;
  Rng rng(3);
  auto zi = tp.constant(unit_rows(rng, 4, 8));
  auto zt = tp.constant(unit_rows(rng, 4, 8));
  auto zt2 = tp.constant(unit_rows(rng, 4, 8));
  auto logits = tp.constant(TensorD::randn({2, 10}, rng));
  auto tau = tp.constant(TensorD::scalar(0.5));
  auto terms = ics_loss(zi, zi, zt, zt2, logits, {1, 2}, tau);
  CHECK(tp.value(terms.cosine)[0] == doctest::Approx(-1.0));
}

TEST_CASE("ics loss: perfect mlm logits drive the term to zero") {
  TapeD tp;
  Rng rng(4);
  auto zi = tp.constant(unit_rows(rng, 2, 8));
  auto zi2 = tp.constant(unit_rows(rng, 2, 8));
  auto zt = tp.constant(unit_rows(rng, 2, 8));
  auto zt2 = tp.constant(unit_rows(rng, 2, 8));
  TensorD logits = TensorD::zeros({3, 6});
  const std::vector<i64> targets = {2, 0, 5};
  for (std::size_t i = 0; i < targets.size(); ++i)
    logits.at2(i64(i), targets[i]) = 200.0;  // margin -> infinity
  auto tau = tp.constant(TensorD::scalar(0.4));
  auto terms = ics_loss(zi, zi2, zt, zt2, tp.constant(logits), targets, tau);
  CHECK(tp.value(terms.mlm)[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("ics loss: N=1 leaves only cosine and mlm") {
  TapeD tp;
  Rng rng(5);
  auto zi = tp.constant(unit_rows(rng, 1, 8));
  auto zi2 = tp.constant(unit_rows(rng, 1, 8));
  auto zt = tp.constant(unit_rows(rng, 1, 8));
  auto zt2 = tp.constant(unit_rows(rng, 1, 8));
  TensorD logits = TensorD::randn({1, 6}, rng);
  auto tau = tp.constant(TensorD::scalar(0.2));
  auto terms = ics_loss(zi, zi2, zt, zt2, tp.constant(logits), {3}, tau);
  const double cs = tp.value(terms.cosine)[0];
  const double mlm = tp.value(terms.mlm)[0];
  CHECK(tp.value(terms.total)[0] == doctest::Approx(cs + mlm).epsilon(1e-9));
}

TEST_CASE("ics loss: no masked positions flags the empty mlm term") {
  TapeD tp;
  Rng rng(6);
  auto z = tp.constant(unit_rows(rng, 2, 8));
  auto logits = tp.constant(TensorD::zeros({1, 6}));
  auto tau = tp.constant(TensorD::scalar(0.2));
  auto terms = ics_loss(z, z, z, z, logits, {}, tau);
  CHECK(terms.mlm_empty);
  CHECK(tp.value(terms.mlm)[0] == 0.0);
}

TEST_CASE("text queue: fifo eviction preserves order of the rest") {
  TextQueueT<double> q(4);
  for (int i = 0; i < 5; ++i) {
    TensorD e = TensorD::zeros({4});
    e[i64(i % 4)] = 1.0;  // unit basis vectors, entry i marks its identity
    e[0] = e[0] == 1.0 ? 1.0 : 0.0;
    TensorD tagged = TensorD::zeros({4});
    tagged[i64(i % 4)] = 1.0;
    q.push(tagged);
  }
  CHECK(q.size() == 4);
  // first pushed (basis 0) was evicted; order of the rest preserved
  CHECK(q.entry(0)[1] == 1.0);
  CHECK(q.entry(1)[2] == 1.0);
  CHECK(q.entry(2)[3] == 1.0);
  CHECK(q.entry(3)[0] == 1.0);
}

TEST_CASE("text queue: non-unit entries are rejected") {
  TextQueueT<double> q(4);
  CHECK_THROWS(q.push(TensorD({2}, {3.0, 4.0})));
}

TEST_CASE("sts loss: queue holding the text feature itself matches cross-modal terms") {
  TapeD tp;
  Rng rng(7);
  TensorD zt = unit_rows(rng, 3, 4);
  // make rows mutually distant so each row's nearest neighbor is itself
  zt = TensorD({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0});
  TextQueueT<double> q(8);
  for (i64 i = 0; i < 3; ++i) {
    TensorD e({4});
    for (i64 j = 0; j < 4; ++j) e[j] = zt.at2(i, j);
    q.push(e);
  }
  auto zi = tp.constant(unit_rows(rng, 3, 4));
  auto zi2 = tp.constant(unit_rows(rng, 3, 4));
  auto ztv = tp.constant(zt);
  auto tau = tp.constant(TensorD::scalar(0.3));
  auto sts = sts_loss(zi, zi2, q, ztv, tau);
  auto direct = add(contrastive_loss(zi, ztv, tau), contrastive_loss(zi2, ztv, tau));
  CHECK(tp.value(sts)[0] == doctest::Approx(tp.value(direct)[0]).epsilon(1e-12));
}

TEST_CASE("sts loss: nearest neighbor picks max cosine") {
  TextQueueT<double> q(4);
  q.push(TensorD({2}, {1.0, 0.0}));
  q.push(TensorD({2}, {0.0, 1.0}));
  TensorD query({2}, {0.9, 0.1});
  const double n = std::sqrt(0.81 + 0.01);
  query[0] /= n;
  query[1] /= n;
  CHECK(q.nearest(query) == 0);
}

TEST_CASE("sts loss: retrieval equals brute-force argmax on 1000 random queries") {
  Rng rng(8);
  TextQueueT<double> q(64);
  std::vector<TensorD> entries;
  for (int i = 0; i < 64; ++i) {
    TensorD e = unit_rows(rng, 1, 8).reshaped({8});
    entries.push_back(e);
    q.push(e);
  }
  for (int it = 0; it < 1000; ++it) {
    TensorD query = unit_rows(rng, 1, 8).reshaped({8});
    std::size_t best = 0;
    double best_sim = -2;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      double s = 0;
      for (i64 j = 0; j < 8; ++j) s += entries[i][j] * query[j];
      if (s > best_sim) {
        best_sim = s;
        best = i;
      }
    }
    CHECK(q.nearest(query) == best);
  }
}

TEST_CASE("sts loss: empty queue is an error") {
  TapeD tp;
  Rng rng(9);
  TextQueueT<double> q(4);
  auto z = tp.constant(unit_rows(rng, 2, 4));
  auto tau = tp.constant(TensorD::scalar(0.3));
  CHECK_THROWS(sts_loss(z, z, q, z, tau));
}

TEST_CASE("group supervision: affine combination and defaults") {
  CHECK(group_supervision_loss(2.0, 1.0, 0.5) == doctest::Approx(1.5));
  CHECK(group_supervision_loss(2.0, 1.0, 0.0) == doctest::Approx(2.0));
  CHECK(GlobalPhaseConfig{}.alpha == 0.5);       // the published default mix
  CHECK(GlobalPhaseConfig{}.tau_init == doctest::Approx(0.07));
  CHECK_THROWS(group_supervision_loss(1.0, 1.0, 1.5));
}

TEST_CASE("grouped supervision stays bounded below by -1 per sample") {
  Rng rng(99);
  for (int it = 0; it < 50; ++it) {
    TapeD tp;
    const i64 n = 1 + rng.uniform_int(5);
    auto zi = tp.constant(unit_rows(rng, n, 8));
    auto zi2 = tp.constant(unit_rows(rng, n, 8));
    auto zt = tp.constant(unit_rows(rng, n, 8));
    auto zt2 = tp.constant(unit_rows(rng, n, 8));
    auto logits = tp.constant(TensorD::randn({2, 6}, rng));
    auto tau = tp.constant(TensorD::scalar(rng.uniform(0.05, 1.0)));
    auto terms = ics_loss(zi, zi2, zt, zt2, logits,
                          {rng.uniform_int(6), rng.uniform_int(6)}, tau);
    TextQueueT<double> q(16);
    q.push(unit_rows(rng, 1, 8).reshaped({8}));
    auto sts = sts_loss(zi, zi2, q, zt, tau);
    auto gs = group_supervision_loss(terms.total, sts, 0.5);
    CHECK(tp.value(gs)[0] >= -1.0);
  }
}

TEST_CASE("published defaults are wired in") {
  CHECK(GlobalPhaseConfig{}.monitor_threshold == 0.5);
  CHECK(GlobalPhaseConfig{}.queue_capacity == 512);
  CHECK(LocalPhaseConfig{}.ema_momentum == doctest::Approx(0.99));
  CHECK(LossMonitor().depth() == 10);
}

TEST_CASE("monitor: spike above the rolling reference rolls back 10 iterations") {
  ParamStore ps;
  ps.add("w", Tensor({1}, {0.0f}));
  Optimizer opt(OptConfig{});
  LossMonitor mon(0.5, 10);
  // 12 healthy steps with distinct parameter values
  for (int step = 0; step < 12; ++step) {
    const auto act = mon.step(1.0, ps, opt);
    CHECK(act == LossMonitor::Action::Proceed);
    ps.get("w")[0] += 1.0f;  // simulated update
  }
  CHECK(ps.get("w")[0] == 12.0f);
  CHECK(mon.ring_size() == 10);
  // spike: 1.6 - 1.0 = 0.6 > 0.5
  const auto act = mon.step(1.6, ps, opt);
  CHECK(act == LossMonitor::Action::SkipAndRollback);
  // snapshot from exactly 10 iterations back: state before update #2
  CHECK(ps.get("w")[0] == 2.0f);
  CHECK(mon.rollbacks() == 1);
}

TEST_CASE("monitor: spike exactly at the threshold proceeds (strict inequality)") {
  ParamStore ps;
  ps.add("w", Tensor({1}, {0.0f}));
  Optimizer opt(OptConfig{});
  LossMonitor mon(0.5, 10);
  for (int step = 0; step < 10; ++step) mon.step(1.0, ps, opt);
  CHECK(mon.step(1.5, ps, opt) == LossMonitor::Action::Proceed);
}

TEST_CASE("proposals: assignment frequencies match 0.1/0.2/0.3/0.4 within 2%") {
  Rng rng(10);
  std::vector<Proposal> props = gen_proposals(rng, 100000, 64);
  assign_proposals(props, rng);
  std::array<i64, 4> counts{};
  for (const auto& p : props) {
    REQUIRE(p.level >= 2);
    REQUIRE(p.level <= 5);
    ++counts[std::size_t(p.level - 2)];
  }
  const double want[4] = {0.1, 0.2, 0.3, 0.4};
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(double(counts[std::size_t(i)]) / 100000 - want[i]) < 0.02);
}

TEST_CASE("proposals: area floor and bounds hold; default count is 8") {
  Rng rng(11);
  auto props = gen_proposals(rng, 500, 64);
  for (const auto& p : props) {
    p.validate(64);
    CHECK((p.x2 - p.x1) * (p.y2 - p.y1) >= 64.0 * 64.0 / 64.0);
  }
  CHECK(LocalPhaseConfig{}.proposals_per_image == 8);
}

TEST_CASE("roi align: constant feature returns the constant") {
  TapeD tp;
  auto feat = tp.constant(TensorD::full({1, 3, 8, 8}, 5.0));
  auto out = roi_align(feat, {Roi{0, 1.2, 0.7, 6.3, 7.1}}, 7);
  for (double v : tp.value(out).data) CHECK(v == doctest::Approx(5.0));
}

TEST_CASE("roi align: matches a manual bilinear trace") {
  TapeD tp;
  TensorD f({1, 1, 4, 4});
  for (i64 i = 0; i < 16; ++i) f[i] = double(i);
  auto out = roi_align(tp.constant(f), {Roi{0, 0.5, 0.5, 2.5, 2.5}}, 2);
  // bins of size 1, sample points at (0.5,0.5),(0.5,1.5),(1.5,0.5),(1.5,1.5)
  auto bilinear = [&](double y, double x) {
    const i64 y0 = i64(std::floor(y)), x0 = i64(std::floor(x));
    const double fy = y - double(y0), fx = x - double(x0);
    return f.at4(0, 0, y0, x0) * (1 - fy) * (1 - fx) +
           f.at4(0, 0, y0, x0 + 1) * (1 - fy) * fx +
           f.at4(0, 0, y0 + 1, x0) * fy * (1 - fx) + f.at4(0, 0, y0 + 1, x0 + 1) * fy * fx;
  };
  CHECK(tp.value(out).at4(0, 0, 0, 0) == doctest::Approx(bilinear(0.5, 0.5)));
  CHECK(tp.value(out).at4(0, 0, 0, 1) == doctest::Approx(bilinear(0.5, 1.5)));
  CHECK(tp.value(out).at4(0, 0, 1, 0) == doctest::Approx(bilinear(1.5, 0.5)));
  CHECK(tp.value(out).at4(0, 0, 1, 1) == doctest::Approx(bilinear(1.5, 1.5)));
}

TEST_CASE("roi align: whole-pixel translation equivariance") {
  TapeD tp;
  Rng rng(12);
  TensorD f = TensorD::randn({1, 2, 8, 8}, rng);
  TensorD shifted = TensorD::zeros({1, 2, 8, 8});
  for (i64 c = 0; c < 2; ++c)
    for (i64 y = 0; y < 7; ++y)
      for (i64 x = 0; x < 7; ++x) shifted.at4(0, c, y + 1, x + 1) = f.at4(0, c, y, x);
  auto a = roi_align(tp.constant(f), {Roi{0, 1.0, 1.0, 4.0, 4.0}}, 3);
  auto b = roi_align(tp.constant(shifted), {Roi{0, 2.0, 2.0, 5.0, 5.0}}, 3);
  CHECK(max_abs_diff(tp.value(a), tp.value(b)) < 1e-12);
}

TEST_CASE("roi align: degenerate box is an error") {
  TapeD tp;
  auto feat = tp.constant(TensorD::zeros({1, 1, 4, 4}));
  CHECK_THROWS(roi_align(feat, {Roi{0, 2.0, 1.0, 2.0, 3.0}}, 2));
}

TEST_CASE("byol consistency: endpoints and stop-gradient") {
  TapeD tp;
  Rng rng(13);
  TensorD v = unit_rows(rng, 3, 6);
  auto same = byol_consistency(tp.constant(v), tp.constant(v));
  CHECK(std::abs(tp.value(same)[0]) < 1e-9);
  TensorD anti = v;
  for (auto& x : anti.data) x = -x;
  auto far = byol_consistency(tp.constant(v), tp.constant(anti));
  CHECK(std::abs(tp.value(far)[0] - 4.0) < 1e-9);

  // target inputs receive exactly zero gradient
  auto pred = tp.leaf(unit_rows(rng, 3, 6), true);
  auto targ = tp.leaf(unit_rows(rng, 3, 6), true);
  auto loss = byol_consistency(pred, targ);
  tp.backward(loss);
  CHECK(tp.grad(targ).abs_max() == 0.0);
  CHECK(tp.grad(pred).abs_max() > 0.0);
}

TEST_CASE("momentum update: endpoints and geometric convergence") {
  ParamStore target, online;
  target.add("w", Tensor({1}, {0.0f}));
  online.add("w", Tensor({1}, {1.0f}));
  momentum_update(target, online, 0.99);
  CHECK(target.get("w")[0] == doctest::Approx(0.01));

  ParamStore t2, o2;
  t2.add("w", Tensor({1}, {0.0f}));
  o2.add("w", Tensor({1}, {1.0f}));
  momentum_update(t2, o2, 0.0);
  CHECK(t2.get("w")[0] == 1.0f);

  // error shrinks by m each step: after k steps err = m^k
  ParamStore t3, o3;
  t3.add("w", Tensor({1}, {0.0f}));
  o3.add("w", Tensor({1}, {1.0f}));
  const double m = 0.9;
  for (int k = 1; k <= 20; ++k) {
    momentum_update(t3, o3, m);
    const double err = std::abs(1.0 - double(t3.get("w")[0]));
    CHECK(err == doctest::Approx(std::pow(m, k)).epsilon(1e-4));
  }
  CHECK_THROWS(momentum_update(t3, o3, 1.0));
}

TEST_CASE("global phase: short run trains, records losses and seeds the queue") {
  auto corpus = harness::gen_multimodal(5, 48);
  nas::ArchSpec arch = nas::decode(
      [] { std::vector<i64> t; for (int i = 0; i < 6; ++i) t.insert(t.end(), {0, 0, 2, 2}); return t; }(),
      nas::SearchSpace::desk_default());
  GlobalPhaseConfig cfg;
  cfg.steps = 6;
  cfg.batch = 6;
  cfg.seed = 3;
  auto res = train_global_phase(arch, corpus, cfg);
  CHECK(res.losses.size() == 6);
  for (double l : res.losses) CHECK(std::isfinite(l));
  // determinism: the same run reproduces bit-identical parameters
  auto res2 = train_global_phase(arch, corpus, cfg);
  CHECK(params_bit_equal(res.params, res2.params));
}

TEST_CASE("local phase: backbone stays bit-identical while the adapter trains") {
  auto corpus = harness::gen_multimodal(6, 32);
  nas::ArchSpec arch = nas::decode(
      [] { std::vector<i64> t; for (int i = 0; i < 6; ++i) t.insert(t.end(), {0, 0, 2, 2}); return t; }(),
      nas::SearchSpace::desk_default());
  GlobalPhaseConfig gcfg;
  gcfg.steps = 2;
  gcfg.batch = 4;
  gcfg.seed = 11;
  auto global_phase = train_global_phase(arch, corpus, gcfg);

  LocalPhaseConfig lcfg;
  lcfg.steps = 4;
  lcfg.batch = 2;
  lcfg.seed = 12;
  auto local_phase = train_local_phase(arch, global_phase.params, corpus, lcfg);
  for (double l : local_phase.losses) CHECK(std::isfinite(l));

  // freeze contract: every backbone entry bit-equal to the global-phase value
  for (const auto& name : global_phase.params.names())
    if (name.rfind("backbone.", 0) == 0)
      CHECK(bit_equal(global_phase.params.get(name), local_phase.params.get(name)));

  // the adapter itself must have moved
  bool fpn_moved = false;
  for (const auto& name : local_phase.params.names_with_prefix("fpn."))
    fpn_moved = fpn_moved || !bit_equal(local_phase.params.get(name), local_phase.target.get(name));
  CHECK(fpn_moved);
}
