#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "tailorkv/memsim.hpp"

using namespace tailorkv;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(r, c);
  for (auto& v : m.flat()) v = static_cast<float>(nd(rng));
  return m;
}

std::vector<oracle::Job> jobs_of(const TransferTimeline& t) {
  std::vector<oracle::Job> jobs;
  for (const auto& e : t.events) {
    jobs.push_back({e.kind == EventKind::Compute ? 0 : 1, e.duration, e.depends_on});
  }
  return jobs;
}

TransferTimeline random_dag(std::mt19937_64& rng) {
  TransferTimeline t;
  const std::size_t n = 1 + rng() % 30;
  std::uniform_real_distribution<double> dur(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    TimelineEvent e;
    e.kind = rng() % 2 ? EventKind::Compute : EventKind::Transfer;
    e.layer = rng() % 4;
    e.duration = rng() % 10 == 0 ? 0.0 : dur(rng);
    for (std::size_t j = 0; j < i; ++j)
      if (rng() % 4 == 0) e.depends_on.push_back(j);
    t.add(e);
  }
  // Shuffle indices so dependencies are not always backwards.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  TransferTimeline s;
  s.events.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    TimelineEvent e = t.events[i];
    for (auto& d : e.depends_on) d = perm[d];
    s.events[perm[i]] = e;
  }
  return s;
}

std::vector<LayerCost> random_costs(std::mt19937_64& rng, std::size_t L) {
  std::vector<LayerCost> costs;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t l = 0; l < L; ++l) {
    LayerCost c;
    c.label = rng() % 3 == 0 ? LayerLabel::QuantizationFriendly : LayerLabel::SparsityFriendly;
    c.compute_seconds = 1e-3 * u(rng);
    c.estimate_seconds = rng() % 2 ? 1e-4 * u(rng) : 0.0;
    c.scoring_seconds = 1e-4 * u(rng);
    c.prefetch_bytes = rng() % 4000000;
    c.topk_bytes = rng() % 4000000;
    costs.push_back(c);
  }
  return costs;
}

}  // namespace

TEST(LinkModel, FirstOrderCost) {
  LinkModel link{1e9, 1e-6};
  EXPECT_DOUBLE_EQ(link.transfer_seconds(0), 1e-6);
  EXPECT_DOUBLE_EQ(link.transfer_seconds(1000), 1e-6 + 1e-6);
  EXPECT_EQ(LinkModel::pcie1().bandwidth, 4e9);
  EXPECT_EQ(LinkModel::pcie4().bandwidth, 32e9);
  EXPECT_THROW((LinkModel{0.0, 0.0}.validate()), ParameterError);
}

TEST(HostPool, OffloadAppendGather) {
  std::mt19937_64 rng(41);
  LayerKV cache({random_matrix(rng, 6, 4)}, {random_matrix(rng, 6, 4)});
  HostPool pool;
  pool.offload_layer(2, cache);
  EXPECT_TRUE(pool.holds(2));
  EXPECT_THROW(pool.offload_layer(2, cache), SchedulingError);
  Matrix nk(1, 4, std::vector<float>{100, -200, 0, 1}), nv(1, 4, 1.0f);
  pool.append(2, nk, nv);
  EXPECT_EQ(pool.seq_len(2), 7u);
  EXPECT_EQ(pool.channel_max(2, 0).values()[1], 200.0f);
  const std::vector<std::size_t> idx = {6, 0};
  auto [k, v] = pool.gather(2, 0, idx);
  EXPECT_EQ(k(0, 0), 100.0f);
  EXPECT_EQ(k(1, 2), cache.keys(0)(0, 2));
  const std::vector<std::size_t> ch = {1, 3};
  const Matrix crit = pool.gather_critical_keys(2, 0, ch);
  EXPECT_EQ(crit.cols(), 2u);
  EXPECT_EQ(crit(6, 0), -200.0f);
  EXPECT_THROW(pool.cache(5), SchedulingError);
}

TEST(Transfers, ByteCountsAndDoubleBuffer) {
  std::mt19937_64 rng(42);
  HostPool pool;
  for (std::size_t l = 0; l < 3; ++l) {
    pool.offload_layer(l, LayerKV({random_matrix(rng, 10, 8), random_matrix(rng, 10, 8)},
                                  {random_matrix(rng, 10, 8), random_matrix(rng, 10, 8)}));
  }
  std::vector<CriticalChannelSet> sets(2);
  sets[0].selected = {0, 3, 5};
  sets[1].selected = {1, 2, 7};
  DeviceBuffers buf;
  const auto t0 = prefetch_critical_keys(pool, 0, sets, buf);
  EXPECT_EQ(t0.bytes, 2u * 10 * 3 * 2);
  EXPECT_EQ(t0.slot, 0);
  const auto t1 = prefetch_critical_keys(pool, 1, sets, buf);
  EXPECT_EQ(t1.slot, 1);
  // Both slots are sealed: a third prefetch must wait for a release.
  EXPECT_THROW(prefetch_critical_keys(pool, 2, sets, buf), SchedulingError);
  EXPECT_EQ(buf.slot_of(0), 0);
  EXPECT_EQ(buf.critical_keys(0)[1](4, 2), pool.cache(0).keys(1)(4, 7));
  buf.release(0);
  EXPECT_EQ(prefetch_critical_keys(pool, 2, sets, buf).slot, 0);

  const std::vector<std::size_t> idx = {1, 4, 9};
  const auto f = fetch_topk(pool, 1, 1, idx);
  EXPECT_EQ(f.transfer.bytes, 2u * 3 * 8 * 2);
  EXPECT_EQ(f.values(2, 5), pool.cache(1).values(1)(9, 5));
}

TEST(Simulate, MatchesBruteForceDispatcherOnRandomDags) {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 300; ++trial) {
    const TransferTimeline t = random_dag(rng);
    const auto r = simulate(t);
    const auto want = oracle::dispatch(jobs_of(t));
    ASSERT_EQ(want.size(), t.events.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      EXPECT_NEAR(r.timeline.events[i].start, want[i], 1e-12);
    }
    const double cp = critical_path(t);
    EXPECT_NEAR(cp, oracle::longest_path(jobs_of(t)), 1e-12);
    EXPECT_GE(r.total_seconds + 1e-12, cp);
  }
}

TEST(Simulate, RejectsCyclesAndBadEvents) {
  TransferTimeline t;
  t.add({EventKind::Compute, 0, "a", 0.0, 1.0, {1}});
  t.add({EventKind::Compute, 0, "b", 0.0, 1.0, {0}});
  EXPECT_THROW(simulate(t), SchedulingError);
  EXPECT_THROW(critical_path(t), SchedulingError);
  TransferTimeline bad;
  bad.add({EventKind::Compute, 0, "a", 0.0, -1.0, {}});
  EXPECT_THROW(simulate(bad), SchedulingError);
  TransferTimeline range;
  range.add({EventKind::Compute, 0, "a", 0.0, 1.0, {4}});
  EXPECT_THROW(simulate(range), SchedulingError);
}

TEST(BufferExclusion, OverlappingReadWriteIsRejected) {
  TransferTimeline t;
  t.add({EventKind::Transfer, 0, "w", 0.0, 2.0, {}, 0, BufferAccess::Write});
  t.add({EventKind::Compute, 0, "r", 1.0, 2.0, {}, 0, BufferAccess::Read});
  EXPECT_THROW(check_buffer_exclusion(t), SchedulingError);
  t.events[1].start = 2.0;
  EXPECT_NO_THROW(check_buffer_exclusion(t));
  t.events[1].slot = 1;
  t.events[1].start = 0.5;
  EXPECT_NO_THROW(check_buffer_exclusion(t));
}

TEST(BuildTimeline, StructureAndInvariants) {
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + rng() % 6, steps = 1 + rng() % 3;
    const auto costs = random_costs(rng, L);
    const auto t = build_timeline(costs, LinkModel::pcie1(), steps);
    const auto r = simulate(t);
    const auto want = oracle::dispatch(jobs_of(t));
    for (std::size_t i = 0; i < want.size(); ++i) {
      EXPECT_NEAR(r.timeline.events[i].start, want[i], 1e-12);
    }
    std::size_t sparse = 0;
    for (const auto& c : costs) sparse += c.label == LayerLabel::SparsityFriendly;
    std::size_t fetches = 0;
    const auto& ev = r.timeline.events;
    for (std::size_t i = 0; i < ev.size(); ++i) {
      if (ev[i].label != event_label::kFetch) continue;
      ++fetches;
      ASSERT_EQ(ev[i].depends_on.size(), 1u);
      const auto& score = ev[ev[i].depends_on[0]];
      EXPECT_EQ(score.label, event_label::kScoring);
      EXPECT_EQ(score.layer, ev[i].layer);
      EXPECT_GE(ev[i].start, score.end());
    }
    EXPECT_EQ(fetches, sparse * steps);
    EXPECT_NO_THROW(check_buffer_exclusion(r.timeline));
    EXPECT_GE(r.total_seconds + 1e-12, critical_path(t));
    EXPECT_GE(r.overlap_fraction, 0.0);
    EXPECT_LE(r.overlap_fraction, 1.0);
  }
}

TEST(BuildTimeline, FreeLinkHasNoStalls) {
  std::vector<LayerCost> costs(4);
  for (auto& c : costs) {
    c.label = LayerLabel::SparsityFriendly;
    c.compute_seconds = 1e-3;
    c.scoring_seconds = 1e-4;
  }
  costs[0].label = LayerLabel::QuantizationFriendly;
  const auto r = simulate(build_timeline(costs, LinkModel{1e30, 0.0}, 2));
  EXPECT_EQ(r.prefetch_stalls, 0u);
  EXPECT_NEAR(r.total_seconds, 2 * (4e-3 + 3e-4), 1e-12);
  double span = 0.0;
  for (const auto& b : r.per_layer) span += b.span_seconds;
  EXPECT_NEAR(span, r.total_seconds, 1e-12);
}

TEST(BuildTimeline, SlowLinkStallsPrefetch) {
  std::vector<LayerCost> costs(2);
  for (auto& c : costs) {
    c.label = LayerLabel::SparsityFriendly;
    c.compute_seconds = 1e-3;
    c.prefetch_bytes = 40000000;  // 10 ms at 4 GB/s
  }
  const auto r = simulate(build_timeline(costs, LinkModel::pcie1()));
  // Prefetch 1 is emitted before fetch 0 and takes the link first, so
  // layer 1 then waits on layer 0 rather than on its own prefetch.
  EXPECT_EQ(r.prefetch_stalls, 1u);
  EXPECT_NEAR(r.total_seconds, 0.022, 1e-12);
  EXPECT_LT(r.overlap_fraction, 0.5);
}

TEST(Footprint, TableFormulas) {
  FootprintParams p;
  p.num_layers = 32;
  p.seq_len = 1000;
  p.num_kv_heads = 8;
  p.head_dim = 128;
  p.budget = 0.25;
  p.page_size = 16;
  p.q_layers = 2;
  p.group_size = 64;
  p.critical_channels = 8;
  const double L = 32, n = 1000, h = 8, dh = 128, eb = 2;
  EXPECT_DOUBLE_EQ(memory_footprint(FootprintMethod::Original, p), 2 * L * n * h * dh * eb);
  EXPECT_DOUBLE_EQ(memory_footprint(FootprintMethod::SnapKV, p), 0.25 * 2 * L * n * h * dh * eb);
  EXPECT_DOUBLE_EQ(memory_footprint(FootprintMethod::Quest, p),
                   2 * L * n * h * dh * (1 + 1.0 / 16) * eb);
  EXPECT_DOUBLE_EQ(memory_footprint(FootprintMethod::TailorQ, p),
                   2 * 2 * n * h * dh * (1.0 / 16 + 2.0 / 64) * eb);
  EXPECT_DOUBLE_EQ(memory_footprint(FootprintMethod::TailorS, p), 2 * n * h * 8 * eb);
  p.bits = 2;
  EXPECT_DOUBLE_EQ(memory_footprint(FootprintMethod::TailorQ, p),
                   2 * 2 * n * h * dh * (2.0 / 16 + 2.0 / 64) * eb);
  FootprintParams missing;
  missing.seq_len = 4;
  missing.num_kv_heads = 1;
  EXPECT_THROW(memory_footprint(FootprintMethod::Original, missing), ParameterError);
}

TEST(Footprint, TailorTotalsOverLabels) {
  FootprintParams p;
  p.seq_len = 1024;
  p.num_kv_heads = 4;
  p.head_dim = 64;
  p.group_size = 64;
  p.critical_channels = 8;
  const std::vector<LayerLabel> labels = {LayerLabel::QuantizationFriendly,
                                          LayerLabel::SparsityFriendly,
                                          LayerLabel::SparsityFriendly};
  const auto t = tailor_footprint(labels, p, 64);
  EXPECT_DOUBLE_EQ(t.quantized_bytes, 2.0 * 1024 * 4 * 64 * (1.0 / 16 + 2.0 / 64) * 2);
  EXPECT_DOUBLE_EQ(t.critical_key_bytes, 2.0 * 1024 * 4 * 8 * 2);
  EXPECT_DOUBLE_EQ(t.local_window_bytes, 2.0 * 64 * 2 * 4 * 64 * 2);
  EXPECT_DOUBLE_EQ(t.total(), t.quantized_bytes + t.critical_key_bytes + t.local_window_bytes);
}
