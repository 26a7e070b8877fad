#include <algorithm>
#include <map>

#include "doctest.h"
#include "redwatch/error.hpp"
#include "redwatch/synth.hpp"
#include "support.hpp"

using namespace redwatch;
using rwtest::Builder;

namespace {

DetectionResult run(const Trace& t, DetectorConfig c) {
  Cct tree;
  return run_detector(t, c, tree);
}

DetectorConfig stores(uint64_t period = 1, uint64_t watchpoints = 4) {
  DetectorConfig c;
  c.mode = Mode::Stores;
  c.period = period;
  c.watchpoints = watchpoints;
  return c;
}

DetectorConfig loads(uint64_t period = 1, uint64_t watchpoints = 4) {
  DetectorConfig c = stores(period, watchpoints);
  c.mode = Mode::Loads;
  return c;
}

}  // namespace

TEST_CASE("burying scenario keeps the cross-call pair") {
  // w1 and w2 in F_a, w3 in F_b, all storing 5 to A.
  const Trace t = Builder{}
                      .ncall(1, "F_a")
                      .store(0xA000, 5, 0, 0x401)
                      .store(0xA000, 5, 0, 0x402)
                      .nret(1)
                      .ncall(2, "F_b")
                      .store(0xA000, 5, 0, 0x403)
                      .nret(2)
                      .build();
  const DetectionResult r = run(t, stores(1, 1));
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].armed_seq == 1);
  CHECK(r.pairs[0].trap_seq == 5);
  CHECK(r.counters.absorbed_same_call == 1);
  CHECK(r.counters.evicted_by_reservoir == 0);
}

TEST_CASE("single access") {
  const DetectionResult r = run(Builder{}.store(0x10, 1).build(), stores());
  CHECK(r.pairs.empty());
  CHECK(r.counters.unresolved_at_end <= 1);
  CHECK(r.counters.conserved());
}

TEST_CASE("store rules") {
  SUBCASE("cross-call equal store is redundant, weight is the period") {
    const Trace t = Builder{}.ncall(1).store(0x10, 7).nret(1).ncall(2).store(0x10, 7).nret(2).build();
    const DetectionResult r = run(t, stores());
    REQUIRE(r.pairs.size() == 1);
    CHECK(r.pairs[0].weight == 1);
    CHECK(r.pairs[0].value == 7);
    CHECK(r.counters.resolved_redundant == 1);
  }
  SUBCASE("different value resolves silently") {
    const Trace t = Builder{}.ncall(1).store(0x10, 7).nret(1).ncall(2).store(0x10, 8).nret(2).build();
    const DetectionResult r = run(t, stores());
    CHECK(r.pairs.empty());
    CHECK(r.counters.resolved_nonredundant == 1);
  }
  SUBCASE("loads do not trap") {
    const Trace t = Builder{}.ncall(1).store(0x10, 7).nret(1).ncall(2).load(0x10, 7).nret(2).build();
    const DetectionResult r = run(t, stores());
    CHECK(r.counters.unresolved_at_end == 1);
  }
  SUBCASE("values compare under the width mask and need the same width") {
    Builder b;
    b.ncall(1).access(0, AccessKind::Store, 0x10, 0xff, 1).nret(1);
    b.ncall(2).access(0, AccessKind::Store, 0x10, 0xff, 2).nret(2);
    const DetectionResult r = run(b.build(), stores());
    CHECK(r.pairs.empty());
    CHECK(r.counters.resolved_nonredundant == 1);
  }
  SUBCASE("partial overlap traps") {
    Builder b;
    b.ncall(1).access(0, AccessKind::Store, 0x10, 1, 8).nret(1);
    b.ncall(2).access(0, AccessKind::Store, 0x17, 0, 1).nret(2);
    CHECK(run(b.build(), stores()).counters.resolved_nonredundant == 1);
  }
}

TEST_CASE("load rules") {
  SUBCASE("store trap disarms without a pair") {
    const Trace t = Builder{}.ncall(1).load(0x10, 7).nret(1).ncall(2).store(0x10, 7).nret(2).build();
    const DetectionResult r = run(t, loads());
    CHECK(r.pairs.empty());
    CHECK(r.counters.disarmed_by_store_trap == 1);
  }
  SUBCASE("cross-call equal load is redundant") {
    const Trace t = Builder{}.ncall(1).load(0x10, 7).nret(1).ncall(2).load(0x10, 7).nret(2).build();
    const DetectionResult r = run(t, loads());
    REQUIRE(r.pairs.size() == 1);
    CHECK(r.pairs[0].mode == Mode::Loads);
  }
  SUBCASE("same-call store still invalidates") {
    const Trace t = Builder{}.ncall(1).load(0x10, 7).store(0x10, 7).nret(1).ncall(2).load(0x10, 7).nret(2).build();
    const DetectionResult r = run(t, loads(1, 1));
    CHECK(r.counters.disarmed_by_store_trap == 1);
    CHECK(r.pairs.empty());
  }
}

TEST_CASE("accesses outside any call share the empty call context") {
  const Trace t = Builder{}.store(0x10, 1).store(0x10, 1).ncall(1).store(0x10, 1).nret(1).build();
  const DetectionResult r = run(t, stores(1, 1));
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].armed_seq == 0);
  CHECK(r.pairs[0].trap_seq == 3);
}

TEST_CASE("reservoir_decide") {
  SplitMix64 rng(1);
  CHECK(reservoir_decide(1, 4, 4, rng).action == ReservoirDecision::Action::Keep);
  for (int i = 0; i < 100; ++i) {
    const auto d = reservoir_decide(4, 0, 4, rng);
    CHECK(d.action == ReservoirDecision::Action::KeepEvict);
    CHECK(d.victim < 4);
  }
  // Keep-evict rate W/M and a uniform victim.
  constexpr int kTrials = 200'000;
  int kept = 0;
  std::array<int, 4> victims{};
  for (int i = 0; i < kTrials; ++i) {
    const auto d = reservoir_decide(40, 0, 4, rng);
    if (d.action == ReservoirDecision::Action::KeepEvict) {
      ++kept;
      ++victims[d.victim];
    }
  }
  CHECK(std::abs(kept / double(kTrials) - 0.1) < 0.005);
  for (int v : victims) CHECK(std::abs(v / double(kept) - 0.25) < 0.02);
}

TEST_CASE("check_filters") {
  LiveObjects objs;
  objs.alloc({1, 0x1000, 64});
  ThreadStacks st;
  FilterConfig cfg;
  cfg.excluded_ip_ranges.push_back({0x500, 0x600});
  const Access plain{0x400, 0x1010, 8, AccessKind::Store, 0};
  CHECK(check_filters(plain, st, objs, cfg) == FilterVerdict::Pass);

  Access a = plain;
  a.ip = 0x500;
  CHECK(check_filters(a, st, objs, cfg) == FilterVerdict::FilteredIp);
  a.ip = 0x600;
  CHECK(check_filters(a, st, objs, cfg) == FilterVerdict::Pass);

  a = plain;
  a.addr = 0x1000;
  CHECK(check_filters(a, st, objs, cfg) == FilterVerdict::FilteredJunk);
  a.addr = 0x100f;
  CHECK(check_filters(a, st, objs, cfg) == FilterVerdict::FilteredJunk);
  cfg.junk_header_bytes = 0;
  CHECK(check_filters(a, st, objs, cfg) == FilterVerdict::Pass);
  cfg.junk_header_bytes = 16;

  st.open_regions[static_cast<std::size_t>(Region::Gc)] = 1;
  CHECK(check_filters(plain, st, objs, cfg) == FilterVerdict::Hibernation);
  // Order: ip before junk before hibernation.
  a = plain;
  a.ip = 0x550;
  a.addr = 0x1000;
  CHECK(check_filters(a, st, objs, cfg) == FilterVerdict::FilteredIp);
  a.ip = 0x400;
  CHECK(check_filters(a, st, objs, cfg) == FilterVerdict::FilteredJunk);

  st.open_regions = {};
  st.open_regions[static_cast<std::size_t>(Region::Blocklisted)] = 1;
  CHECK(check_filters(plain, st, objs, cfg) == FilterVerdict::Pass);
}

TEST_CASE("pin_object") {
  LiveObjects objs;
  objs.alloc({9, 0x2000, 64});
  CHECK(pin_object(0x2020, objs) == 9u);
  CHECK_FALSE(pin_object(0x3000, objs).has_value());
}

TEST_CASE("free of a pinned object disarms first") {
  const Trace t = Builder{}
                      .alloc(1, 0x2000, 64)
                      .ncall(1)
                      .store(0x2020, 3)
                      .nret(1)
                      .free(1)
                      .alloc(2, 0x2000, 64)
                      .ncall(2)
                      .store(0x2020, 3)
                      .nret(2)
                      .build();
  Cct tree;
  Detector d(stores(), tree);
  for (const TraceEvent& ev : t) {
    d.feed(ev);
    if (ev.seq < 4) continue;
    for (const auto& wp : d.slots()) {
      if (wp) CHECK(wp->pinned_obj != std::optional<uint64_t>(1));
    }
  }
  const DetectionResult r = d.finish();
  CHECK(r.pairs.empty());
  CHECK(r.counters.disarmed_by_free == 1);
  CHECK(r.counters.unresolved_at_end == 1);
}

TEST_CASE("hibernation") {
  SUBCASE("candidates inside a region are filtered") {
    const Trace t = Builder{}.enter(Region::Gc).store(0x10, 1).exit(Region::Gc).build();
    CHECK(run(t, stores()).counters.filtered_hibernation == 1);
  }
  SUBCASE("a trap inside a region disarms silently") {
    const Trace t = Builder{}
                        .ncall(1)
                        .store(0x10, 1)
                        .nret(1)
                        .enter(Region::Loader)
                        .ncall(2)
                        .store(0x10, 1)
                        .nret(2)
                        .exit(Region::Loader)
                        .ncall(3)
                        .store(0x10, 1)
                        .nret(3)
                        .build();
    const DetectionResult r = run(t, stores());
    CHECK(r.pairs.empty());
    CHECK(r.counters.disarmed_by_hibernation == 1);
  }
  SUBCASE("a region on another thread does not matter") {
    const Trace t = Builder{}
                        .ncall(1)
                        .store(0x10, 1)
                        .nret(1)
                        .enter(Region::Gc, 1)
                        .ncall(2)
                        .store(0x10, 1)
                        .nret(2)
                        .build();
    CHECK(run(t, stores()).pairs.size() == 1);
  }
}

TEST_CASE("reservoir eviction is counted") {
  Builder b;
  for (uint64_t i = 0; i < 50; ++i) b.ncall(i + 1).store(0x100 + 8 * i, i).nret(i + 1);
  const DetectionResult r = run(b.build(), stores(1, 2));
  CHECK(r.counters.reservoir_offered == 50);
  CHECK(r.counters.armed == 2 + r.counters.evicted_by_reservoir);
  CHECK(r.counters.unresolved_at_end == 2);
  CHECK(r.counters.conserved());
}

TEST_CASE("sampling period") {
  Builder b;
  for (uint64_t i = 0; i < 1000; ++i) b.store(0x100 + 8 * (i % 16), i);
  const DetectionResult r = run(b.build(), stores(10));
  CHECK(r.counters.candidates == 100);
  CHECK(r.counters.accesses_seen == 1000);
}

TEST_CASE("invalid config") {
  Cct tree;
  CHECK_THROWS_AS(Detector(stores(0), tree), InvalidConfig);
  CHECK_THROWS_AS(Detector(stores(1, 0), tree), InvalidConfig);
  DetectorConfig c = stores();
  c.filters.excluded_ip_ranges.push_back({5, 5});
  CHECK_THROWS_AS(Detector(c, tree), InvalidConfig);
}

TEST_CASE("detector properties on random traces") {
  for (uint64_t seed = 0; seed < 40; ++seed) {
    const Trace t = rwtest::random_trace(seed, 2500, 1 + seed % 3);
    for (Mode mode : {Mode::Stores, Mode::Loads}) {
      FilterConfig filters;
      if (seed % 4 == 1) filters.excluded_ip_ranges.push_back({0x400020, 0x400040});
      if (seed % 4 == 2) filters.junk_header_bytes = 0;
      if (seed % 4 == 3) filters.hibernation_regions = RegionSet{Region::Blocklisted};
      CAPTURE(seed);
      CAPTURE(to_string(mode));

      // Exhaustive equivalence with the brute-force reference and the oracle.
      const rwtest::Reference ref = rwtest::naive_pairs(t, mode, filters);
      Cct tree;
      const DetectionResult full = run_detector(t, rwtest::exhaustive_config(mode, filters), tree);
      CHECK(rwtest::seq_pairs(full.pairs) == ref.pairs);
      CHECK(full.counters.resolved_redundant == ref.redundant);
      CHECK(full.counters.resolved_redundant + full.counters.resolved_nonredundant == ref.resolutions);
      const OracleResult oracle = oracle_pairs(t, mode, filters);
      CHECK(rwtest::seq_pairs(oracle.pairs) == ref.pairs);
      CHECK(oracle.resolutions == ref.resolutions);

      // Sampled runs: determinism, conservation, soundness, safeguards.
      DetectorConfig c;
      c.mode = mode;
      c.period = 1 + seed % 5;
      c.watchpoints = 1 + seed % 4;
      c.seed = seed;
      c.filters = filters;
      Cct t1, t2;
      const DetectionResult a = run_detector(t, c, t1);
      const DetectionResult b = run_detector(t, c, t2);
      CHECK(a.pairs == b.pairs);
      CHECK(a.counters == b.counters);
      CHECK(t1.node_count() == t2.node_count());
      CHECK(a.counters.conserved());
      CHECK(a.counters.candidates_accounted());

      const auto ctx = replay_stacks(t);
      std::map<uint64_t, const AccessContext*> by_seq;
      for (const AccessContext& x : ctx) by_seq[x.seq] = &x;
      for (const RedundancyPair& p : a.pairs) {
        const AccessContext& armed = *by_seq.at(p.armed_seq);
        const AccessContext& trap = *by_seq.at(p.trap_seq);
        CHECK(p.armed_seq < p.trap_seq);
        CHECK(armed.access.value == trap.access.value);
        CHECK(armed.access.addr == trap.access.addr);
        CHECK(armed.access.width == trap.access.width);
        CHECK(armed.access.kind == sampled_kind(mode));
        CHECK(trap.access.kind == sampled_kind(mode));
        CHECK(armed.innermost_call != trap.innermost_call);
        for (std::size_t r = 0; r < kRegionCount; ++r) {
          if (filters.hibernation_regions.contains(static_cast<Region>(r))) CHECK(trap.open_regions[r] == 0);
        }
        CHECK(t1.contains(p.killed_path));
        CHECK(t1.contains(p.killing_path));
        CHECK(p.weight == c.period);
      }
    }
  }
}

TEST_CASE("pin safety while streaming random traces") {
  for (uint64_t seed = 100; seed < 120; ++seed) {
    const Trace t = rwtest::random_trace(seed, 3000, 2);
    Cct tree;
    DetectorConfig c = loads(1, 3);
    c.seed = seed;
    Detector d(c, tree);
    LiveObjects live;
    for (const TraceEvent& ev : t) {
      d.feed(ev);
      if (auto* al = std::get_if<Alloc>(&ev.payload)) live.alloc(*al);
      if (auto* fr = std::get_if<Free>(&ev.payload)) live.free(fr->obj_id);
      for (const auto& wp : d.slots()) {
        if (wp && wp->pinned_obj) REQUIRE(live.find(*wp->pinned_obj).has_value());
      }
    }
    CHECK(d.finish().counters.conserved());
  }
}

TEST_CASE("feeding after finish is an internal error") {
  Cct tree;
  Detector d(stores(), tree);
  d.finish();
  CHECK_THROWS_AS(d.feed(TraceEvent{0, 0, Access{}}), InternalError);
}
