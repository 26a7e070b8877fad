#pragma once

// Helpers shared by the test binaries: a trace builder, a random well-formed
// trace generator, and a brute-force reference for redundancy pairs.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "redwatch/analysis.hpp"
#include "redwatch/detector.hpp"
#include "redwatch/rng.hpp"
#include "redwatch/trace.hpp"

namespace rwtest {

using namespace redwatch;

class Builder {
 public:
  Builder& access(uint32_t th, AccessKind k, uint64_t addr, uint64_t value, uint8_t width = 8,
                  uint64_t ip = 0x400100) {
    return push(th, Access{ip, addr, width, k, value});
  }
  Builder& store(uint64_t addr, uint64_t value, uint32_t th = 0, uint64_t ip = 0x400100) {
    return access(th, AccessKind::Store, addr, value, 8, ip);
  }
  Builder& load(uint64_t addr, uint64_t value, uint32_t th = 0, uint64_t ip = 0x400200) {
    return access(th, AccessKind::Load, addr, value, 8, ip);
  }
  Builder& ncall(uint64_t id, std::string sym = "fn", uint32_t th = 0, bool eval = false) {
    return push(th, NativeCall{id, std::move(sym), "lib.so", 0x7f0000 + id, eval});
  }
  Builder& eval(uint64_t id, uint32_t th = 0) {
    return ncall(id, "_PyEval_EvalFrameDefault", th, true);
  }
  Builder& nret(uint64_t id, uint32_t th = 0) { return push(th, NativeReturn{id}); }
  Builder& pycall(uint64_t id, std::string fn, uint32_t line = 1, uint32_t th = 0) {
    return push(th, PyCall{id, std::move(fn), "app.py", line});
  }
  Builder& pyret(uint64_t id, uint32_t th = 0) { return push(th, PyReturn{id}); }
  Builder& enter(Region r, uint32_t th = 0) { return push(th, RegionEnter{r}); }
  Builder& exit(Region r, uint32_t th = 0) { return push(th, RegionExit{r}); }
  Builder& alloc(uint64_t obj, uint64_t base, uint64_t size, uint32_t th = 0) {
    return push(th, Alloc{obj, base, size});
  }
  Builder& free(uint64_t obj, uint32_t th = 0) { return push(th, Free{obj}); }

  Trace build() const { return events_; }
  std::size_t size() const { return events_.size(); }

 private:
  Builder& push(uint32_t th, Payload p) {
    events_.push_back(TraceEvent{events_.size(), th, std::move(p)});
    return *this;
  }
  Trace events_;
};

/// Random well-formed trace: nested calls with eval/python pairing, regions,
/// object churn, and accesses of mixed widths on a small address set so that
/// partial overlaps and value repeats are common.
inline Trace random_trace(uint64_t seed, std::size_t n_events, uint32_t threads = 2) {
  SplitMix64 rng(seed);
  struct ThreadState {
    std::vector<std::pair<uint64_t, bool>> native;  // (call id, eval)
    std::vector<uint64_t> py;
    std::vector<Region> regions;
  };
  std::vector<ThreadState> st(threads);
  Builder b;
  uint64_t next_call = 1;
  uint64_t next_frame = 1;
  uint64_t next_obj = 1;
  constexpr uint64_t kBase = 0x10000;
  std::vector<std::optional<uint64_t>> objects(4);  // slot -> live obj id; slot covers 64 bytes
  const uint8_t widths[] = {1, 2, 4, 8};

  while (b.size() < n_events) {
    const auto th = static_cast<uint32_t>(rng.below(threads));
    ThreadState& t = st[th];
    const uint64_t roll = rng.below(100);
    if (roll < 55) {
      const uint8_t w = widths[rng.below(4)];
      const uint64_t addr = kBase + rng.below(4) * 64 + rng.below(24);
      const uint64_t value = rng.below(3) & width_mask(w);
      const auto kind = rng.below(2) == 0 ? AccessKind::Load : AccessKind::Store;
      b.access(th, kind, addr, value, w, 0x400000 + 0x10 * rng.below(8));
    } else if (roll < 68) {
      if (t.native.size() < 6) {
        if (rng.below(3) == 0) {
          const uint64_t id = next_call++;
          b.eval(id, th);
          t.native.push_back({id, true});
          const uint64_t f = next_frame++;
          b.pycall(f, "py" + std::to_string(rng.below(4)), static_cast<uint32_t>(rng.below(50)), th);
          t.py.push_back(f);
        } else {
          const uint64_t id = next_call++;
          b.ncall(id, "n" + std::to_string(rng.below(5)), th);
          t.native.push_back({id, false});
        }
      }
    } else if (roll < 80) {
      if (!t.native.empty()) {
        auto [id, is_eval] = t.native.back();
        if (is_eval) {
          b.pyret(t.py.back(), th);
          t.py.pop_back();
        }
        b.nret(id, th);
        t.native.pop_back();
      }
    } else if (roll < 86) {
      if (t.regions.empty() || rng.below(2) == 0) {
        const Region r = static_cast<Region>(rng.below(kRegionCount));
        b.enter(r, th);
        t.regions.push_back(r);
      } else {
        b.exit(t.regions.back(), th);
        t.regions.pop_back();
      }
    } else {
      const uint64_t slot = rng.below(objects.size());
      if (objects[slot]) {
        b.free(*objects[slot], th);
        objects[slot].reset();
      } else {
        objects[slot] = next_obj++;
        b.alloc(*objects[slot], kBase + slot * 64, 32 + rng.below(33), th);
      }
    }
  }
  return b.build();
}

/// Quadratic reference: for each watched access, look at every later access
/// in turn and apply the trap rules directly.
struct Reference {
  std::multiset<std::pair<uint64_t, uint64_t>> pairs;  // (armed_seq, trap_seq)
  uint64_t resolutions = 0;
  uint64_t redundant = 0;
};

inline Reference naive_pairs(const Trace& trace, Mode mode, const FilterConfig& filters) {
  struct Row {
    std::size_t event;
    Access a;
    std::optional<uint64_t> call;
    bool hib;
    bool watched;
  };
  std::vector<Row> rows;
  std::map<uint64_t, uint64_t> instance;  // obj id -> generation
  std::map<std::size_t, std::pair<uint64_t, uint64_t>> free_events;
  std::vector<std::optional<std::pair<uint64_t, uint64_t>>> row_pin;
  StackReplay replay;
  LiveObjects live;
  for (std::size_t e = 0; e < trace.size(); ++e) {
    const TraceEvent& ev = trace[e];
    replay.apply(ev);
    if (auto* a = std::get_if<Access>(&ev.payload)) {
      const ThreadStacks& st = replay.stacks(ev.thread);
      bool hib = false;
      for (std::size_t r = 0; r < kRegionCount; ++r) {
        if (filters.hibernation_regions.contains(static_cast<Region>(r)) && st.open_regions[r] > 0) {
          hib = true;
        }
      }
      bool excluded = false;
      for (const IpRange& ipr : filters.excluded_ip_ranges) excluded |= a->ip >= ipr.lo && a->ip < ipr.hi;
      auto obj = live.containing(a->addr);
      const bool junk = obj && a->addr < obj->base + filters.junk_header_bytes;
      const bool watched = a->kind == sampled_kind(mode) && !excluded && !junk && !hib;
      rows.push_back({e, *a, st.innermost_call(), hib, watched});
      if (obj) {
        row_pin.push_back(std::pair(obj->obj_id, instance[obj->obj_id]));
      } else {
        row_pin.push_back(std::nullopt);
      }
    } else if (auto* al = std::get_if<Alloc>(&ev.payload)) {
      live.alloc(*al);
    } else if (auto* fr = std::get_if<Free>(&ev.payload)) {
      free_events[e] = {fr->obj_id, instance[fr->obj_id]};
      ++instance[fr->obj_id];
      live.free(fr->obj_id);
    }
  }

  Reference ref;
  std::vector<bool> absorbed(rows.size(), false);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].watched || absorbed[i]) continue;
    const Access& w = rows[i].a;
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      // A free of the pinned object between the two accesses ends the watch.
      bool freed = false;
      if (row_pin[i]) {
        for (auto it = free_events.upper_bound(rows[i].event);
             it != free_events.end() && it->first < rows[j].event; ++it) {
          if (it->second == *row_pin[i]) freed = true;
        }
      }
      const Access& t = rows[j].a;
      const bool overlap = t.addr < w.addr + w.width && w.addr < t.addr + t.width;
      if (!overlap) {
        if (freed) break;
        continue;
      }
      if (freed) break;
      if (mode == Mode::Stores && t.kind != AccessKind::Store) continue;
      if (rows[j].hib) break;
      if (mode == Mode::Loads && t.kind == AccessKind::Store) break;
      const bool equal = t.addr == w.addr && t.width == w.width && t.value == w.value;
      if (rows[j].call == rows[i].call) {
        if (equal) absorbed[j] = true;
        continue;
      }
      ++ref.resolutions;
      if (equal) {
        ++ref.redundant;
        ref.pairs.insert({trace[rows[i].event].seq, trace[rows[j].event].seq});
      }
      break;
    }
  }
  return ref;
}

inline std::multiset<std::pair<uint64_t, uint64_t>> seq_pairs(const std::vector<RedundancyPair>& ps) {
  std::multiset<std::pair<uint64_t, uint64_t>> out;
  for (const RedundancyPair& p : ps) out.insert({p.armed_seq, p.trap_seq});
  return out;
}

inline DetectorConfig exhaustive_config(Mode mode, FilterConfig filters = {}) {
  DetectorConfig c;
  c.mode = mode;
  c.period = 1;
  c.watchpoints = kUnboundedWatchpoints;
  c.filters = std::move(filters);
  return c;
}

}  // namespace rwtest
