#include <algorithm>
#include <limits>
#include <unordered_map>

#include "redwatch/analysis.hpp"
#include "redwatch/error.hpp"

namespace redwatch {

namespace {

constexpr uint64_t kNever = std::numeric_limits<uint64_t>::max();

struct AccessRecord {
  uint64_t seq = 0;
  Access access;
  std::optional<uint64_t> call;
  bool hibernating = false;
  bool watched = false;        // sampled kind and passes filters
  std::size_t pin = SIZE_MAX;  // index into object instances
};

struct Instance {
  uint64_t free_seq = kNever;
};

bool same_location_value(const Access& a, const Access& b) {
  return a.addr == b.addr && a.width == b.width &&
         (a.value & width_mask(a.width)) == (b.value & width_mask(b.width));
}

/// Walks, in trace order, the indices of records that touch any 8-byte granule
/// of a range. A record spanning two granules appears in both lists and is
/// yielded once.
class GranuleCursor {
 public:
  GranuleCursor(const std::unordered_map<uint64_t, std::vector<std::size_t>>& index, uint64_t lo,
                uint64_t hi, std::size_t after) {
    for (uint64_t g = lo >> 3; g <= (hi - 1) >> 3; ++g) {
      auto it = index.find(g);
      if (it == index.end()) continue;
      const auto& v = it->second;
      auto pos = std::upper_bound(v.begin(), v.end(), after);
      streams_.push_back({&v, static_cast<std::size_t>(pos - v.begin())});
    }
  }

  std::optional<std::size_t> next() {
    std::optional<std::size_t> best;
    for (const Stream& s : streams_) {
      if (s.pos < s.list->size() && (!best || (*s.list)[s.pos] < *best)) best = (*s.list)[s.pos];
    }
    if (!best) return std::nullopt;
    for (Stream& s : streams_) {
      if (s.pos < s.list->size() && (*s.list)[s.pos] == *best) ++s.pos;
    }
    return best;
  }

 private:
  struct Stream {
    const std::vector<std::size_t>* list;
    std::size_t pos;
  };
  std::vector<Stream> streams_;
};

}  // namespace

OracleResult oracle_pairs(std::span<const TraceEvent> events, Mode mode, const FilterConfig& filters,
                          Cct* tree) {
  // Pass 1: per-access context.
  std::vector<AccessRecord> records;
  std::vector<Instance> instances;
  {
    StackReplay replay;
    LiveObjects objects;
    std::unordered_map<uint64_t, std::size_t> live_instance;
    for (const TraceEvent& ev : events) {
      replay.apply(ev);
      if (const auto* a = std::get_if<Access>(&ev.payload)) {
        const ThreadStacks& st = replay.stacks(ev.thread);
        AccessRecord r;
        r.seq = ev.seq;
        r.access = *a;
        r.call = st.innermost_call();
        r.hibernating = filters.hibernation_regions.any_open(st);
        r.watched = a->kind == sampled_kind(mode) &&
                    check_filters(*a, st, objects, filters) == FilterVerdict::Pass;
        if (auto obj = objects.containing(a->addr)) r.pin = live_instance.at(obj->obj_id);
        records.push_back(r);
      } else if (const auto* al = std::get_if<Alloc>(&ev.payload)) {
        if (objects.alloc(*al) != LiveObjects::AllocResult::Ok) {
          throw ObjectLifetime(ev.seq, "invalid alloc of object " + std::to_string(al->obj_id));
        }
        live_instance[al->obj_id] = instances.size();
        instances.push_back({});
      } else if (const auto* fr = std::get_if<Free>(&ev.payload)) {
        if (!objects.free(fr->obj_id)) {
          throw ObjectLifetime(ev.seq, "free of object " + std::to_string(fr->obj_id) + " that is not live");
        }
        instances[live_instance.at(fr->obj_id)].free_seq = ev.seq;
        live_instance.erase(fr->obj_id);
      }
    }
  }

  // Records that can act on a watch: stores in store mode, everything in load mode.
  std::unordered_map<uint64_t, std::vector<std::size_t>> by_granule;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Access& a = records[i].access;
    if (mode == Mode::Stores && a.kind != AccessKind::Store) continue;
    for (uint64_t g = a.addr >> 3; g <= (a.end() - 1) >> 3; ++g) by_granule[g].push_back(i);
  }

  // Pass 2: resolve each watched access by scanning forward on its location.
  OracleResult result;
  std::vector<bool> absorbed(records.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> hits;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const AccessRecord& w = records[i];
    if (!w.watched || absorbed[i]) continue;
    const uint64_t free_seq = w.pin == SIZE_MAX ? kNever : instances[w.pin].free_seq;

    GranuleCursor cursor(by_granule, w.access.addr, w.access.end(), i);
    while (auto j = cursor.next()) {
      const AccessRecord& t = records[*j];
      if (!t.access.overlaps(w.access.addr, w.access.end())) continue;
      if (free_seq != kNever && t.seq > free_seq) break;  // unpinned by the free
      if (t.hibernating) break;
      if (mode == Mode::Loads && t.access.kind == AccessKind::Store) break;
      const bool equal = same_location_value(w.access, t.access);
      if (t.call == w.call) {
        if (equal) absorbed[*j] = true;
        continue;
      }
      ++result.resolutions;
      if (equal) {
        ++result.redundant;
        hits.emplace_back(i, *j);
      }
      break;
    }
  }

  std::sort(hits.begin(), hits.end(), [&](const auto& a, const auto& b) {
    return std::pair(a.second, a.first) < std::pair(b.second, b.first);
  });

  std::unordered_map<uint64_t, PathId> paths;
  if (tree != nullptr && !hits.empty()) {
    for (const auto& [i, j] : hits) {
      paths.emplace(records[i].seq, PathId{});
      paths.emplace(records[j].seq, PathId{});
    }
    StackReplay replay;
    for (const TraceEvent& ev : events) {
      replay.apply(ev);
      const auto* a = std::get_if<Access>(&ev.payload);
      if (a == nullptr) continue;
      auto it = paths.find(ev.seq);
      if (it == paths.end()) continue;
      const ThreadStacks& st = replay.stacks(ev.thread);
      it->second = tree->intern_path(merge_hybrid_path(st.native_stack, st.py_stack),
                                     AccessLeaf{a->ip, a->kind});
    }
  }

  result.pairs.reserve(hits.size());
  for (const auto& [i, j] : hits) {
    const Access& a = records[i].access;
    RedundancyPair p;
    p.mode = mode;
    p.addr = a.addr;
    p.width = a.width;
    p.value = a.value & width_mask(a.width);
    p.armed_seq = records[i].seq;
    p.trap_seq = records[j].seq;
    p.weight = 1;
    if (tree != nullptr) {
      p.killed_path = paths.at(p.armed_seq);
      p.killing_path = paths.at(p.trap_seq);
    }
    result.pairs.push_back(p);
  }
  return result;
}

}  // namespace redwatch
