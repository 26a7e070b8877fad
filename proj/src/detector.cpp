#include "redwatch/detector.hpp"

#include <algorithm>

#include "redwatch/error.hpp"

namespace redwatch {

std::string_view to_string(Mode mode) { return mode == Mode::Loads ? "loads" : "stores"; }

std::optional<Mode> parse_mode(std::string_view name) {
  if (name == "loads") return Mode::Loads;
  if (name == "stores") return Mode::Stores;
  return std::nullopt;
}

std::string_view to_string(FilterVerdict verdict) {
  switch (verdict) {
    case FilterVerdict::Pass:
      return "Pass";
    case FilterVerdict::FilteredIp:
      return "FilteredIp";
    case FilterVerdict::FilteredJunk:
      return "FilteredJunk";
    case FilterVerdict::Hibernation:
      return "Hibernation";
  }
  return "?";
}

void DetectorConfig::validate() const {
  if (period == 0) throw InvalidConfig("sampling period must be >= 1");
  if (watchpoints == 0) throw InvalidConfig("watchpoint count must be >= 1");
  for (const IpRange& r : filters.excluded_ip_ranges) {
    if (r.lo >= r.hi) throw InvalidConfig("excluded ip range must satisfy lo < hi");
  }
}

FilterVerdict check_filters(const Access& access, const ThreadStacks& stacks,
                            const LiveObjects& objects, const FilterConfig& config) {
  for (const IpRange& r : config.excluded_ip_ranges) {
    if (r.contains(access.ip)) return FilterVerdict::FilteredIp;
  }
  if (config.junk_header_bytes > 0) {
    if (auto obj = objects.containing(access.addr);
        obj && access.addr - obj->base < config.junk_header_bytes) {
      return FilterVerdict::FilteredJunk;
    }
  }
  if (config.hibernation_regions.any_open(stacks)) return FilterVerdict::Hibernation;
  return FilterVerdict::Pass;
}

std::optional<uint64_t> pin_object(uint64_t addr, const LiveObjects& objects) {
  if (auto obj = objects.containing(addr)) return obj->obj_id;
  return std::nullopt;
}

ReservoirDecision reservoir_decide(uint64_t offered, uint64_t free_slots, uint64_t capacity,
                                   SplitMix64& rng) {
  if (free_slots > 0) return {ReservoirDecision::Action::Keep, 0};
  // One draw gives both the W/M keep probability and a uniform victim.
  const uint64_t j = rng.below(offered);
  if (j < capacity) return {ReservoirDecision::Action::KeepEvict, j};
  return {ReservoirDecision::Action::Discard, 0};
}

// ---------------------------------------------------------------------------

Detector::Detector(DetectorConfig config, Cct& tree)
    : config_(std::move(config)), tree_(tree), rng_(config_.seed) {
  config_.validate();
  // The PMU counter starts at a seeded phase so that different seeds sample
  // different accesses at the same period.
  SplitMix64 phase_rng = rng_.split();
  pmu_counter_ = phase_rng.below(config_.period);
}

void Detector::feed(const TraceEvent& ev) {
  if (finished_) throw InternalError("detector fed after finish()");
  replay_.apply(ev);
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Access>) {
          on_access(ev, p);
        } else if constexpr (std::is_same_v<T, Alloc>) {
          if (objects_.alloc(p) != LiveObjects::AllocResult::Ok) {
            throw ObjectLifetime(ev.seq, "invalid alloc of object " + std::to_string(p.obj_id));
          }
        } else if constexpr (std::is_same_v<T, Free>) {
          on_free(ev, p);
        }
      },
      ev.payload);
}

void Detector::on_access(const TraceEvent& ev, const Access& access) {
  const ThreadStacks& st = replay_.stacks(ev.thread);
  ++counters_.accesses_seen;

  bool absorbed = false;
  trap(ev, access, st, absorbed);

  if (access.kind != sampled_kind(config_.mode)) return;
  if (++pmu_counter_ % config_.period != 0) return;
  ++counters_.candidates;

  switch (check_filters(access, st, objects_, config_.filters)) {
    case FilterVerdict::FilteredIp:
      ++counters_.filtered_ip;
      return;
    case FilterVerdict::FilteredJunk:
      ++counters_.filtered_junk;
      return;
    case FilterVerdict::Hibernation:
      ++counters_.filtered_hibernation;
      return;
    case FilterVerdict::Pass:
      break;
  }
  // The access repeated a watched value inside the watched call; the armed
  // watchpoint already covers it.
  if (absorbed) {
    ++counters_.absorbed_same_call;
    return;
  }

  const uint64_t offered = ++counters_.reservoir_offered;
  const uint64_t free_slots = config_.watchpoints - armed_count_;
  const ReservoirDecision d = reservoir_decide(offered, free_slots, config_.watchpoints, rng_);
  switch (d.action) {
    case ReservoirDecision::Action::Keep:
      arm(ev, access, st);
      break;
    case ReservoirDecision::Action::KeepEvict:
      disarm(static_cast<std::size_t>(d.victim), Outcome::Evicted);
      arm(ev, access, st);
      break;
    case ReservoirDecision::Action::Discard:
      break;
  }
}

void Detector::trap(const TraceEvent& ev, const Access& access, const ThreadStacks& st,
                    bool& absorbed) {
  if (armed_count_ == 0) return;
  if (config_.mode == Mode::Stores && access.kind != AccessKind::Store) return;

  scratch_.clear();
  for (uint64_t g = granule(access.addr); g <= granule(access.end() - 1); ++g) {
    auto it = by_granule_.find(g);
    if (it == by_granule_.end()) continue;
    for (std::size_t s : it->second) {
      const Watchpoint& wp = *slots_[s];
      if (access.overlaps(wp.addr, wp.addr + wp.width)) scratch_.push_back(s);
    }
  }
  if (scratch_.empty()) return;
  std::sort(scratch_.begin(), scratch_.end(), [&](std::size_t a, std::size_t b) {
    return std::pair(slots_[a]->armed_seq, a) < std::pair(slots_[b]->armed_seq, b);
  });
  scratch_.erase(std::unique(scratch_.begin(), scratch_.end()), scratch_.end());

  const bool hibernating = config_.filters.hibernation_regions.any_open(st);
  const std::optional<uint64_t> call = st.innermost_call();
  const uint64_t value = access.value & width_mask(access.width);
  std::optional<PathId> killing;

  // Disarming only touches the slot being visited, so iterating a copy is safe.
  const std::vector<std::size_t> hits = scratch_;
  for (std::size_t s : hits) {
    const Watchpoint& wp = *slots_[s];
    if (hibernating) {
      disarm(s, Outcome::Hibernation);
      continue;
    }
    if (config_.mode == Mode::Loads && access.kind == AccessKind::Store) {
      disarm(s, Outcome::StoreTrap);
      continue;
    }
    const bool equal =
        wp.addr == access.addr && wp.width == access.width && wp.recorded_value == value;
    if (wp.armed_call_id == call) {
      if (equal) absorbed = true;
      continue;
    }
    if (!equal) {
      disarm(s, Outcome::NonRedundant);
      continue;
    }
    if (!killing) killing = intern(access, st);
    pairs_.push_back(RedundancyPair{config_.mode, wp.addr, wp.width, wp.recorded_value,
                                    wp.armed_path, *killing, wp.armed_seq, ev.seq,
                                    config_.period});
    tree_.add_redundancy(*killing, config_.period);
    disarm(s, Outcome::Redundant);
  }
}

void Detector::arm(const TraceEvent& ev, const Access& access, const ThreadStacks& st) {
  Watchpoint wp;
  wp.addr = access.addr;
  wp.width = access.width;
  wp.recorded_value = access.value & width_mask(access.width);
  wp.armed_seq = ev.seq;
  wp.armed_call_id = st.innermost_call();
  wp.armed_path = intern(access, st);
  wp.pinned_obj = pin_object(access.addr, objects_);
  wp.armed_thread = ev.thread;

  std::size_t slot;
  if (!free_list_.empty()) {
    slot = free_list_.back();
    free_list_.pop_back();
  } else {
    slot = slots_.size();
    slots_.emplace_back();
  }
  tree_.add_samples(wp.armed_path);
  slots_[slot] = std::move(wp);
  index_add(slot);
  ++armed_count_;
  ++counters_.armed;
}

void Detector::disarm(std::size_t slot, Outcome outcome) {
  if (slot >= slots_.size() || !slots_[slot]) throw InternalError("disarm of an empty slot");
  switch (outcome) {
    case Outcome::Redundant:
      ++counters_.resolved_redundant;
      break;
    case Outcome::NonRedundant:
      ++counters_.resolved_nonredundant;
      break;
    case Outcome::StoreTrap:
      ++counters_.disarmed_by_store_trap;
      break;
    case Outcome::Free:
      ++counters_.disarmed_by_free;
      break;
    case Outcome::Hibernation:
      ++counters_.disarmed_by_hibernation;
      break;
    case Outcome::Evicted:
      ++counters_.evicted_by_reservoir;
      break;
    case Outcome::Unresolved:
      ++counters_.unresolved_at_end;
      break;
  }
  // Disarming also drops the pin on the watched object.
  index_remove(slot);
  slots_[slot].reset();
  free_list_.push_back(slot);
  --armed_count_;
}

void Detector::on_free(const TraceEvent& ev, const Free& free) {
  std::vector<std::size_t> pinned;
  for (std::size_t s = 0; s < slots_.size(); ++s) {
    if (slots_[s] && slots_[s]->pinned_obj == free.obj_id) pinned.push_back(s);
  }
  std::sort(pinned.begin(), pinned.end(), [&](std::size_t a, std::size_t b) {
    return slots_[a]->armed_seq < slots_[b]->armed_seq;
  });
  for (std::size_t s : pinned) disarm(s, Outcome::Free);

  for (const auto& wp : slots_) {
    if (wp && wp->pinned_obj == free.obj_id) {
      throw InternalError("watchpoint still pins freed object " + std::to_string(free.obj_id));
    }
  }
  if (!objects_.free(free.obj_id)) {
    throw ObjectLifetime(ev.seq, "free of object " + std::to_string(free.obj_id) + " that is not live");
  }
}

PathId Detector::intern(const Access& access, const ThreadStacks& st) {
  const std::vector<FrameKey> frames = merge_hybrid_path(st.native_stack, st.py_stack);
  return tree_.intern_path(frames, AccessLeaf{access.ip, access.kind});
}

void Detector::index_add(std::size_t slot) {
  const Watchpoint& wp = *slots_[slot];
  for (uint64_t g = granule(wp.addr); g <= granule(wp.addr + wp.width - 1); ++g) {
    by_granule_[g].push_back(slot);
  }
}

void Detector::index_remove(std::size_t slot) {
  const Watchpoint& wp = *slots_[slot];
  for (uint64_t g = granule(wp.addr); g <= granule(wp.addr + wp.width - 1); ++g) {
    auto it = by_granule_.find(g);
    if (it == by_granule_.end()) continue;
    auto& v = it->second;
    v.erase(std::remove(v.begin(), v.end(), slot), v.end());
    if (v.empty()) by_granule_.erase(it);
  }
}

DetectionResult Detector::finish() {
  if (!finished_) {
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (slots_[s]) disarm(s, Outcome::Unresolved);
    }
    finished_ = true;
    if (!counters_.conserved()) throw InternalError("watchpoint outcome counters do not balance");
    if (!counters_.candidates_accounted()) throw InternalError("candidate counters do not balance");
  }
  return DetectionResult{pairs_, counters_};
}

DetectionResult run_detector(std::span<const TraceEvent> events, const DetectorConfig& config,
                             Cct& tree) {
  Detector detector(config, tree);
  for (const TraceEvent& ev : events) detector.feed(ev);
  return detector.finish();
}

}  // namespace redwatch
