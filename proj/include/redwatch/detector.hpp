#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "redwatch/cct.hpp"
#include "redwatch/rng.hpp"
#include "redwatch/trace.hpp"

namespace redwatch {

enum class Mode : uint8_t { Loads, Stores };

std::string_view to_string(Mode mode);
std::optional<Mode> parse_mode(std::string_view name);

/// The access kind sampled in `mode`.
constexpr AccessKind sampled_kind(Mode mode) {
  return mode == Mode::Loads ? AccessKind::Load : AccessKind::Store;
}

class RegionSet {
 public:
  RegionSet() = default;
  RegionSet(std::initializer_list<Region> regions) {
    for (Region r : regions) insert(r);
  }
  void insert(Region r) { bits_ |= bit(r); }
  bool contains(Region r) const { return (bits_ & bit(r)) != 0; }
  bool empty() const { return bits_ == 0; }
  bool any_open(const ThreadStacks& st) const {
    for (std::size_t i = 0; i < kRegionCount; ++i) {
      if (contains(static_cast<Region>(i)) && st.open_regions[i] > 0) return true;
    }
    return false;
  }
  bool operator==(const RegionSet&) const = default;

 private:
  static uint8_t bit(Region r) { return static_cast<uint8_t>(1u << static_cast<unsigned>(r)); }
  uint8_t bits_ = 0;
};

struct IpRange {
  uint64_t lo = 0;  // inclusive
  uint64_t hi = 0;  // exclusive
  bool contains(uint64_t ip) const { return ip >= lo && ip < hi; }
  bool operator==(const IpRange&) const = default;
};

struct FilterConfig {
  std::vector<IpRange> excluded_ip_ranges;
  uint64_t junk_header_bytes = 16;
  RegionSet hibernation_regions{Region::Gc, Region::Loader};
  bool operator==(const FilterConfig&) const = default;
};

inline constexpr uint64_t kDefaultPeriod = 1'000'000;
inline constexpr uint64_t kDefaultWatchpoints = 4;
/// Watchpoint count meaning "no limit"; slots are allocated on demand.
inline constexpr uint64_t kUnboundedWatchpoints = std::numeric_limits<uint64_t>::max();

struct DetectorConfig {
  Mode mode = Mode::Stores;
  uint64_t period = kDefaultPeriod;
  uint64_t watchpoints = kDefaultWatchpoints;
  uint64_t seed = 0;
  FilterConfig filters;

  /// Throws InvalidConfig.
  void validate() const;
  bool operator==(const DetectorConfig&) const = default;
};

struct Watchpoint {
  uint64_t addr = 0;
  uint8_t width = 0;
  uint64_t recorded_value = 0;
  uint64_t armed_seq = 0;
  std::optional<uint64_t> armed_call_id;
  PathId armed_path;
  std::optional<uint64_t> pinned_obj;
  uint32_t armed_thread = 0;
};

struct RedundancyPair {
  Mode mode = Mode::Stores;
  uint64_t addr = 0;
  uint8_t width = 0;
  uint64_t value = 0;
  PathId killed_path;
  PathId killing_path;
  uint64_t armed_seq = 0;
  uint64_t trap_seq = 0;
  uint64_t weight = 0;
  bool operator==(const RedundancyPair&) const = default;
};

struct DetectorCounters {
  uint64_t accesses_seen = 0;
  uint64_t candidates = 0;
  uint64_t filtered_ip = 0;
  uint64_t filtered_junk = 0;
  uint64_t filtered_hibernation = 0;
  uint64_t absorbed_same_call = 0;
  uint64_t reservoir_offered = 0;
  uint64_t armed = 0;
  uint64_t evicted_by_reservoir = 0;
  uint64_t disarmed_by_store_trap = 0;
  uint64_t disarmed_by_free = 0;
  uint64_t disarmed_by_hibernation = 0;
  uint64_t resolved_redundant = 0;
  uint64_t resolved_nonredundant = 0;
  uint64_t unresolved_at_end = 0;

  /// Every armed watchpoint ends in exactly one outcome.
  bool conserved() const {
    return armed == resolved_redundant + resolved_nonredundant + evicted_by_reservoir +
                        disarmed_by_store_trap + disarmed_by_free + disarmed_by_hibernation +
                        unresolved_at_end;
  }
  /// Every candidate is filtered, absorbed or offered to the reservoir.
  bool candidates_accounted() const {
    return candidates ==
           filtered_ip + filtered_junk + filtered_hibernation + absorbed_same_call + reservoir_offered;
  }
  bool operator==(const DetectorCounters&) const = default;
};

// ---------------------------------------------------------------------------
// Pipeline steps, exposed individually for testing.

enum class FilterVerdict { Pass, FilteredIp, FilteredJunk, Hibernation };
std::string_view to_string(FilterVerdict verdict);

/// First matching drop reason in the order ip, junk header, hibernation.
FilterVerdict check_filters(const Access& access, const ThreadStacks& stacks,
                            const LiveObjects& objects, const FilterConfig& config);

/// The live object whose range contains addr.
std::optional<uint64_t> pin_object(uint64_t addr, const LiveObjects& objects);

struct ReservoirDecision {
  enum class Action { Keep, KeepEvict, Discard };
  Action action = Action::Discard;
  uint64_t victim = 0;  // slot index for KeepEvict
};

/// Algorithm R step for the offered-th sample (1-based) with `capacity` slots.
ReservoirDecision reservoir_decide(uint64_t offered, uint64_t free_slots, uint64_t capacity,
                                   SplitMix64& rng);

// ---------------------------------------------------------------------------

struct DetectionResult {
  std::vector<RedundancyPair> pairs;
  DetectorCounters counters;
};

/// Streaming detector. Feed events in trace order, then call finish().
class Detector {
 public:
  Detector(DetectorConfig config, Cct& tree);

  void feed(const TraceEvent& event);
  DetectionResult finish();

  const DetectorConfig& config() const { return config_; }
  const DetectorCounters& counters() const { return counters_; }
  const std::vector<RedundancyPair>& pairs() const { return pairs_; }
  /// Watchpoint slots; empty optionals are free slots.
  const std::vector<std::optional<Watchpoint>>& slots() const { return slots_; }
  uint64_t armed_count() const { return armed_count_; }

 private:
  enum class Outcome { Redundant, NonRedundant, StoreTrap, Free, Hibernation, Evicted, Unresolved };

  void on_access(const TraceEvent& ev, const Access& access);
  void on_free(const TraceEvent& ev, const Free& free);
  void trap(const TraceEvent& ev, const Access& access, const ThreadStacks& st, bool& absorbed);
  void arm(const TraceEvent& ev, const Access& access, const ThreadStacks& st);
  void disarm(std::size_t slot, Outcome outcome);
  PathId intern(const Access& access, const ThreadStacks& st);

  static uint64_t granule(uint64_t addr) { return addr >> 3; }
  void index_add(std::size_t slot);
  void index_remove(std::size_t slot);

  DetectorConfig config_;
  Cct& tree_;
  SplitMix64 rng_;
  StackReplay replay_;
  LiveObjects objects_;
  DetectorCounters counters_;
  std::vector<RedundancyPair> pairs_;

  uint64_t pmu_counter_ = 0;
  std::vector<std::optional<Watchpoint>> slots_;
  std::vector<std::size_t> free_list_;
  uint64_t armed_count_ = 0;
  std::unordered_map<uint64_t, std::vector<std::size_t>> by_granule_;
  std::vector<std::size_t> scratch_;
  bool finished_ = false;
};

DetectionResult run_detector(std::span<const TraceEvent> events, const DetectorConfig& config,
                             Cct& tree);

}  // namespace redwatch
