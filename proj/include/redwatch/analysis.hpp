#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "redwatch/cct.hpp"
#include "redwatch/detector.hpp"
#include "redwatch/trace.hpp"

namespace redwatch {

// ---------------------------------------------------------------------------
// Exhaustive oracle.

struct OracleResult {
  std::vector<RedundancyPair> pairs;  // weight 1 each, ordered by (trap_seq, armed_seq)
  uint64_t resolutions = 0;
  uint64_t redundant = 0;

  double fraction() const {
    return resolutions == 0 ? 0.0 : static_cast<double>(redundant) / static_cast<double>(resolutions);
  }
};

/// Ground truth for `mode`: every post-filter access of the sampled kind is
/// watched and resolved by the first later overlapping access that the trap
/// rules act on. Computed by per-location forward scans, independently of the
/// streaming detector. When `tree` is given, pair paths are interned into it;
/// otherwise they are left as PathId{0}.
OracleResult oracle_pairs(std::span<const TraceEvent> events, Mode mode, const FilterConfig& filters,
                          Cct* tree = nullptr);

// ---------------------------------------------------------------------------
// Estimation and aggregation.

struct Estimate {
  uint64_t resolutions_sampled = 0;
  uint64_t redundant_sampled = 0;
  std::optional<double> f_hat;  // nullopt when no resolutions were sampled
  uint64_t extrapolated_redundant = 0;

  bool defined() const { return f_hat.has_value(); }
  bool operator==(const Estimate&) const = default;
};

Estimate estimate(std::span<const RedundancyPair> pairs, const DetectorCounters& counters);

enum class Pattern : uint8_t { RedundantLoad, RedundantStore };
std::string_view to_string(Pattern pattern);
constexpr Pattern pattern_for(Mode mode) {
  return mode == Mode::Loads ? Pattern::RedundantLoad : Pattern::RedundantStore;
}

struct Finding {
  std::vector<FrameKey> killed_path;
  std::vector<FrameKey> killing_path;
  uint64_t count = 0;
  uint64_t weight = 0;
  Pattern pattern = Pattern::RedundantStore;
  bool operator==(const Finding&) const = default;
};

/// Groups pairs by (killed, killing) path. Sorted by weight descending, ties
/// broken by the resolved paths.
std::vector<Finding> aggregate(std::span<const RedundancyPair> pairs, const Cct& tree);

// ---------------------------------------------------------------------------
// Reports.

inline constexpr int kReportVersion = 1;

struct ProfileReport {
  DetectorConfig config;
  std::string rng = std::string(SplitMix64::kName);
  DetectorCounters counters;
  Estimate estimate;
  std::vector<Finding> findings;
  bool operator==(const ProfileReport&) const = default;
};

ProfileReport build_report(const DetectorConfig& config, const DetectionResult& result,
                           const Cct& tree);

enum class ReportFormat { Text, Json, Folded };
std::optional<ReportFormat> parse_report_format(std::string_view name);

void render(const ProfileReport& report, ReportFormat format, std::ostream& out);
std::string render(const ProfileReport& report, ReportFormat format);

/// Inverse of the Json rendering. Throws Error on schema mismatch.
ProfileReport parse_json_report(std::string_view text);

/// One-line display of a frame, as used in the text and folded renderings.
std::string describe_frame(const FrameKey& frame);

}  // namespace redwatch
