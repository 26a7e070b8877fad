#include <algorithm>
#include <map>

#include "redwatch/analysis.hpp"

namespace redwatch {

std::string_view to_string(Pattern pattern) {
  return pattern == Pattern::RedundantLoad ? "RedundantLoad" : "RedundantStore";
}

Estimate estimate(std::span<const RedundancyPair> pairs, const DetectorCounters& counters) {
  Estimate e;
  e.resolutions_sampled = counters.resolved_redundant + counters.resolved_nonredundant;
  e.redundant_sampled = counters.resolved_redundant;
  if (e.resolutions_sampled > 0) {
    e.f_hat = static_cast<double>(e.redundant_sampled) / static_cast<double>(e.resolutions_sampled);
  }
  for (const RedundancyPair& p : pairs) e.extrapolated_redundant += p.weight;
  return e;
}

namespace {

std::strong_ordering compare_paths(const std::vector<FrameKey>& a, const std::vector<FrameKey>& b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (auto c = compare_frames(a[i], b[i]); c != 0) return c;
  }
  return a.size() <=> b.size();
}

}  // namespace

std::vector<Finding> aggregate(std::span<const RedundancyPair> pairs, const Cct& tree) {
  struct Group {
    uint64_t count = 0;
    uint64_t weight = 0;
    Pattern pattern = Pattern::RedundantStore;
  };
  std::map<std::pair<PathId, PathId>, Group> groups;
  for (const RedundancyPair& p : pairs) {
    Group& g = groups[{p.killed_path, p.killing_path}];
    ++g.count;
    g.weight += p.weight;
    g.pattern = pattern_for(p.mode);
  }

  std::vector<Finding> findings;
  findings.reserve(groups.size());
  for (const auto& [key, g] : groups) {
    findings.push_back(Finding{tree.resolve_path(key.first), tree.resolve_path(key.second), g.count,
                               g.weight, g.pattern});
  }
  std::sort(findings.begin(), findings.end(), [](const Finding& a, const Finding& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    if (auto c = compare_paths(a.killed_path, b.killed_path); c != 0) return c < 0;
    if (auto c = compare_paths(a.killing_path, b.killing_path); c != 0) return c < 0;
    return a.pattern < b.pattern;
  });
  return findings;
}

ProfileReport build_report(const DetectorConfig& config, const DetectionResult& result,
                           const Cct& tree) {
  ProfileReport report;
  report.config = config;
  report.counters = result.counters;
  report.estimate = estimate(result.pairs, result.counters);
  report.findings = aggregate(result.pairs, tree);
  return report;
}

}  // namespace redwatch
