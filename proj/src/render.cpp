#include <array>
#include <charconv>
#include <map>
#include <sstream>

#include "json.hpp"
#include "redwatch/analysis.hpp"
#include "redwatch/error.hpp"

namespace redwatch {

using ojson = nlohmann::ordered_json;

namespace {

struct CounterField {
  const char* name;
  uint64_t DetectorCounters::*member;
};

constexpr std::array<CounterField, 15> kCounterFields{{
    {"accesses_seen", &DetectorCounters::accesses_seen},
    {"candidates", &DetectorCounters::candidates},
    {"filtered_ip", &DetectorCounters::filtered_ip},
    {"filtered_junk", &DetectorCounters::filtered_junk},
    {"filtered_hibernation", &DetectorCounters::filtered_hibernation},
    {"absorbed_same_call", &DetectorCounters::absorbed_same_call},
    {"reservoir_offered", &DetectorCounters::reservoir_offered},
    {"armed", &DetectorCounters::armed},
    {"evicted_by_reservoir", &DetectorCounters::evicted_by_reservoir},
    {"disarmed_by_store_trap", &DetectorCounters::disarmed_by_store_trap},
    {"disarmed_by_free", &DetectorCounters::disarmed_by_free},
    {"disarmed_by_hibernation", &DetectorCounters::disarmed_by_hibernation},
    {"resolved_redundant", &DetectorCounters::resolved_redundant},
    {"resolved_nonredundant", &DetectorCounters::resolved_nonredundant},
    {"unresolved_at_end", &DetectorCounters::unresolved_at_end},
}};

std::string hex(uint64_t v) {
  char buf[16];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, 16);
  return "0x" + std::string(buf, ptr);
}

uint64_t parse_hex(const std::string& s) {
  uint64_t v = 0;
  if (s.size() < 3 || s.compare(0, 2, "0x") != 0) throw Error("expected hex string, got " + s);
  auto [ptr, ec] = std::from_chars(s.data() + 2, s.data() + s.size(), v, 16);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error("bad hex string " + s);
  return v;
}

std::string fixed6(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 6);
  return std::string(buf, ptr);
}

std::string watchpoints_text(uint64_t w) {
  return w == kUnboundedWatchpoints ? "unbounded" : std::to_string(w);
}

std::string regions_text(const RegionSet& regions) {
  std::string out;
  for (std::size_t i = 0; i < kRegionCount; ++i) {
    const auto r = static_cast<Region>(i);
    if (!regions.contains(r)) continue;
    if (!out.empty()) out += ',';
    out += to_string(r);
  }
  return out.empty() ? "none" : out;
}

bool is_python(const FrameKey& f) { return std::holds_alternative<PyFrame>(f); }
bool is_native(const FrameKey& f) { return std::holds_alternative<NativeFrame>(f); }

std::string folded_frame(const FrameKey& f) {
  std::string s = describe_frame(f);
  for (char& c : s) {
    if (c == ';') c = ':';
  }
  return s;
}

void render_path(std::ostream& out, const std::vector<FrameKey>& path) {
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i > 0 && ((is_python(path[i - 1]) && is_native(path[i])) ||
                  (is_native(path[i - 1]) && is_python(path[i])))) {
      out << "      ---- python | native ----\n";
    }
    const FrameKey& f = path[i];
    const char* tag = is_python(f) ? "py    " : is_native(f) ? "native" : "access";
    out << "    " << tag << "  " << describe_frame(f) << '\n';
  }
}

void render_text(const ProfileReport& r, std::ostream& out) {
  const DetectorConfig& c = r.config;
  out << "redwatch report v" << kReportVersion << '\n';
  out << "mode=" << to_string(c.mode) << " period=" << c.period
      << " watchpoints=" << watchpoints_text(c.watchpoints) << " seed=" << c.seed
      << " rng=" << r.rng << '\n';
  out << "junk_bytes=" << c.filters.junk_header_bytes
      << " hibernate=" << regions_text(c.filters.hibernation_regions) << " exclude_ip=";
  if (c.filters.excluded_ip_ranges.empty()) out << "none";
  for (std::size_t i = 0; i < c.filters.excluded_ip_ranges.size(); ++i) {
    const IpRange& ipr = c.filters.excluded_ip_ranges[i];
    out << (i > 0 ? "," : "") << hex(ipr.lo) << ':' << hex(ipr.hi);
  }
  out << "\n\ncounters:\n";
  for (const CounterField& f : kCounterFields) {
    out << "  " << f.name << " = " << r.counters.*f.member << '\n';
  }
  const Estimate& e = r.estimate;
  out << "\nestimate:\n";
  out << "  resolutions_sampled = " << e.resolutions_sampled << '\n';
  out << "  redundant_sampled = " << e.redundant_sampled << '\n';
  out << "  f_hat = " << (e.f_hat ? fixed6(*e.f_hat) : std::string("undefined")) << '\n';
  out << "  extrapolated_redundant = " << e.extrapolated_redundant << '\n';
  out << '\n';

  if (r.findings.empty()) {
    out << "no redundancies detected\n";
    return;
  }
  out << "findings: " << r.findings.size() << '\n';
  for (std::size_t i = 0; i < r.findings.size(); ++i) {
    const Finding& f = r.findings[i];
    out << "\n#" << (i + 1) << ' ' << to_string(f.pattern) << " count=" << f.count
        << " weight=" << f.weight << '\n';
    out << "  killed:\n";
    render_path(out, f.killed_path);
    out << "  killing:\n";
    render_path(out, f.killing_path);
  }
}

ojson frame_json(const FrameKey& f) {
  return std::visit(
      [](const auto& k) -> ojson {
        using T = std::decay_t<decltype(k)>;
        ojson j;
        if constexpr (std::is_same_v<T, NativeFrame>) {
          j["kind"] = "native";
          j["symbol"] = k.symbol;
          j["module"] = k.module;
          j["ip"] = hex(k.ip);
        } else if constexpr (std::is_same_v<T, PyFrame>) {
          j["kind"] = "python";
          j["function"] = k.function;
          j["file"] = k.file;
          j["line"] = k.line;
        } else {
          j["kind"] = "access";
          j["ip"] = hex(k.ip);
          j["access"] = k.kind == AccessKind::Load ? "load" : "store";
        }
        return j;
      },
      f);
}

FrameKey frame_from_json(const ojson& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "native") {
    return NativeFrame{j.at("symbol").get<std::string>(), j.at("module").get<std::string>(),
                       parse_hex(j.at("ip").get<std::string>())};
  }
  if (kind == "python") {
    return PyFrame{j.at("function").get<std::string>(), j.at("file").get<std::string>(),
                   j.at("line").get<uint32_t>()};
  }
  if (kind == "access") {
    const std::string access = j.at("access").get<std::string>();
    if (access != "load" && access != "store") throw Error("bad access kind " + access);
    return AccessLeaf{parse_hex(j.at("ip").get<std::string>()),
                      access == "load" ? AccessKind::Load : AccessKind::Store};
  }
  throw Error("unknown frame kind " + kind);
}

ojson report_json(const ProfileReport& r) {
  const DetectorConfig& c = r.config;
  ojson j;
  j["report_version"] = kReportVersion;
  ojson config;
  config["mode"] = to_string(c.mode);
  config["period"] = c.period;
  if (c.watchpoints == kUnboundedWatchpoints) {
    config["watchpoints"] = "unbounded";
  } else {
    config["watchpoints"] = c.watchpoints;
  }
  config["seed"] = c.seed;
  config["rng"] = r.rng;
  config["junk_header_bytes"] = c.filters.junk_header_bytes;
  ojson regions = ojson::array();
  for (std::size_t i = 0; i < kRegionCount; ++i) {
    if (c.filters.hibernation_regions.contains(static_cast<Region>(i))) {
      regions.push_back(to_string(static_cast<Region>(i)));
    }
  }
  config["hibernation_regions"] = regions;
  ojson ranges = ojson::array();
  for (const IpRange& ipr : c.filters.excluded_ip_ranges) ranges.push_back({hex(ipr.lo), hex(ipr.hi)});
  config["excluded_ip_ranges"] = ranges;
  j["config"] = config;

  ojson counters;
  for (const CounterField& f : kCounterFields) counters[f.name] = r.counters.*f.member;
  j["counters"] = counters;

  ojson est;
  est["resolutions_sampled"] = r.estimate.resolutions_sampled;
  est["redundant_sampled"] = r.estimate.redundant_sampled;
  est["f_hat"] = r.estimate.f_hat ? ojson(*r.estimate.f_hat) : ojson(nullptr);
  est["extrapolated_redundant"] = r.estimate.extrapolated_redundant;
  j["estimate"] = est;

  ojson findings = ojson::array();
  for (const Finding& f : r.findings) {
    ojson fj;
    fj["pattern"] = to_string(f.pattern);
    fj["count"] = f.count;
    fj["weight"] = f.weight;
    ojson killed = ojson::array();
    for (const FrameKey& k : f.killed_path) killed.push_back(frame_json(k));
    ojson killing = ojson::array();
    for (const FrameKey& k : f.killing_path) killing.push_back(frame_json(k));
    fj["killed_path"] = killed;
    fj["killing_path"] = killing;
    findings.push_back(fj);
  }
  j["findings"] = findings;
  return j;
}

void render_folded(const ProfileReport& r, std::ostream& out) {
  std::map<std::vector<std::string>, uint64_t> by_killing;
  std::map<std::vector<std::string>, std::vector<FrameKey>> keys;
  for (const Finding& f : r.findings) {
    std::vector<std::string> names;
    for (const FrameKey& k : f.killing_path) names.push_back(folded_frame(k));
    by_killing[names] += f.weight;
  }
  std::vector<std::pair<std::vector<std::string>, uint64_t>> lines(by_killing.begin(),
                                                                   by_killing.end());
  std::stable_sort(lines.begin(), lines.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [names, weight] : lines) {
    for (std::size_t i = 0; i < names.size(); ++i) out << (i > 0 ? ";" : "") << names[i];
    out << ' ' << weight << '\n';
  }
}

}  // namespace

std::string describe_frame(const FrameKey& frame) {
  return std::visit(
      [](const auto& k) -> std::string {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, NativeFrame>) {
          return k.symbol + "@" + k.module + "+" + hex(k.ip);
        } else if constexpr (std::is_same_v<T, PyFrame>) {
          return k.function + " (" + k.file + ":" + std::to_string(k.line) + ")";
        } else {
          return std::string(k.kind == AccessKind::Load ? "load" : "store") + "@" + hex(k.ip);
        }
      },
      frame);
}

std::optional<ReportFormat> parse_report_format(std::string_view name) {
  if (name == "text") return ReportFormat::Text;
  if (name == "json") return ReportFormat::Json;
  if (name == "folded") return ReportFormat::Folded;
  return std::nullopt;
}

void render(const ProfileReport& report, ReportFormat format, std::ostream& out) {
  switch (format) {
    case ReportFormat::Text:
      render_text(report, out);
      break;
    case ReportFormat::Json:
      out << report_json(report).dump(2) << '\n';
      break;
    case ReportFormat::Folded:
      render_folded(report, out);
      break;
  }
  if (!out) throw IoError("failed to write report");
}

std::string render(const ProfileReport& report, ReportFormat format) {
  std::ostringstream out;
  render(report, format, out);
  return std::move(out).str();
}

ProfileReport parse_json_report(std::string_view text) {
  try {
    const ojson j = ojson::parse(text.begin(), text.end());
    if (j.at("report_version").get<int>() != kReportVersion) {
      throw Error("unsupported report version");
    }
    ProfileReport r;
    const ojson& c = j.at("config");
    auto mode = parse_mode(c.at("mode").get<std::string>());
    if (!mode) throw Error("bad mode");
    r.config.mode = *mode;
    r.config.period = c.at("period").get<uint64_t>();
    const ojson& w = c.at("watchpoints");
    if (w.is_string()) {
      if (w.get<std::string>() != "unbounded") throw Error("bad watchpoints value");
      r.config.watchpoints = kUnboundedWatchpoints;
    } else {
      r.config.watchpoints = w.get<uint64_t>();
    }
    r.config.seed = c.at("seed").get<uint64_t>();
    r.rng = c.at("rng").get<std::string>();
    r.config.filters.junk_header_bytes = c.at("junk_header_bytes").get<uint64_t>();
    r.config.filters.hibernation_regions = RegionSet{};
    for (const auto& name : c.at("hibernation_regions")) {
      auto region = parse_region(name.get<std::string>());
      if (!region) throw Error("bad region");
      r.config.filters.hibernation_regions.insert(*region);
    }
    for (const auto& range : c.at("excluded_ip_ranges")) {
      r.config.filters.excluded_ip_ranges.push_back(
          {parse_hex(range.at(0).get<std::string>()), parse_hex(range.at(1).get<std::string>())});
    }

    const ojson& counters = j.at("counters");
    for (const CounterField& f : kCounterFields) r.counters.*f.member = counters.at(f.name).get<uint64_t>();

    const ojson& est = j.at("estimate");
    r.estimate.resolutions_sampled = est.at("resolutions_sampled").get<uint64_t>();
    r.estimate.redundant_sampled = est.at("redundant_sampled").get<uint64_t>();
    if (!est.at("f_hat").is_null()) r.estimate.f_hat = est.at("f_hat").get<double>();
    r.estimate.extrapolated_redundant = est.at("extrapolated_redundant").get<uint64_t>();

    for (const auto& fj : j.at("findings")) {
      Finding f;
      const std::string pattern = fj.at("pattern").get<std::string>();
      if (pattern == "RedundantLoad") {
        f.pattern = Pattern::RedundantLoad;
      } else if (pattern == "RedundantStore") {
        f.pattern = Pattern::RedundantStore;
      } else {
        throw Error("bad pattern " + pattern);
      }
      f.count = fj.at("count").get<uint64_t>();
      f.weight = fj.at("weight").get<uint64_t>();
      for (const auto& k : fj.at("killed_path")) f.killed_path.push_back(frame_from_json(k));
      for (const auto& k : fj.at("killing_path")) f.killing_path.push_back(frame_from_json(k));
      r.findings.push_back(std::move(f));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed report json: ") + e.what());
  }
}

}  // namespace redwatch
