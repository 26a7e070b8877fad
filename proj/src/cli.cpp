#include "redwatch/cli.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "CLI11.hpp"
#include "json.hpp"
#include "redwatch/analysis.hpp"
#include "redwatch/error.hpp"
#include "redwatch/synth.hpp"

namespace redwatch::cli {

namespace {

using ojson = nlohmann::ordered_json;

/// Flag value rejected after CLI parsing; maps to the bad-flags exit code.
class BadFlag : public Error {
 public:
  using Error::Error;
};

uint64_t parse_u64(std::string_view s, std::string_view what) {
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    s.remove_prefix(2);
    base = 16;
  }
  uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw BadFlag("invalid " + std::string(what) + ": " + std::string(s));
  }
  return v;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = s.find(sep, start);
    parts.emplace_back(s.substr(start, end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return parts;
}

struct FilterFlags {
  std::vector<std::string> exclude_ip;
  uint64_t junk_bytes = FilterConfig{}.junk_header_bytes;
  std::string hibernate = "gc,loader";

  void attach(CLI::App& cmd) {
    cmd.add_option("--exclude-ip", exclude_ip, "Skip samples whose ip is in LO:HI")
        ->take_all()
        ->allow_extra_args(false);
    cmd.add_option("--junk-bytes", junk_bytes, "Object header bytes to ignore")->capture_default_str();
    cmd.add_option("--hibernate", hibernate, "Regions that suspend monitoring (gc,loader,blocklisted|none)")
        ->capture_default_str();
  }

  FilterConfig build() const {
    FilterConfig f;
    f.junk_header_bytes = junk_bytes;
    for (const std::string& r : exclude_ip) {
      const auto parts = split(r, ':');
      if (parts.size() != 2) throw BadFlag("--exclude-ip expects LO:HI, got " + r);
      f.excluded_ip_ranges.push_back({parse_u64(parts[0], "ip"), parse_u64(parts[1], "ip")});
    }
    f.hibernation_regions = RegionSet{};
    if (hibernate != "none" && !hibernate.empty()) {
      for (const std::string& name : split(hibernate, ',')) {
        auto region = parse_region(name);
        if (!region) throw BadFlag("unknown region " + name);
        f.hibernation_regions.insert(*region);
      }
    }
    return f;
  }
};

Mode mode_from(const std::string& name) {
  auto m = parse_mode(name);
  if (!m) throw BadFlag("--mode must be loads or stores");
  return *m;
}

uint64_t watchpoints_from(const std::string& s) {
  if (s == "inf" || s == "unbounded") return kUnboundedWatchpoints;
  return parse_u64(s, "watchpoint count");
}

/// Reads and validates; throws MalformedEvent listing the first violations.
Trace load_trace(const std::string& path) {
  Trace trace = read_trace(path);
  const ValidationReport v = validate_trace(trace);
  if (!v.ok()) {
    std::string msg = "trace fails validation (" + std::to_string(v.violations.size()) + " violations)";
    const std::size_t shown = std::min<std::size_t>(v.violations.size(), 5);
    for (std::size_t i = 0; i < shown; ++i) {
      const Violation& x = v.violations[i];
      msg += "\n  seq " + std::to_string(x.seq) + ": " + std::string(to_string(x.kind)) + ": " + x.detail;
    }
    throw MalformedEvent(msg);
  }
  return trace;
}

void emit(const std::string& text, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << text;
    if (!out) throw IoError("failed to write output");
    return;
  }
  std::ofstream file(out_path, std::ios::binary);
  if (!file) throw IoError("cannot open " + out_path + " for writing");
  file << text;
  if (!file.flush()) throw IoError("write failed: " + out_path);
}

std::string fixed6(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(6) << v;
  return s.str();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Offline detector of redundant loads and stores in mixed python/native traces",
               "redwatch"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "redwatch 1.0");

  // analyze
  struct {
    std::string trace, mode, watchpoints = "4", format = "text", out;
    uint64_t period = kDefaultPeriod, seed = 0;
    FilterFlags filters;
  } an;
  CLI::App* analyze = app.add_subcommand("analyze", "Sample a trace and report redundant pairs");
  analyze->add_option("trace", an.trace, "Trace file")->required();
  analyze->add_option("--mode", an.mode, "loads|stores")->required();
  analyze->add_option("--period", an.period, "Sampling period")->capture_default_str();
  analyze->add_option("--watchpoints", an.watchpoints, "Watchpoint slots, or inf")->capture_default_str();
  analyze->add_option("--seed", an.seed, "Reservoir seed")->capture_default_str();
  analyze->add_option("--format", an.format, "text|json|folded")->capture_default_str();
  analyze->add_option("--out", an.out, "Write the report here instead of stdout");
  an.filters.attach(*analyze);

  // oracle
  struct {
    std::string trace, mode, out;
    FilterFlags filters;
  } orc;
  CLI::App* oracle = app.add_subcommand("oracle", "Exact redundancy pairs of a trace (json)");
  oracle->add_option("trace", orc.trace, "Trace file")->required();
  oracle->add_option("--mode", orc.mode, "loads|stores")->required();
  oracle->add_option("--out", orc.out, "Write the result here instead of stdout");
  orc.filters.attach(*oracle);

  // synth
  SynthSpec spec;
  std::string synth_mode = "stores", synth_out, fixture;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic trace");
  synth->add_option("--out", synth_out, "Output trace file (stdout if omitted)");
  synth->add_option("--fixture", fixture, "Case-study fixture name instead of a generated trace");
  synth->add_option("--seed", spec.seed)->capture_default_str();
  synth->add_option("--threads", spec.threads)->capture_default_str();
  synth->add_option("--n-accesses", spec.n_accesses)->capture_default_str();
  synth->add_option("--mode", synth_mode, "Targeted access kind: loads|stores")->capture_default_str();
  synth->add_option("--planted", spec.planted_fraction, "Redundant fraction")->capture_default_str();
  synth->add_option("--address-pool", spec.address_pool)->capture_default_str();
  synth->add_option("--call-depth", spec.call_depth)->capture_default_str();
  synth->add_option("--call-fanout", spec.call_fanout)->capture_default_str();
  synth->add_option("--eval-ratio", spec.eval_frame_ratio)->capture_default_str();
  synth->add_option("--junk-fraction", spec.junk_access_fraction)->capture_default_str();
  synth->add_option("--hibernation-fraction", spec.hibernation_window_fraction)->capture_default_str();
  synth->add_option("--objects", spec.object_count)->capture_default_str();
  synth->add_option("--churn", spec.free_churn_rate)->capture_default_str();
  synth->add_option("--repeat-fraction", spec.same_call_repeat_fraction)->capture_default_str();

  // validate
  std::string validate_path;
  CLI::App* validate = app.add_subcommand("validate", "Check a trace for well-formedness");
  validate->add_option("trace", validate_path, "Trace file")->required();

  // compare
  struct {
    std::string trace, mode, watchpoints = "4";
    uint64_t period = kDefaultPeriod, seeds = 5;
    FilterFlags filters;
  } cmp;
  CLI::App* compare = app.add_subcommand("compare", "Sampled estimate per seed against the exact fraction");
  compare->add_option("trace", cmp.trace, "Trace file")->required();
  compare->add_option("--mode", cmp.mode, "loads|stores")->required();
  compare->add_option("--period", cmp.period)->capture_default_str();
  compare->add_option("--watchpoints", cmp.watchpoints)->capture_default_str();
  compare->add_option("--seeds", cmp.seeds, "Seeds 1..k")->capture_default_str();
  cmp.filters.attach(*compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitBadFlags;
  }

  try {
    if (analyze->parsed()) {
      DetectorConfig config;
      config.mode = mode_from(an.mode);
      config.period = an.period;
      config.watchpoints = watchpoints_from(an.watchpoints);
      config.seed = an.seed;
      config.filters = an.filters.build();
      auto format = parse_report_format(an.format);
      if (!format) throw BadFlag("--format must be text, json or folded");
      config.validate();

      const Trace trace = load_trace(an.trace);
      Cct tree;
      const DetectionResult result = run_detector(trace, config, tree);
      emit(render(build_report(config, result, tree), *format), an.out, out);
      return kExitOk;
    }

    if (oracle->parsed()) {
      const Mode mode = mode_from(orc.mode);
      const FilterConfig filters = orc.filters.build();
      const Trace trace = load_trace(orc.trace);
      const OracleResult r = oracle_pairs(trace, mode, filters);
      ojson j;
      j["mode"] = to_string(mode);
      j["resolutions"] = r.resolutions;
      j["redundant"] = r.redundant;
      j["fraction"] = r.resolutions == 0 ? ojson(nullptr) : ojson(r.fraction());
      ojson pairs = ojson::array();
      for (const RedundancyPair& p : r.pairs) {
        ojson pj;
        pj["armed_seq"] = p.armed_seq;
        pj["trap_seq"] = p.trap_seq;
        pj["addr"] = p.addr;
        pj["width"] = p.width;
        pj["value"] = p.value;
        pairs.push_back(pj);
      }
      j["pairs"] = pairs;
      emit(j.dump(2) + "\n", orc.out, out);
      return kExitOk;
    }

    if (synth->parsed()) {
      Trace trace;
      if (!fixture.empty()) {
        trace = fixture_case_study(fixture).trace;
      } else {
        spec.mode_targeted = mode_from(synth_mode);
        trace = generate(spec);
      }
      if (synth_out.empty()) {
        write_trace(trace, out);
      } else {
        write_trace(trace, std::filesystem::path(synth_out));
      }
      return kExitOk;
    }

    if (validate->parsed()) {
      const Trace trace = read_trace(validate_path);
      const ValidationReport v = validate_trace(trace);
      if (v.ok()) {
        out << "ok: " << trace.size() << " events\n";
        return kExitOk;
      }
      for (const Violation& x : v.violations) {
        out << "seq " << x.seq << ": " << to_string(x.kind) << ": " << x.detail << '\n';
      }
      out << v.violations.size() << " violations\n";
      return kExitViolations;
    }

    if (compare->parsed()) {
      DetectorConfig config;
      config.mode = mode_from(cmp.mode);
      config.period = cmp.period;
      config.watchpoints = watchpoints_from(cmp.watchpoints);
      config.filters = cmp.filters.build();
      if (cmp.seeds == 0) throw BadFlag("--seeds must be >= 1");
      config.validate();

      const Trace trace = load_trace(cmp.trace);
      const OracleResult exact = oracle_pairs(trace, config.mode, config.filters);
      out << "oracle: resolutions=" << exact.resolutions << " redundant=" << exact.redundant
          << " f=" << (exact.resolutions == 0 ? std::string("undefined") : fixed6(exact.fraction()))
          << '\n';
      out << "seed  resolutions  f_hat     abs_err\n";
      double total_err = 0;
      uint64_t defined = 0;
      for (uint64_t seed = 1; seed <= cmp.seeds; ++seed) {
        config.seed = seed;
        Cct tree;
        const DetectionResult result = run_detector(trace, config, tree);
        const Estimate est = estimate(result.pairs, result.counters);
        out << std::left << std::setw(6) << seed << std::setw(13) << est.resolutions_sampled;
        if (est.f_hat) {
          const double abs_err = std::abs(*est.f_hat - exact.fraction());
          total_err += abs_err;
          ++defined;
          out << std::setw(10) << fixed6(*est.f_hat) << fixed6(abs_err) << '\n';
        } else {
          out << std::setw(10) << "undefined" << "-\n";
        }
      }
      out << "mean_abs_err " << (defined == 0 ? std::string("undefined") : fixed6(total_err / defined))
          << '\n';
      return kExitOk;
    }
  } catch (const BadFlag& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadFlags;
  } catch (const InvalidConfig& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadFlags;
  } catch (const InvalidSpec& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadFlags;
  } catch (const UnknownFixture& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadFlags;
  } catch (const MalformedLine& e) {
    err << "error: " << e.what() << '\n';
    return kExitMalformedTrace;
  } catch (const InternalError& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const Error& e) {
    // Remaining library errors all stem from the input trace.
    err << "error: " << e.what() << '\n';
    return kExitMalformedTrace;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitBadFlags;
}

}  // namespace redwatch::cli
