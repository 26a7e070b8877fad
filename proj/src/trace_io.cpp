#include <charconv>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "redwatch/error.hpp"
#include "redwatch/trace.hpp"

namespace redwatch {

using nlohmann::json;

std::string_view to_string(AccessKind kind) { return kind == AccessKind::Load ? "ld" : "st"; }

std::string_view to_string(Region region) {
  switch (region) {
    case Region::Gc:
      return "gc";
    case Region::Loader:
      return "loader";
    case Region::Blocklisted:
      return "blocklisted";
  }
  return "?";
}

std::optional<Region> parse_region(std::string_view name) {
  if (name == "gc") return Region::Gc;
  if (name == "loader") return Region::Loader;
  if (name == "blocklisted") return Region::Blocklisted;
  return std::nullopt;
}

namespace {

class LineParser {
 public:
  LineParser(const json& obj, uint64_t line_no) : obj_(obj), line_no_(line_no) {}

  [[noreturn]] void fail(const std::string& reason) const { throw MalformedLine(line_no_, reason); }

  void expect_keys(std::initializer_list<std::string_view> required,
                   std::initializer_list<std::string_view> optional = {}) const {
    std::size_t seen = 0;
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      const std::string& key = it.key();
      bool known = false;
      for (auto k : required) known = known || key == k;
      if (known) {
        ++seen;
        continue;
      }
      for (auto k : optional) known = known || key == k;
      if (!known) fail("unknown key \"" + key + "\"");
    }
    if (seen != required.size()) {
      for (auto k : required) {
        if (!obj_.contains(std::string(k))) fail("missing key \"" + std::string(k) + "\"");
      }
    }
  }

  uint64_t uint(std::string_view key, uint64_t max = ~0ULL) const {
    const json& v = obj_.at(std::string(key));
    if (!v.is_number_unsigned()) fail("\"" + std::string(key) + "\" must be a non-negative integer");
    auto x = v.get<uint64_t>();
    if (x > max) fail("\"" + std::string(key) + "\" out of range");
    return x;
  }

  uint64_t hex(std::string_view key) const {
    const json& v = obj_.at(std::string(key));
    if (!v.is_string()) fail("\"" + std::string(key) + "\" must be a hex string");
    const auto& s = v.get_ref<const std::string&>();
    if (s.size() < 3 || s.size() > 18 || s[0] != '0' || s[1] != 'x') {
      fail("\"" + std::string(key) + "\" must be 0x-prefixed hex");
    }
    uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(s.data() + 2, s.data() + s.size(), out, 16);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      fail("\"" + std::string(key) + "\" is not valid hex");
    }
    return out;
  }

  const std::string& str(std::string_view key) const {
    const json& v = obj_.at(std::string(key));
    if (!v.is_string()) fail("\"" + std::string(key) + "\" must be a string");
    return v.get_ref<const std::string&>();
  }

  bool boolean(std::string_view key) const {
    const json& v = obj_.at(std::string(key));
    if (!v.is_boolean()) fail("\"" + std::string(key) + "\" must be a boolean");
    return v.get<bool>();
  }

  uint32_t thread() const { return static_cast<uint32_t>(uint("th", 0xffffffffULL)); }

  Region region() const {
    auto r = parse_region(str("r"));
    if (!r) fail("unknown region \"" + str("r") + "\"");
    return *r;
  }

 private:
  const json& obj_;
  uint64_t line_no_;
};

json parse_object(std::string_view line, uint64_t line_no) {
  json obj = json::parse(line.begin(), line.end(), nullptr, /*allow_exceptions=*/false);
  if (obj.is_discarded()) throw MalformedLine(line_no, "not valid JSON");
  if (!obj.is_object()) throw MalformedLine(line_no, "record is not an object");
  auto t = obj.find("t");
  if (t == obj.end() || !t->is_string()) throw MalformedLine(line_no, "missing record tag \"t\"");
  return obj;
}

void append_hex(std::string& out, uint64_t v) {
  char buf[16];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, 16);
  out += "0x";
  out.append(buf, ptr);
}

void append_uint(std::string& out, uint64_t v) {
  char buf[24];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, ptr);
}

void append_string(std::string& out, const std::string& s) { out += json(s).dump(); }

}  // namespace

TraceEvent parse_event_line(std::string_view line, uint64_t line_no, uint64_t seq) {
  const json obj = parse_object(line, line_no);
  const LineParser p(obj, line_no);
  const std::string& tag = obj["t"].get_ref<const std::string&>();
  TraceEvent ev;
  ev.seq = seq;

  if (tag == "acc") {
    p.expect_keys({"t", "th", "ip", "addr", "w", "k", "v"});
    Access a;
    ev.thread = p.thread();
    a.ip = p.hex("ip");
    a.addr = p.hex("addr");
    const uint64_t w = p.uint("w");
    if (!is_valid_width(w)) p.fail("width must be 1, 2, 4 or 8");
    a.width = static_cast<uint8_t>(w);
    const std::string& k = p.str("k");
    if (k == "ld") {
      a.kind = AccessKind::Load;
    } else if (k == "st") {
      a.kind = AccessKind::Store;
    } else {
      p.fail("access kind must be \"ld\" or \"st\"");
    }
    a.value = p.hex("v");
    if ((a.value & ~width_mask(a.width)) != 0) p.fail("value does not fit in width");
    if (a.addr + a.width < a.addr) p.fail("access wraps the address space");
    ev.payload = a;
  } else if (tag == "ncall") {
    p.expect_keys({"t", "th", "id", "sym", "mod", "ip", "eval"});
    ev.thread = p.thread();
    ev.payload = NativeCall{p.uint("id"), p.str("sym"), p.str("mod"), p.hex("ip"), p.boolean("eval")};
  } else if (tag == "nret") {
    p.expect_keys({"t", "th", "id"});
    ev.thread = p.thread();
    ev.payload = NativeReturn{p.uint("id")};
  } else if (tag == "pycall") {
    p.expect_keys({"t", "th", "id", "fn", "file", "line"});
    ev.thread = p.thread();
    ev.payload = PyCall{p.uint("id"), p.str("fn"), p.str("file"),
                        static_cast<uint32_t>(p.uint("line", 0xffffffffULL))};
  } else if (tag == "pyret") {
    p.expect_keys({"t", "th", "id"});
    ev.thread = p.thread();
    ev.payload = PyReturn{p.uint("id")};
  } else if (tag == "renter") {
    p.expect_keys({"t", "th", "r"});
    ev.thread = p.thread();
    ev.payload = RegionEnter{p.region()};
  } else if (tag == "rexit") {
    p.expect_keys({"t", "th", "r"});
    ev.thread = p.thread();
    ev.payload = RegionExit{p.region()};
  } else if (tag == "alloc") {
    p.expect_keys({"t", "obj", "base", "size"}, {"th"});
    if (obj.contains("th")) ev.thread = p.thread();
    Alloc a{p.uint("obj"), p.hex("base"), p.uint("size")};
    if (a.base + a.size < a.base) p.fail("object wraps the address space");
    ev.payload = a;
  } else if (tag == "free") {
    p.expect_keys({"t", "obj"}, {"th"});
    if (obj.contains("th")) ev.thread = p.thread();
    ev.payload = Free{p.uint("obj")};
  } else if (tag == "hdr") {
    p.fail("unexpected header record in body");
  } else {
    p.fail("unknown record tag \"" + tag + "\"");
  }
  return ev;
}

std::string encode_event(const TraceEvent& event) {
  std::string out;
  out.reserve(96);
  auto thread = [&] {
    out += ",\"th\":";
    append_uint(out, event.thread);
  };
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Access>) {
          if (!is_valid_width(p.width)) {
            throw MalformedEvent("seq " + std::to_string(event.seq) + ": invalid access width " +
                                 std::to_string(p.width));
          }
          if ((p.value & ~width_mask(p.width)) != 0) {
            throw MalformedEvent("seq " + std::to_string(event.seq) + ": value exceeds width");
          }
          out += "{\"t\":\"acc\"";
          thread();
          out += ",\"ip\":\"";
          append_hex(out, p.ip);
          out += "\",\"addr\":\"";
          append_hex(out, p.addr);
          out += "\",\"w\":";
          append_uint(out, p.width);
          out += ",\"k\":\"";
          out += to_string(p.kind);
          out += "\",\"v\":\"";
          append_hex(out, p.value);
          out += "\"}";
        } else if constexpr (std::is_same_v<T, NativeCall>) {
          out += "{\"t\":\"ncall\"";
          thread();
          out += ",\"id\":";
          append_uint(out, p.call_id);
          out += ",\"sym\":";
          append_string(out, p.symbol);
          out += ",\"mod\":";
          append_string(out, p.module);
          out += ",\"ip\":\"";
          append_hex(out, p.ip);
          out += "\",\"eval\":";
          out += p.interp_eval ? "true" : "false";
          out += "}";
        } else if constexpr (std::is_same_v<T, NativeReturn>) {
          out += "{\"t\":\"nret\"";
          thread();
          out += ",\"id\":";
          append_uint(out, p.call_id);
          out += "}";
        } else if constexpr (std::is_same_v<T, PyCall>) {
          out += "{\"t\":\"pycall\"";
          thread();
          out += ",\"id\":";
          append_uint(out, p.frame_id);
          out += ",\"fn\":";
          append_string(out, p.function);
          out += ",\"file\":";
          append_string(out, p.file);
          out += ",\"line\":";
          append_uint(out, p.line);
          out += "}";
        } else if constexpr (std::is_same_v<T, PyReturn>) {
          out += "{\"t\":\"pyret\"";
          thread();
          out += ",\"id\":";
          append_uint(out, p.frame_id);
          out += "}";
        } else if constexpr (std::is_same_v<T, RegionEnter> || std::is_same_v<T, RegionExit>) {
          out += std::is_same_v<T, RegionEnter> ? "{\"t\":\"renter\"" : "{\"t\":\"rexit\"";
          thread();
          out += ",\"r\":\"";
          out += to_string(p.region);
          out += "\"}";
        } else if constexpr (std::is_same_v<T, Alloc>) {
          out += "{\"t\":\"alloc\"";
          if (event.thread != 0) thread();
          out += ",\"obj\":";
          append_uint(out, p.obj_id);
          out += ",\"base\":\"";
          append_hex(out, p.base);
          out += "\",\"size\":";
          append_uint(out, p.size);
          out += "}";
        } else if constexpr (std::is_same_v<T, Free>) {
          out += "{\"t\":\"free\"";
          if (event.thread != 0) thread();
          out += ",\"obj\":";
          append_uint(out, p.obj_id);
          out += "}";
        }
      },
      event.payload);
  return out;
}

void write_trace(std::span<const TraceEvent> events, std::ostream& out) {
  out << "{\"t\":\"hdr\",\"version\":" << kTraceVersion << "}\n";
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].seq != i) {
      throw MalformedEvent("event " + std::to_string(i) + " has seq " +
                           std::to_string(events[i].seq) + "; seq must equal the line index");
    }
    out << encode_event(events[i]) << '\n';
  }
  if (!out) throw IoError("write failed");
}

void write_trace(std::span<const TraceEvent> events, const std::filesystem::path& path) {
  // Encode fully before touching the file so a rejected event leaves no partial output.
  std::string buffer;
  {
    std::ostringstream tmp;
    write_trace(events, tmp);
    buffer = std::move(tmp).str();
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

TraceReader::TraceReader(const std::filesystem::path& path)
    : owned_(std::make_unique<std::ifstream>(path, std::ios::binary)), in_(owned_.get()) {
  if (!*owned_) throw IoError("cannot open " + path.string());
  read_header();
}

TraceReader::TraceReader(std::istream& in) : in_(&in) { read_header(); }

TraceReader::~TraceReader() = default;

void TraceReader::read_header() {
  if (!std::getline(*in_, line_)) throw MalformedLine(1, "missing header record");
  line_no_ = 1;
  const json obj = parse_object(line_, 1);
  if (obj["t"] != "hdr") throw MalformedLine(1, "first record must be the header");
  const LineParser p(obj, 1);
  p.expect_keys({"t", "version"});
  if (!obj["version"].is_number_unsigned()) throw MalformedLine(1, "version must be an integer");
  const auto version = obj["version"].get<uint64_t>();
  if (version != kTraceVersion) {
    throw UnsupportedVersion("unsupported trace version " + std::to_string(version));
  }
}

std::optional<TraceEvent> TraceReader::next() {
  if (!std::getline(*in_, line_)) return std::nullopt;
  ++line_no_;
  if (line_.empty()) {
    // A blank line is only tolerated as the very end of input.
    if (in_->peek() == std::char_traits<char>::eof()) return std::nullopt;
    throw MalformedLine(line_no_, "empty line");
  }
  return parse_event_line(line_, line_no_, next_seq_++);
}

Trace read_trace(std::istream& in) {
  TraceReader reader(in);
  Trace out;
  while (auto ev = reader.next()) out.push_back(std::move(*ev));
  return out;
}

Trace read_trace(const std::filesystem::path& path) {
  TraceReader reader(path);
  Trace out;
  while (auto ev = reader.next()) out.push_back(std::move(*ev));
  return out;
}

}  // namespace redwatch
