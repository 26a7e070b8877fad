#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace redwatch {

enum class AccessKind : uint8_t { Load, Store };

enum class Region : uint8_t { Gc, Loader, Blocklisted };
inline constexpr std::size_t kRegionCount = 3;

std::string_view to_string(AccessKind kind);
std::string_view to_string(Region region);
std::optional<Region> parse_region(std::string_view name);

constexpr bool is_valid_width(uint64_t width) {
  return width == 1 || width == 2 || width == 4 || width == 8;
}

constexpr uint64_t width_mask(uint64_t width) {
  return width >= 8 ? ~0ULL : (1ULL << (8 * width)) - 1;
}

struct Access {
  uint64_t ip = 0;
  uint64_t addr = 0;
  uint8_t width = 8;
  AccessKind kind = AccessKind::Load;
  uint64_t value = 0;  // zero-extended to width

  uint64_t end() const { return addr + width; }
  bool overlaps(uint64_t lo, uint64_t hi) const { return addr < hi && lo < end(); }
  bool operator==(const Access&) const = default;
};

struct PyCall {
  uint64_t frame_id = 0;
  std::string function;
  std::string file;
  uint32_t line = 0;
  bool operator==(const PyCall&) const = default;
};

struct PyReturn {
  uint64_t frame_id = 0;
  bool operator==(const PyReturn&) const = default;
};

struct NativeCall {
  uint64_t call_id = 0;
  std::string symbol;
  std::string module;
  uint64_t ip = 0;
  bool interp_eval = false;
  bool operator==(const NativeCall&) const = default;
};

struct NativeReturn {
  uint64_t call_id = 0;
  bool operator==(const NativeReturn&) const = default;
};

struct RegionEnter {
  Region region = Region::Gc;
  bool operator==(const RegionEnter&) const = default;
};

struct RegionExit {
  Region region = Region::Gc;
  bool operator==(const RegionExit&) const = default;
};

struct Alloc {
  uint64_t obj_id = 0;
  uint64_t base = 0;
  uint64_t size = 0;
  bool operator==(const Alloc&) const = default;
};

struct Free {
  uint64_t obj_id = 0;
  bool operator==(const Free&) const = default;
};

using Payload = std::variant<Access, PyCall, PyReturn, NativeCall, NativeReturn, RegionEnter,
                             RegionExit, Alloc, Free>;

struct TraceEvent {
  uint64_t seq = 0;
  uint32_t thread = 0;
  Payload payload;

  bool operator==(const TraceEvent&) const = default;
};

using Trace = std::vector<TraceEvent>;

// ---------------------------------------------------------------------------
// Serialization. One JSON object per line; line 1 is {"t":"hdr","version":1}.

inline constexpr int kTraceVersion = 1;

/// Lazily reads a trace. seq is assigned from the 0-based body line index.
class TraceReader {
 public:
  explicit TraceReader(const std::filesystem::path& path);
  explicit TraceReader(std::istream& in);
  ~TraceReader();

  TraceReader(const TraceReader&) = delete;
  TraceReader& operator=(const TraceReader&) = delete;

  /// Next event, or nullopt at end of input. Throws MalformedLine.
  std::optional<TraceEvent> next();

 private:
  void read_header();

  std::unique_ptr<std::ifstream> owned_;
  std::istream* in_;
  uint64_t line_no_ = 0;
  uint64_t next_seq_ = 0;
  std::string line_;
};

Trace read_trace(const std::filesystem::path& path);
Trace read_trace(std::istream& in);

/// Parses one body line. Exposed for tests and tools.
TraceEvent parse_event_line(std::string_view line, uint64_t line_no, uint64_t seq);

/// Canonical single-line encoding of one event (no trailing newline).
std::string encode_event(const TraceEvent& event);

void write_trace(std::span<const TraceEvent> events, std::ostream& out);
void write_trace(std::span<const TraceEvent> events, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Validation.

enum class ViolationKind {
  SeqOrder,
  InvalidField,
  StackDiscipline,
  HybridMismatch,
  RegionDiscipline,
  ObjectLifetime,
};

std::string_view to_string(ViolationKind kind);

struct Violation {
  uint64_t seq = 0;
  ViolationKind kind = ViolationKind::SeqOrder;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

ValidationReport validate_trace(std::span<const TraceEvent> events);

// ---------------------------------------------------------------------------
// Object lifetimes.

struct LiveObject {
  uint64_t obj_id = 0;
  uint64_t base = 0;
  uint64_t size = 0;

  bool contains(uint64_t addr) const { return addr >= base && addr - base < size; }
};

/// Live objects keyed by address. Live ranges never overlap.
class LiveObjects {
 public:
  enum class AllocResult { Ok, DuplicateId, Overlap, Empty };

  AllocResult alloc(const Alloc& a);
  /// Returns false if obj_id is not live.
  bool free(uint64_t obj_id);

  std::optional<LiveObject> containing(uint64_t addr) const;
  std::optional<LiveObject> find(uint64_t obj_id) const;
  std::size_t size() const { return by_base_.size(); }

 private:
  std::map<uint64_t, LiveObject> by_base_;
  std::unordered_map<uint64_t, uint64_t> base_of_;
};

// ---------------------------------------------------------------------------
// Stack reconstruction.

struct ThreadStacks {
  std::vector<NativeCall> native_stack;  // root -> leaf
  std::vector<PyCall> py_stack;          // root -> leaf
  std::array<uint32_t, kRegionCount> open_regions{};
  std::size_t eval_frames = 0;

  bool region_open(Region r) const { return open_regions[static_cast<std::size_t>(r)] > 0; }
  std::optional<uint64_t> innermost_call() const {
    if (native_stack.empty()) return std::nullopt;
    return native_stack.back().call_id;
  }
};

/// Incrementally applies call/return/region events to per-thread stacks.
/// Throws StackDiscipline when a return or region exit does not match.
class StackReplay {
 public:
  void apply(const TraceEvent& event);
  const ThreadStacks& stacks(uint32_t thread) const;

 private:
  std::unordered_map<uint32_t, ThreadStacks> threads_;
};

struct AccessContext {
  uint64_t seq = 0;
  uint32_t thread = 0;
  Access access;
  std::vector<NativeCall> native_stack;
  std::vector<PyCall> py_stack;
  std::array<uint32_t, kRegionCount> open_regions{};
  std::optional<uint64_t> innermost_call;
};

/// Stack view for every Access event, in trace order.
std::vector<AccessContext> replay_stacks(std::span<const TraceEvent> events);

}  // namespace redwatch
