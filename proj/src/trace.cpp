#include "redwatch/error.hpp"
#include "redwatch/trace.hpp"

namespace redwatch {

std::string_view to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::SeqOrder:
      return "SeqOrder";
    case ViolationKind::InvalidField:
      return "InvalidField";
    case ViolationKind::StackDiscipline:
      return "StackDiscipline";
    case ViolationKind::HybridMismatch:
      return "HybridMismatch";
    case ViolationKind::RegionDiscipline:
      return "RegionDiscipline";
    case ViolationKind::ObjectLifetime:
      return "ObjectLifetime";
  }
  return "?";
}

// ---------------------------------------------------------------------------

LiveObjects::AllocResult LiveObjects::alloc(const Alloc& a) {
  if (a.size == 0 || a.base + a.size < a.base) return AllocResult::Empty;
  if (base_of_.count(a.obj_id) != 0) return AllocResult::DuplicateId;
  const uint64_t end = a.base + a.size;
  auto next = by_base_.lower_bound(a.base);
  if (next != by_base_.end() && next->first < end) return AllocResult::Overlap;
  if (next != by_base_.begin()) {
    const LiveObject& prev = std::prev(next)->second;
    if (prev.base + prev.size > a.base) return AllocResult::Overlap;
  }
  by_base_.emplace_hint(next, a.base, LiveObject{a.obj_id, a.base, a.size});
  base_of_.emplace(a.obj_id, a.base);
  return AllocResult::Ok;
}

bool LiveObjects::free(uint64_t obj_id) {
  auto it = base_of_.find(obj_id);
  if (it == base_of_.end()) return false;
  by_base_.erase(it->second);
  base_of_.erase(it);
  return true;
}

std::optional<LiveObject> LiveObjects::containing(uint64_t addr) const {
  auto it = by_base_.upper_bound(addr);
  if (it == by_base_.begin()) return std::nullopt;
  const LiveObject& obj = std::prev(it)->second;
  if (!obj.contains(addr)) return std::nullopt;
  return obj;
}

std::optional<LiveObject> LiveObjects::find(uint64_t obj_id) const {
  auto it = base_of_.find(obj_id);
  if (it == base_of_.end()) return std::nullopt;
  return by_base_.at(it->second);
}

// ---------------------------------------------------------------------------

ValidationReport validate_trace(std::span<const TraceEvent> events) {
  ValidationReport report;
  std::unordered_map<uint32_t, ThreadStacks> threads;
  LiveObjects objects;
  std::optional<uint64_t> prev_seq;

  auto flag = [&](uint64_t seq, ViolationKind kind, std::string detail) {
    report.violations.push_back({seq, kind, std::move(detail)});
  };

  for (const TraceEvent& ev : events) {
    if (prev_seq && ev.seq <= *prev_seq) {
      flag(ev.seq, ViolationKind::SeqOrder, "seq does not increase");
    }
    prev_seq = ev.seq;
    ThreadStacks& st = threads[ev.thread];

    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, Access>) {
            if (!is_valid_width(p.width)) {
              flag(ev.seq, ViolationKind::InvalidField, "invalid width " + std::to_string(p.width));
            } else if ((p.value & ~width_mask(p.width)) != 0) {
              flag(ev.seq, ViolationKind::InvalidField, "value exceeds width");
            }
            if (st.eval_frames != st.py_stack.size()) {
              flag(ev.seq, ViolationKind::HybridMismatch,
                   std::to_string(st.eval_frames) + " eval frames but " +
                       std::to_string(st.py_stack.size()) + " python frames");
            }
          } else if constexpr (std::is_same_v<T, NativeCall>) {
            st.native_stack.push_back(p);
            if (p.interp_eval) ++st.eval_frames;
          } else if constexpr (std::is_same_v<T, NativeReturn>) {
            if (st.native_stack.empty() || st.native_stack.back().call_id != p.call_id) {
              flag(ev.seq, ViolationKind::StackDiscipline,
                   "native return " + std::to_string(p.call_id) + " does not match innermost call");
            } else {
              if (st.native_stack.back().interp_eval) --st.eval_frames;
              st.native_stack.pop_back();
            }
          } else if constexpr (std::is_same_v<T, PyCall>) {
            st.py_stack.push_back(p);
          } else if constexpr (std::is_same_v<T, PyReturn>) {
            if (st.py_stack.empty() || st.py_stack.back().frame_id != p.frame_id) {
              flag(ev.seq, ViolationKind::StackDiscipline,
                   "python return " + std::to_string(p.frame_id) + " does not match innermost frame");
            } else {
              st.py_stack.pop_back();
            }
          } else if constexpr (std::is_same_v<T, RegionEnter>) {
            ++st.open_regions[static_cast<std::size_t>(p.region)];
          } else if constexpr (std::is_same_v<T, RegionExit>) {
            auto& depth = st.open_regions[static_cast<std::size_t>(p.region)];
            if (depth == 0) {
              flag(ev.seq, ViolationKind::RegionDiscipline,
                   "exit from region " + std::string(to_string(p.region)) + " that is not open");
            } else {
              --depth;
            }
          } else if constexpr (std::is_same_v<T, Alloc>) {
            switch (objects.alloc(p)) {
              case LiveObjects::AllocResult::Ok:
                break;
              case LiveObjects::AllocResult::Empty:
                flag(ev.seq, ViolationKind::InvalidField, "object has empty or wrapping range");
                break;
              case LiveObjects::AllocResult::DuplicateId:
                flag(ev.seq, ViolationKind::ObjectLifetime,
                     "object " + std::to_string(p.obj_id) + " is already live");
                break;
              case LiveObjects::AllocResult::Overlap:
                flag(ev.seq, ViolationKind::ObjectLifetime,
                     "object " + std::to_string(p.obj_id) + " overlaps a live object");
                break;
            }
          } else if constexpr (std::is_same_v<T, Free>) {
            if (!objects.free(p.obj_id)) {
              flag(ev.seq, ViolationKind::ObjectLifetime,
                   "free of object " + std::to_string(p.obj_id) + " that is not live");
            }
          }
        },
        ev.payload);
  }
  return report;
}

// ---------------------------------------------------------------------------

void StackReplay::apply(const TraceEvent& ev) {
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, NativeCall>) {
          ThreadStacks& st = threads_[ev.thread];
          st.native_stack.push_back(p);
          if (p.interp_eval) ++st.eval_frames;
        } else if constexpr (std::is_same_v<T, NativeReturn>) {
          ThreadStacks& st = threads_[ev.thread];
          if (st.native_stack.empty() || st.native_stack.back().call_id != p.call_id) {
            throw StackDiscipline(ev.seq, "native return " + std::to_string(p.call_id) +
                                              " does not match innermost call");
          }
          if (st.native_stack.back().interp_eval) --st.eval_frames;
          st.native_stack.pop_back();
        } else if constexpr (std::is_same_v<T, PyCall>) {
          threads_[ev.thread].py_stack.push_back(p);
        } else if constexpr (std::is_same_v<T, PyReturn>) {
          ThreadStacks& st = threads_[ev.thread];
          if (st.py_stack.empty() || st.py_stack.back().frame_id != p.frame_id) {
            throw StackDiscipline(ev.seq, "python return " + std::to_string(p.frame_id) +
                                              " does not match innermost frame");
          }
          st.py_stack.pop_back();
        } else if constexpr (std::is_same_v<T, RegionEnter>) {
          ++threads_[ev.thread].open_regions[static_cast<std::size_t>(p.region)];
        } else if constexpr (std::is_same_v<T, RegionExit>) {
          auto& depth = threads_[ev.thread].open_regions[static_cast<std::size_t>(p.region)];
          if (depth == 0) {
            throw StackDiscipline(ev.seq, "exit from region " + std::string(to_string(p.region)) +
                                              " that is not open");
          }
          --depth;
        }
      },
      ev.payload);
}

const ThreadStacks& StackReplay::stacks(uint32_t thread) const {
  static const ThreadStacks kEmpty;
  auto it = threads_.find(thread);
  return it == threads_.end() ? kEmpty : it->second;
}

std::vector<AccessContext> replay_stacks(std::span<const TraceEvent> events) {
  StackReplay replay;
  std::vector<AccessContext> out;
  for (const TraceEvent& ev : events) {
    replay.apply(ev);
    if (const auto* a = std::get_if<Access>(&ev.payload)) {
      const ThreadStacks& st = replay.stacks(ev.thread);
      out.push_back(AccessContext{ev.seq, ev.thread, *a, st.native_stack, st.py_stack,
                                  st.open_regions, st.innermost_call()});
    }
  }
  return out;
}

}  // namespace redwatch
