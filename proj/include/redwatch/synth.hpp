#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "redwatch/detector.hpp"
#include "redwatch/trace.hpp"

namespace redwatch {

/// Shape of a generated trace.
///
/// The trace is a loop: each iteration picks one pool address and performs a
/// chain of targeted accesses on it, each inside its own native call, under a
/// call path drawn from the depth/fanout/eval settings. A fixed subset of chain
/// positions repeats the previous value; all others write or observe a value
/// never seen before.
struct SynthSpec {
  uint64_t seed = 0;
  uint32_t threads = 1;
  uint64_t n_accesses = 10'000;
  Mode mode_targeted = Mode::Stores;
  double planted_fraction = 0.3;
  uint64_t address_pool = 64;
  uint32_t call_depth = 3;
  uint32_t call_fanout = 4;
  double eval_frame_ratio = 0.5;
  double junk_access_fraction = 0.0;
  double hibernation_window_fraction = 0.0;
  uint64_t object_count = 8;
  double free_churn_rate = 0.0;
  /// Chance that a targeted access is repeated inside the same native call.
  double same_call_repeat_fraction = 0.0;

  /// Throws InvalidSpec.
  void validate() const;
};

/// Deterministic for a given spec. Throws InvalidSpec.
Trace generate(const SynthSpec& spec);

/// Chain layout chosen for a spec: `chain_length` targeted accesses per
/// iteration, `junk_per_iteration` header accesses, and `planted` of the
/// `transitions` chain transitions repeating a value.
struct ChainLayout {
  uint32_t chain_length = 0;
  uint32_t junk_per_iteration = 0;
  uint32_t transitions = 0;
  uint32_t planted = 0;
};
ChainLayout chain_layout(const SynthSpec& spec);

/// A small trace reproducing the call-path shape of a known inefficiency,
/// together with what its top finding should show.
struct CaseStudy {
  std::string name;
  Mode mode = Mode::Loads;
  Trace trace;
  std::string native_symbol;  // native frame expected in the killing path
  std::string py_function;    // python frame directly above it
  std::string py_file;
  uint32_t py_line = 0;
};

std::vector<std::string> case_study_names();

/// Throws UnknownFixture.
CaseStudy fixture_case_study(std::string_view name);

}  // namespace redwatch
