#include "redwatch/synth.hpp"

#include <cmath>
#include <unordered_map>

#include "redwatch/error.hpp"
#include "redwatch/rng.hpp"

namespace redwatch {

namespace {

constexpr uint64_t kObjectBase = 0x7f0000000000;
constexpr uint64_t kObjectStride = 0x10000;
constexpr uint64_t kHeaderBytes = 16;
constexpr uint64_t kLooseBase = 0x560000000000;
constexpr uint64_t kAccessIpBase = 0x400000;

/// Appends events with consecutive seqs and globally unique call/frame ids.
class Emitter {
 public:
  uint64_t ncall(uint32_t th, std::string sym, std::string mod, uint64_t ip, bool eval = false) {
    const uint64_t id = next_call_++;
    push(th, NativeCall{id, std::move(sym), std::move(mod), ip, eval});
    return id;
  }
  void nret(uint32_t th, uint64_t id) { push(th, NativeReturn{id}); }

  uint64_t pycall(uint32_t th, std::string fn, std::string file, uint32_t line) {
    const uint64_t id = next_frame_++;
    push(th, PyCall{id, std::move(fn), std::move(file), line});
    return id;
  }
  void pyret(uint32_t th, uint64_t id) { push(th, PyReturn{id}); }

  /// Eval frame plus the python frame it runs.
  std::pair<uint64_t, uint64_t> enter_py(uint32_t th, std::string fn, std::string file,
                                         uint32_t line) {
    const uint64_t eval = ncall(th, "_PyEval_EvalFrameDefault", "libpython3.so", 0x7a0010, true);
    return {eval, pycall(th, std::move(fn), std::move(file), line)};
  }
  void leave_py(uint32_t th, std::pair<uint64_t, uint64_t> ids) {
    pyret(th, ids.second);
    nret(th, ids.first);
  }

  void load(uint32_t th, uint64_t ip, uint64_t addr, uint64_t value, uint8_t width = 8) {
    push(th, Access{ip, addr, width, AccessKind::Load, value & width_mask(width)});
  }
  void store(uint32_t th, uint64_t ip, uint64_t addr, uint64_t value, uint8_t width = 8) {
    push(th, Access{ip, addr, width, AccessKind::Store, value & width_mask(width)});
  }
  void region_enter(uint32_t th, Region r) { push(th, RegionEnter{r}); }
  void region_exit(uint32_t th, Region r) { push(th, RegionExit{r}); }
  void alloc(uint32_t th, uint64_t obj, uint64_t base, uint64_t size) {
    push(th, Alloc{obj, base, size});
  }
  void free(uint32_t th, uint64_t obj) { push(th, Free{obj}); }

  Trace take() { return std::move(events_); }

 private:
  void push(uint32_t th, Payload p) {
    events_.push_back(TraceEvent{events_.size(), th, std::move(p)});
  }

  Trace events_;
  uint64_t next_call_ = 1;
  uint64_t next_frame_ = 1;
};

bool is_prime(uint32_t n) {
  if (n < 2) return false;
  for (uint32_t d = 2; d * d <= n; ++d) {
    if (n % d == 0) return false;
  }
  return true;
}

/// True for the `count` of `total` slots spread evenly, centred.
bool spread(uint64_t slot, uint64_t count, uint64_t total) {
  return ((slot + 1) * count + total / 2) / total > (slot * count + total / 2) / total;
}

bool fraction_ok(double f) { return std::isfinite(f) && f >= 0.0 && f <= 1.0; }

}  // namespace

void SynthSpec::validate() const {
  if (threads == 0) throw InvalidSpec("threads must be >= 1");
  if (n_accesses == 0) throw InvalidSpec("n_accesses must be >= 1");
  if (address_pool == 0) throw InvalidSpec("address_pool must be >= 1");
  if (call_fanout == 0) throw InvalidSpec("call_fanout must be >= 1");
  if (call_depth > 64) throw InvalidSpec("call_depth must be <= 64");
  if (!fraction_ok(planted_fraction)) throw InvalidSpec("planted_fraction must be in [0,1]");
  if (!fraction_ok(eval_frame_ratio)) throw InvalidSpec("eval_frame_ratio must be in [0,1]");
  if (!fraction_ok(junk_access_fraction) || junk_access_fraction > 0.9) {
    throw InvalidSpec("junk_access_fraction must be in [0,0.9]");
  }
  if (!fraction_ok(hibernation_window_fraction)) {
    throw InvalidSpec("hibernation_window_fraction must be in [0,1]");
  }
  if (!fraction_ok(free_churn_rate)) throw InvalidSpec("free_churn_rate must be in [0,1]");
  if (!fraction_ok(same_call_repeat_fraction)) {
    throw InvalidSpec("same_call_repeat_fraction must be in [0,1]");
  }
  if (object_count == 0 && (junk_access_fraction > 0 || free_churn_rate > 0)) {
    throw InvalidSpec("junk accesses and churn need object_count >= 1");
  }
  if (object_count > 0) {
    const uint64_t slots = (address_pool + object_count - 1) / object_count;
    if (kHeaderBytes + 8 * slots > kObjectStride) throw InvalidSpec("address_pool too large per object");
    if (object_count > (1ULL << 24)) throw InvalidSpec("object_count too large");
  } else if (address_pool > (1ULL << 32)) {
    throw InvalidSpec("address_pool too large");
  }
}

ChainLayout chain_layout(const SynthSpec& spec) {
  spec.validate();
  // Per-iteration targeted accesses form a prime cycle so a fixed sampling
  // period visits every chain position equally often.
  const double r = spec.planted_fraction;
  const double j = spec.junk_access_fraction;
  ChainLayout best;
  double best_err = 2.0;
  for (uint32_t len = 5; len <= 64; ++len) {
    const auto junk = static_cast<uint32_t>(std::lround(j * len / (1.0 - j)));
    if (!is_prime(len + junk) || len + junk < 7) continue;
    const uint32_t k = spec.mode_targeted == Mode::Stores ? len : len - 1;
    const auto q = static_cast<uint32_t>(std::lround(r * k));
    const double err = std::abs(static_cast<double>(q) / k - r);
    if (err < best_err - 1e-12) {
      best_err = err;
      best = ChainLayout{len, junk, k, q};
    }
  }
  return best;
}

Trace generate(const SynthSpec& spec) {
  const ChainLayout layout = chain_layout(spec);
  const uint32_t cycle = layout.chain_length + layout.junk_per_iteration;
  SplitMix64 rng(spec.seed);
  SplitMix64 path_rng = rng.split();
  SplitMix64 event_rng = rng.split();
  Emitter out;

  const uint64_t objects = spec.object_count;
  const uint64_t slots_per_object = objects == 0 ? 0 : (spec.address_pool + objects - 1) / objects;
  const uint64_t object_size = kHeaderBytes + 8 * slots_per_object;
  std::vector<uint64_t> object_id(objects);
  std::vector<uint64_t> refcount(objects, 1);
  uint64_t next_obj = 1;
  for (uint64_t o = 0; o < objects; ++o) {
    object_id[o] = next_obj++;
    out.alloc(0, object_id[o], kObjectBase + o * kObjectStride, object_size);
  }

  std::unordered_map<uint64_t, uint64_t> current;  // addr -> last value
  uint64_t fresh = 0x1000;
  uint64_t emitted = 0;
  uint64_t hibernated = 0;
  const double h = spec.hibernation_window_fraction;

  for (uint64_t it = 0; emitted < spec.n_accesses; ++it) {
    const auto th = static_cast<uint32_t>(it % spec.threads);
    const uint64_t slot = it % spec.address_pool;
    uint64_t addr;
    std::optional<uint64_t> obj;
    if (objects > 0) {
      obj = slot % objects;
      addr = kObjectBase + *obj * kObjectStride + kHeaderBytes + 8 * (slot / objects);
    } else {
      addr = kLooseBase + 8 * slot;
    }

    // Call path for this iteration.
    std::vector<std::pair<uint64_t, uint64_t>> frames;  // (native id, python id or 0)
    const uint64_t root = out.ncall(th, "main", "python3", 0x401000);
    for (uint32_t d = 0; d < spec.call_depth; ++d) {
      const uint64_t k = path_rng.below(spec.call_fanout);
      if (path_rng.unit() < spec.eval_frame_ratio) {
        frames.push_back(out.enter_py(th, "f" + std::to_string(d) + "_" + std::to_string(k),
                                      "mod" + std::to_string(d) + ".py",
                                      static_cast<uint32_t>(10 + k)));
      } else {
        const uint64_t ip = 0x7c0000 + 0x100 * d + 0x10 * k;
        frames.push_back({out.ncall(th, "lib" + std::to_string(d) + "_" + std::to_string(k),
                                    "libsynth.so", ip),
                          0});
      }
    }

    // Random rather than evenly spaced windows, so they cannot alias with a
    // fixed sampling stride.
    const bool hibernate = h > 0 && event_rng.unit() < h;
    const Region region = hibernated % 2 == 0 ? Region::Gc : Region::Loader;
    if (hibernate) {
      ++hibernated;
      out.region_enter(th, region);
    }

    uint64_t& value = current[addr];
    if (spec.mode_targeted == Mode::Loads) {
      const uint64_t id = out.ncall(th, "store_item", "libsynth.so", 0x7d0000);
      value = fresh++;
      out.store(th, kAccessIpBase + 0x800, addr, value);
      out.nret(th, id);
      ++emitted;
    }

    uint32_t chain_pos = 0;
    for (uint32_t s = 0; s < cycle; ++s) {
      if (spread(s, layout.junk_per_iteration, cycle)) {
        // Reference-count traffic on the object header.
        const uint64_t base = kObjectBase + *obj * kObjectStride;
        const uint64_t id = out.ncall(th, "Py_IncRef", "libpython3.so", 0x7a1000);
        if (spec.mode_targeted == Mode::Stores) {
          out.store(th, kAccessIpBase + 0x900, base, ++refcount[*obj]);
        } else {
          out.load(th, kAccessIpBase + 0x900, base, refcount[*obj]);
        }
        out.nret(th, id);
        ++emitted;
        continue;
      }
      const uint32_t c = chain_pos++;
      bool planted;
      if (spec.mode_targeted == Mode::Stores) {
        planted = spread(c, layout.planted, layout.transitions);
      } else {
        planted = c == 0 || spread(c - 1, layout.planted, layout.transitions);
      }
      if (!planted) value = fresh++;

      const uint64_t k = c % spec.call_fanout;
      const uint64_t ip = kAccessIpBase + 0x10 * c;
      const uint64_t id =
          out.ncall(th, "native_op" + std::to_string(k), "libsynth.so", 0x7e0000 + 0x40 * k);
      const bool repeat = spec.same_call_repeat_fraction > 0 &&
                          event_rng.unit() < spec.same_call_repeat_fraction;
      for (int n = repeat ? 2 : 1; n > 0; --n) {
        if (spec.mode_targeted == Mode::Stores) {
          out.store(th, ip, addr, value);
        } else {
          out.load(th, ip, addr, value);
        }
        ++emitted;
      }
      out.nret(th, id);
    }

    if (hibernate) out.region_exit(th, region);
    for (auto f = frames.rbegin(); f != frames.rend(); ++f) {
      if (f->second != 0) {
        out.leave_py(th, *f);
      } else {
        out.nret(th, f->first);
      }
    }
    out.nret(th, root);

    if (obj && spec.free_churn_rate > 0 && event_rng.unit() < spec.free_churn_rate) {
      out.free(th, object_id[*obj]);
      object_id[*obj] = next_obj++;
      refcount[*obj] = 1;
      out.alloc(th, object_id[*obj], kObjectBase + *obj * kObjectStride, object_size);
    }
  }
  return out.take();
}

// ---------------------------------------------------------------------------
// Case studies.

namespace {

constexpr uint64_t kArrayObjSize = 96;
// ndarray field offsets past the refcount/type header.
constexpr uint64_t kDataField = 16;
constexpr uint64_t kNdField = 24;
constexpr uint64_t kDimsField = 32;
constexpr uint64_t kStridesField = 40;

struct ArrayObject {
  uint64_t base;
  uint64_t data;
  uint64_t nd;
  uint64_t dims;
  uint64_t strides;
};

void emit_array(Emitter& out, uint64_t obj_id, const ArrayObject& a, uint64_t data_bytes) {
  out.alloc(0, obj_id, a.base, kArrayObjSize);
  out.alloc(0, obj_id + 1000, a.data, data_bytes);
  out.alloc(0, obj_id + 2000, a.dims, 64);
}

/// array_subscript -> prepare_index, which rereads the array's metadata.
void subscript(Emitter& out, uint32_t th, const ArrayObject& a, uint64_t index, uint64_t elem,
               uint64_t ip_base) {
  const uint64_t sub = out.ncall(th, "array_subscript", "multiarray.so", 0x7f3a10);
  const uint64_t incref = out.ncall(th, "Py_IncRef", "libpython3.so", 0x7a1000);
  out.load(th, ip_base + 0x00, a.base, 2);
  out.store(th, ip_base + 0x04, a.base, 3);
  out.nret(th, incref);
  const uint64_t prep = out.ncall(th, "prepare_index", "multiarray.so", 0x7f3c80);
  out.load(th, ip_base + 0x10, a.base + kNdField, a.nd);
  out.load(th, ip_base + 0x18, a.base + kDimsField, a.dims);
  out.load(th, ip_base + 0x20, a.base + kStridesField, a.strides);
  out.load(th, ip_base + 0x28, a.base + kDataField, a.data);
  out.nret(th, prep);
  out.load(th, ip_base + 0x38, a.data + 8 * index, elem);
  out.nret(th, sub);
}

CaseStudy cnn_subscript() {
  CaseStudy cs{"cnn_subscript", Mode::Loads, {}, "array_subscript", "backprop", "conv.py", 62};
  Emitter out;
  const ArrayObject filters{0x7f1000000000, 0x7f1000100000, 3, 0x7f1000200000, 0x7f1000200040};
  const ArrayObject grad{0x7f1100000000, 0x7f1100100000, 3, 0x7f1100200000, 0x7f1100200040};
  emit_array(out, 1, filters, 8 * 8 * 9);
  emit_array(out, 2, grad, 8 * 26 * 26 * 8);

  const uint64_t main = out.ncall(0, "main", "python3", 0x401000);
  const auto module = out.enter_py(0, "<module>", "cnn.py", 88);
  const auto train = out.enter_py(0, "train", "cnn.py", 51);
  const auto backprop = out.enter_py(0, "backprop", "conv.py", 62);
  uint64_t fresh = 0x3ff0000000000000;
  for (uint64_t i = 0; i < 4; ++i) {
    for (uint64_t f = 0; f < 8; ++f) {
      // d_L_d_filters[f] += d_L_d_out[i, j, f] * im_region
      subscript(out, 0, grad, i * 8 + f, fresh++, 0x5a0100);
      subscript(out, 0, filters, f, fresh++, 0x5a0200);
      const uint64_t mul = out.ncall(0, "DOUBLE_multiply", "umath.so", 0x7f5100);
      for (uint64_t e = 0; e < 9; ++e) {
        out.store(0, 0x5a0300, filters.data + 8 * (f * 9 + e), fresh++);
      }
      out.nret(0, mul);
    }
  }
  out.leave_py(0, backprop);
  out.leave_py(0, train);
  out.leave_py(0, module);
  out.nret(0, main);
  cs.trace = out.take();
  return cs;
}

CaseStudy metaheuristics_power() {
  CaseStudy cs{"metaheuristics_power", Mode::Stores, {}, "LONG_power", "CEC_10",
               "FunctionUtil.py", 375};
  Emitter out;
  constexpr uint64_t kScratch = 0x7f2000000000;
  out.alloc(0, 1, kScratch, 256);
  const uint64_t dim_power = kScratch + 16;  // np.power(dim, 1.2) result
  const uint64_t pow2 = kScratch + 24;       // np.power(2, j + 1) result
  const uint64_t product = kScratch + 32;    // ... * x[i]
  const uint64_t temp = kScratch + 40;
  const uint64_t acc = kScratch + 48;

  const uint64_t main = out.ncall(0, "main", "python3", 0x401000);
  const auto module = out.enter_py(0, "<module>", "run.py", 12);
  uint64_t fresh = 0x4000000000000000;
  constexpr uint64_t kDim = 24;
  for (uint64_t i = 0; i < kDim; ++i) {
    {
      const auto inner = out.enter_py(0, "CEC_10", "FunctionUtil.py", 374);
      for (uint64_t j = 0; j < 8; ++j) {
        const uint64_t p = out.ncall(0, "LONG_power", "umath.so", 0x7f6200);
        out.store(0, 0x5b0100, pow2, 1ULL << (j + 1));
        out.nret(0, p);
        const uint64_t m = out.ncall(0, "array_multiply", "multiarray.so", 0x7f3e00);
        out.load(0, 0x5b0110, pow2, 1ULL << (j + 1));
        out.store(0, 0x5b0118, product, fresh++);
        out.nret(0, m);
        const uint64_t a = out.ncall(0, "DOUBLE_add", "umath.so", 0x7f5200);
        out.store(0, 0x5b0120, temp, fresh++);
        out.nret(0, a);
      }
      out.leave_py(0, inner);
    }
    {
      // A *= np.power(temp, 10 / np.power(dim, 1.2))
      const auto outer = out.enter_py(0, "CEC_10", "FunctionUtil.py", 375);
      const uint64_t p = out.ncall(0, "LONG_power", "umath.so", 0x7f6200);
      out.store(0, 0x5b0200, dim_power, 0x404ad8b4f4b1e2c1);
      out.nret(0, p);
      const uint64_t q = out.ncall(0, "DOUBLE_power", "umath.so", 0x7f6300);
      out.store(0, 0x5b0210, temp, fresh++);
      out.nret(0, q);
      const uint64_t m = out.ncall(0, "DOUBLE_multiply", "umath.so", 0x7f5100);
      out.store(0, 0x5b0220, acc, fresh++);
      out.nret(0, m);
      out.leave_py(0, outer);
    }
  }
  out.leave_py(0, module);
  out.nret(0, main);
  cs.trace = out.take();
  return cs;
}

CaseStudy ta_adx() {
  CaseStudy cs{"ta_adx", Mode::Loads, {}, "array_subscript", "adx", "trend.py", 579};
  Emitter out;
  const ArrayObject adx{0x7f3000000000, 0x7f3000100000, 1, 0x7f3000200000, 0x7f3000200040};
  const ArrayObject dx{0x7f3100000000, 0x7f3100100000, 1, 0x7f3100200000, 0x7f3100200040};
  constexpr uint64_t kLen = 48;
  emit_array(out, 1, adx, 8 * kLen);
  emit_array(out, 2, dx, 8 * kLen);

  const uint64_t main = out.ncall(0, "main", "python3", 0x401000);
  const auto module = out.enter_py(0, "<module>", "analysis.py", 30);
  const auto frame = out.enter_py(0, "adx", "trend.py", 579);
  uint64_t fresh = 0x4010000000000000;
  std::vector<uint64_t> adx_values(kLen, 0);
  for (uint64_t i = 1; i < kLen; ++i) {
    // adx[i] = adx[i-1] * tmp + dx[i-1] / float(n)
    subscript(out, 0, adx, i - 1, adx_values[i - 1], 0x5c0100);
    subscript(out, 0, dx, i - 1, fresh++, 0x5c0200);
    const uint64_t set = out.ncall(0, "array_assign_subscript", "multiarray.so", 0x7f3b40);
    adx_values[i] = fresh++;
    out.store(0, 0x5c0300, adx.data + 8 * i, adx_values[i]);
    out.nret(0, set);
  }
  out.leave_py(0, frame);
  out.leave_py(0, module);
  out.nret(0, main);
  cs.trace = out.take();
  return cs;
}

}  // namespace

std::vector<std::string> case_study_names() {
  return {"cnn_subscript", "metaheuristics_power", "ta_adx"};
}

CaseStudy fixture_case_study(std::string_view name) {
  if (name == "cnn_subscript") return cnn_subscript();
  if (name == "metaheuristics_power") return metaheuristics_power();
  if (name == "ta_adx") return ta_adx();
  throw UnknownFixture("unknown fixture " + std::string(name));
}

}  // namespace redwatch
