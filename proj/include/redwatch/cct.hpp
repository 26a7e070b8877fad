#pragma once

#include <array>
#include <atomic>
#include <compare>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "redwatch/trace.hpp"

namespace redwatch {

struct NativeFrame {
  std::string symbol;
  std::string module;
  uint64_t ip = 0;
  auto operator<=>(const NativeFrame&) const = default;
};

struct PyFrame {
  std::string function;
  std::string file;
  uint32_t line = 0;
  auto operator<=>(const PyFrame&) const = default;
};

/// A sampled load or store. Only ever the last element of a path.
struct AccessLeaf {
  uint64_t ip = 0;
  AccessKind kind = AccessKind::Load;
  auto operator<=>(const AccessLeaf&) const = default;
};

using FrameKey = std::variant<NativeFrame, PyFrame, AccessLeaf>;

/// Total order: alternative index first, then fields.
std::strong_ordering compare_frames(const FrameKey& a, const FrameKey& b);
/// Stable 64-bit FNV-1a based hash, identical across platforms.
uint64_t hash_frame(const FrameKey& key);

/// Replaces the i-th interpreter-eval frame of the native stack (root to leaf)
/// with the i-th Python frame. Throws HybridMismatch on a count mismatch.
std::vector<FrameKey> merge_hybrid_path(std::span<const NativeCall> native_stack,
                                        std::span<const PyCall> py_stack);

/// Maximum skip-list height for the child index of a node at `depth`.
constexpr unsigned level_cap(uint32_t depth) {
  const uint32_t half = depth / 2;
  return half >= 14 ? 2u : 16u - half;
}
inline constexpr unsigned kMaxLevels = 16;

struct PathId {
  uint64_t value = 0;
  auto operator<=>(const PathId&) const = default;
};

class Cct;

class CctNode {
 public:
  CctNode(const CctNode&) = delete;
  CctNode& operator=(const CctNode&) = delete;

  uint64_t id() const { return id_; }
  const FrameKey& key() const { return key_; }
  uint64_t key_hash() const { return hash_; }
  uint32_t depth() const { return depth_; }
  const CctNode* parent() const { return parent_; }
  bool is_root() const { return parent_ == nullptr; }

  /// Height of this node's tower in its parent's child index.
  unsigned height() const { return height_; }
  /// Number of layers in this node's own child index.
  unsigned index_levels() const { return index_levels_; }

  uint64_t sample_count() const { return sample_count_.load(std::memory_order_relaxed); }
  uint64_t redundancy_weight() const { return redundancy_weight_.load(std::memory_order_relaxed); }
  uint64_t child_count() const { return child_count_.load(std::memory_order_acquire); }

 private:
  friend class Cct;

  CctNode(uint64_t id, FrameKey key, uint64_t hash, const CctNode* parent, unsigned height);

  uint64_t id_;
  FrameKey key_;
  uint64_t hash_;
  uint32_t depth_;
  const CctNode* parent_;
  unsigned height_;
  unsigned index_levels_;
  // 0 = being inserted, 1 = linked into the tree, 2 = lost an insert race.
  std::atomic<int> state_{0};

  std::unique_ptr<std::atomic<CctNode*>[]> next_;   // tower links among siblings
  std::unique_ptr<std::atomic<CctNode*>[]> heads_;  // head of own child index
  mutable std::atomic<uint64_t> child_count_{0};
  mutable std::atomic<uint64_t> sample_count_{0};
  mutable std::atomic<uint64_t> redundancy_weight_{0};
};

/// Process-wide calling context tree. Children of each node are kept in an
/// insert-only lock-free skip list ordered by (key hash, key). Inserts and
/// lookups may run concurrently from any number of threads.
class Cct {
 public:
  Cct();
  ~Cct();
  Cct(const Cct&) = delete;
  Cct& operator=(const Cct&) = delete;

  const CctNode& root() const { return *root_; }

  /// Child of `parent` with `key`, created if absent. Concurrent callers with
  /// the same key all get the same node.
  const CctNode& child(const CctNode& parent, const FrameKey& key);

  /// Child of `parent` with `key`, or nullptr. Never blocks.
  const CctNode* find_child(const CctNode& parent, const FrameKey& key,
                            std::size_t* comparisons = nullptr) const;

  /// Children in index order.
  std::vector<const CctNode*> children(const CctNode& parent) const;

  /// Interns frames + leaf as a root-to-leaf path. Idempotent.
  PathId intern_path(std::span<const FrameKey> frames, const AccessLeaf& leaf);

  /// Root-to-leaf keys (root excluded). Throws UnknownPathId.
  std::vector<FrameKey> resolve_path(PathId id) const;
  const CctNode& node(PathId id) const;
  bool contains(PathId id) const;

  void add_samples(PathId id, uint64_t n = 1);
  void add_redundancy(PathId id, uint64_t weight);

  /// Live node count, root included.
  std::size_t node_count() const { return node_count_.load(std::memory_order_acquire); }

  /// Visits every published node in id order. Not safe concurrently with inserts.
  template <class F>
  void for_each_node(F&& f) const {
    const uint64_t end = next_id_.load(std::memory_order_acquire);
    for (uint64_t id = 0; id < end; ++id) {
      if (const CctNode* n = lookup_id(id); n != nullptr) f(*n);
    }
  }

 private:
  static constexpr unsigned kChunkBits = 12;
  static constexpr std::size_t kChunkSize = std::size_t{1} << kChunkBits;
  static constexpr std::size_t kMaxChunks = std::size_t{1} << 16;

  struct Chunk {
    std::array<std::atomic<CctNode*>, kChunkSize> slots{};
  };

  struct Position {
    std::array<CctNode*, kMaxLevels> preds{};
    std::array<CctNode*, kMaxLevels> succs{};
  };

  std::atomic<CctNode*>& link(const CctNode& parent, CctNode* pred, unsigned level) const;
  CctNode* locate(const CctNode& parent, const FrameKey& key, uint64_t hash, Position* pos,
                  std::size_t* comparisons) const;
  void register_node(CctNode* node);
  CctNode* lookup_id(uint64_t id) const;

  std::unique_ptr<std::atomic<Chunk*>[]> chunks_;
  std::atomic<uint64_t> next_id_{0};
  std::atomic<std::size_t> node_count_{0};
  CctNode* root_ = nullptr;
};

}  // namespace redwatch
