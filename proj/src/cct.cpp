#include "redwatch/cct.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>

#include "redwatch/error.hpp"
#include "redwatch/rng.hpp"

namespace redwatch {

namespace {

constexpr int kPending = 0;
constexpr int kLive = 1;
constexpr int kDead = 2;

constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_bytes(uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

void fnv_u64(uint64_t& h, uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= kFnvPrime;
  }
}

void fnv_str(uint64_t& h, const std::string& s) {
  fnv_u64(h, s.size());
  fnv_bytes(h, s.data(), s.size());
}

bool is_leaf(const FrameKey& key) { return std::holds_alternative<AccessLeaf>(key); }

}  // namespace

std::strong_ordering compare_frames(const FrameKey& a, const FrameKey& b) {
  if (a.index() != b.index()) return a.index() <=> b.index();
  return std::visit(
      [&](const auto& x) -> std::strong_ordering {
        using T = std::decay_t<decltype(x)>;
        const T& y = std::get<T>(b);
        return x <=> y;
      },
      a);
}

uint64_t hash_frame(const FrameKey& key) {
  uint64_t h = kFnvOffset;
  fnv_u64(h, key.index());
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, NativeFrame>) {
          fnv_str(h, k.symbol);
          fnv_str(h, k.module);
          fnv_u64(h, k.ip);
        } else if constexpr (std::is_same_v<T, PyFrame>) {
          fnv_str(h, k.function);
          fnv_str(h, k.file);
          fnv_u64(h, k.line);
        } else {
          fnv_u64(h, k.ip);
          fnv_u64(h, static_cast<uint64_t>(k.kind));
        }
      },
      key);
  return h;
}

std::vector<FrameKey> merge_hybrid_path(std::span<const NativeCall> native_stack,
                                        std::span<const PyCall> py_stack) {
  const auto evals = static_cast<std::size_t>(std::count_if(
      native_stack.begin(), native_stack.end(), [](const NativeCall& c) { return c.interp_eval; }));
  if (evals != py_stack.size()) throw HybridMismatch(evals, py_stack.size());

  std::vector<FrameKey> out;
  out.reserve(native_stack.size());
  std::size_t next_py = 0;
  for (const NativeCall& c : native_stack) {
    if (c.interp_eval) {
      const PyCall& py = py_stack[next_py++];
      out.emplace_back(PyFrame{py.function, py.file, py.line});
    } else {
      out.emplace_back(NativeFrame{c.symbol, c.module, c.ip});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

CctNode::CctNode(uint64_t id, FrameKey key, uint64_t hash, const CctNode* parent, unsigned height)
    : id_(id),
      key_(std::move(key)),
      hash_(hash),
      depth_(parent == nullptr ? 0 : parent->depth_ + 1),
      parent_(parent),
      height_(height),
      index_levels_(level_cap(depth_)) {
  if (height_ > 0) {
    next_.reset(new std::atomic<CctNode*>[height_]);
    for (unsigned i = 0; i < height_; ++i) next_[i].store(nullptr, std::memory_order_relaxed);
  }
  // Leaves never get children; skip their index.
  if (!is_leaf(key_)) {
    heads_.reset(new std::atomic<CctNode*>[index_levels_]);
    for (unsigned i = 0; i < index_levels_; ++i) heads_[i].store(nullptr, std::memory_order_relaxed);
  }
}

Cct::Cct() : chunks_(new std::atomic<Chunk*>[kMaxChunks]()) {
  root_ = new CctNode(next_id_.fetch_add(1), NativeFrame{}, 0, nullptr, 0);
  register_node(root_);
  root_->state_.store(kLive, std::memory_order_release);
  node_count_.store(1, std::memory_order_release);
}

Cct::~Cct() {
  for (std::size_t c = 0; c < kMaxChunks; ++c) {
    Chunk* chunk = chunks_[c].load(std::memory_order_acquire);
    if (chunk == nullptr) continue;
    for (auto& slot : chunk->slots) delete slot.load(std::memory_order_relaxed);
    delete chunk;
  }
}

void Cct::register_node(CctNode* node) {
  const uint64_t id = node->id_;
  const uint64_t c = id >> kChunkBits;
  if (c >= kMaxChunks) throw std::length_error("calling context tree is full");
  Chunk* chunk = chunks_[c].load(std::memory_order_acquire);
  if (chunk == nullptr) {
    auto fresh = std::make_unique<Chunk>();
    if (chunks_[c].compare_exchange_strong(chunk, fresh.get(), std::memory_order_acq_rel)) {
      chunk = fresh.release();
    }
  }
  chunk->slots[id & (kChunkSize - 1)].store(node, std::memory_order_release);
}

CctNode* Cct::lookup_id(uint64_t id) const {
  const uint64_t c = id >> kChunkBits;
  if (c >= kMaxChunks) return nullptr;
  Chunk* chunk = chunks_[c].load(std::memory_order_acquire);
  if (chunk == nullptr) return nullptr;
  CctNode* n = chunk->slots[id & (kChunkSize - 1)].load(std::memory_order_acquire);
  if (n == nullptr || n->state_.load(std::memory_order_acquire) == kDead) return nullptr;
  return n;
}

std::atomic<CctNode*>& Cct::link(const CctNode& parent, CctNode* pred, unsigned level) const {
  return pred == nullptr ? parent.heads_[level] : pred->next_[level];
}

CctNode* Cct::locate(const CctNode& parent, const FrameKey& key, uint64_t hash, Position* pos,
                     std::size_t* comparisons) const {
  std::size_t cmp = 0;
  CctNode* pred = nullptr;
  CctNode* curr = nullptr;
  for (int level = static_cast<int>(parent.index_levels_) - 1; level >= 0; --level) {
    const auto lvl = static_cast<unsigned>(level);
    curr = link(parent, pred, lvl).load(std::memory_order_acquire);
    while (curr != nullptr) {
      ++cmp;
      std::strong_ordering order = curr->hash_ <=> hash;
      if (order == 0) order = compare_frames(curr->key_, key);
      if (order < 0) {
        pred = curr;
        curr = link(parent, pred, lvl).load(std::memory_order_acquire);
        continue;
      }
      if (order == 0 && pos == nullptr) {
        if (comparisons != nullptr) *comparisons += cmp;
        return curr;
      }
      break;
    }
    if (pos != nullptr) {
      pos->preds[lvl] = pred;
      pos->succs[lvl] = curr;
    }
  }
  if (comparisons != nullptr) *comparisons += cmp;
  if (curr != nullptr && curr->hash_ == hash && compare_frames(curr->key_, key) == 0) return curr;
  return nullptr;
}

const CctNode* Cct::find_child(const CctNode& parent, const FrameKey& key,
                               std::size_t* comparisons) const {
  if (!parent.heads_) return nullptr;
  return locate(parent, key, hash_frame(key), nullptr, comparisons);
}

const CctNode& Cct::child(const CctNode& parent, const FrameKey& key) {
  if (!parent.heads_) throw std::invalid_argument("access leaves cannot have children");
  const uint64_t hash = hash_frame(key);
  Position pos;
  if (CctNode* found = locate(parent, key, hash, &pos, nullptr)) return *found;

  // Geometric tower height derived from the key, so concurrent inserters of
  // one key agree and no shared RNG is needed.
  const unsigned geometric = 1 + static_cast<unsigned>(std::countr_zero(mix64(hash) | (1ULL << 63)));
  const unsigned height = std::min(geometric, parent.index_levels_);

  auto* node = new CctNode(next_id_.fetch_add(1, std::memory_order_relaxed), key, hash, &parent,
                           height);
  register_node(node);

  for (;;) {
    for (unsigned i = 0; i < height; ++i) node->next_[i].store(pos.succs[i], std::memory_order_relaxed);
    CctNode* expected = pos.succs[0];
    if (link(parent, pos.preds[0], 0)
            .compare_exchange_strong(expected, node, std::memory_order_release,
                                     std::memory_order_acquire)) {
      break;
    }
    if (CctNode* found = locate(parent, key, hash, &pos, nullptr)) {
      // Another inserter won; this node stays unreachable and is freed with the tree.
      node->state_.store(kDead, std::memory_order_release);
      return *found;
    }
  }
  node->state_.store(kLive, std::memory_order_release);
  parent.child_count_.fetch_add(1, std::memory_order_acq_rel);
  node_count_.fetch_add(1, std::memory_order_acq_rel);

  for (unsigned lvl = 1; lvl < height; ++lvl) {
    for (;;) {
      CctNode* expected = pos.succs[lvl];
      node->next_[lvl].store(expected, std::memory_order_relaxed);
      if (link(parent, pos.preds[lvl], lvl)
              .compare_exchange_strong(expected, node, std::memory_order_release,
                                       std::memory_order_acquire)) {
        break;
      }
      locate(parent, key, hash, &pos, nullptr);
    }
  }
  return *node;
}

std::vector<const CctNode*> Cct::children(const CctNode& parent) const {
  std::vector<const CctNode*> out;
  if (!parent.heads_) return out;
  for (CctNode* n = parent.heads_[0].load(std::memory_order_acquire); n != nullptr;
       n = n->next_[0].load(std::memory_order_acquire)) {
    out.push_back(n);
  }
  return out;
}

PathId Cct::intern_path(std::span<const FrameKey> frames, const AccessLeaf& leaf) {
  const CctNode* cur = root_;
  for (const FrameKey& key : frames) {
    if (is_leaf(key)) throw std::invalid_argument("access leaf inside a call path");
    cur = &child(*cur, key);
  }
  return PathId{child(*cur, leaf).id()};
}

const CctNode& Cct::node(PathId id) const {
  const CctNode* n = lookup_id(id.value);
  if (n == nullptr) throw UnknownPathId(id.value);
  return *n;
}

bool Cct::contains(PathId id) const { return lookup_id(id.value) != nullptr; }

std::vector<FrameKey> Cct::resolve_path(PathId id) const {
  std::vector<FrameKey> out;
  for (const CctNode* n = &node(id); !n->is_root(); n = n->parent()) out.push_back(n->key());
  std::reverse(out.begin(), out.end());
  return out;
}

void Cct::add_samples(PathId id, uint64_t n) {
  node(id).sample_count_.fetch_add(n, std::memory_order_relaxed);
}

void Cct::add_redundancy(PathId id, uint64_t weight) {
  node(id).redundancy_weight_.fetch_add(weight, std::memory_order_relaxed);
}

}  // namespace redwatch
