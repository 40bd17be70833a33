#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sword/bytes.hpp"
#include "sword/crypto.hpp"
#include "sword/error.hpp"

namespace sword::merkle {

inline constexpr std::uint8_t kLeafPrefix = 0x00;
inline constexpr std::uint8_t kNodePrefix = 0x01;

struct MerkleRoot {
  Digest digest{};  // all zero for the empty set
  bool operator==(const MerkleRoot&) const = default;
};

inline Digest leaf_hash(ByteView record_bytes) {
  return Hasher().update_u8(kLeafPrefix).update(record_bytes).finish();
}

inline Digest node_hash(const Digest& left, const Digest& right) {
  return Hasher().update_u8(kNodePrefix).update(left).update(right).finish();
}

/**
 * Binary hash tree. Level 0 holds the leaf hashes in insertion order; each
 * following level pairs its predecessor left to right, an odd trailing node
 * being paired with a copy of itself.
 */
class MerkleTree {
 public:
  MerkleTree() = default;

  explicit MerkleTree(std::vector<Digest> leaves) {
    if (leaves.empty()) return;
    levels_.push_back(std::move(leaves));
    while (levels_.back().size() > 1) {
      const auto& below = levels_.back();
      std::vector<Digest> above;
      above.reserve((below.size() + 1) / 2);
      for (std::size_t i = 0; i < below.size(); i += 2) {
        const auto& right = i + 1 < below.size() ? below[i + 1] : below[i];
        above.push_back(node_hash(below[i], right));
      }
      levels_.push_back(std::move(above));
    }
  }

  std::size_t leaf_count() const { return levels_.empty() ? 0 : levels_.front().size(); }

  /// Number of pairing levels above the leaves.
  std::size_t depth() const { return levels_.empty() ? 0 : levels_.size() - 1; }

  const std::vector<std::vector<Digest>>& levels() const { return levels_; }

  MerkleRoot root() const { return levels_.empty() ? MerkleRoot{} : MerkleRoot{levels_.back().front()}; }

 private:
  std::vector<std::vector<Digest>> levels_;
};

inline MerkleTree build_tree(std::vector<Digest> leaf_hashes) { return MerkleTree(std::move(leaf_hashes)); }

inline MerkleRoot root(const MerkleTree& tree) { return tree.root(); }

enum class Side : std::uint8_t { Left = 0, Right = 1 };

struct ProofStep {
  Side side;  // which side the sibling sits on
  Digest digest;
  bool operator==(const ProofStep&) const = default;
};

struct InclusionProof {
  std::size_t leaf_index = 0;
  std::vector<ProofStep> siblings;
};

inline InclusionProof prove_inclusion(const MerkleTree& tree, std::size_t index) {
  if (index >= tree.leaf_count()) throw Error(ErrorCode::IndexOutOfRange, "leaf index past end of tree");
  InclusionProof proof{index, {}};
  std::size_t pos = index;
  for (std::size_t lvl = 0; lvl < tree.depth(); ++lvl) {
    const auto& layer = tree.levels()[lvl];
    if (pos % 2 == 0) {
      const auto& sib = pos + 1 < layer.size() ? layer[pos + 1] : layer[pos];
      proof.siblings.push_back({Side::Right, sib});
    } else {
      proof.siblings.push_back({Side::Left, layer[pos - 1]});
    }
    pos /= 2;
  }
  return proof;
}

inline bool verify_inclusion(const MerkleRoot& root, const Digest& leaf, const InclusionProof& proof) {
  Digest acc = leaf;
  std::size_t pos = proof.leaf_index;
  for (const auto& step : proof.siblings) {
    // The side must agree with the claimed position at this level.
    const bool expect_left = pos % 2 == 1;
    if (expect_left != (step.side == Side::Left)) return false;
    acc = step.side == Side::Left ? node_hash(step.digest, acc) : node_hash(acc, step.digest);
    pos /= 2;
  }
  if (pos != 0) return false;
  return acc == root.digest;
}

template <typename Range>
MerkleRoot root_of_records(const Range& record_bytes_list) {
  std::vector<Digest> leaves;
  leaves.reserve(std::size(record_bytes_list));
  for (const auto& rec : record_bytes_list) leaves.push_back(leaf_hash(ByteView{rec}));
  return MerkleTree(std::move(leaves)).root();
}

template <typename Range>
bool verify_root(const MerkleRoot& claimed, const Range& record_bytes_list) {
  return root_of_records(record_bytes_list) == claimed;
}

}  // namespace sword::merkle
