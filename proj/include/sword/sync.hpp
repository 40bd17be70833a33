#pragma once

#include <algorithm>
#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string_view>
#include <vector>

#include "sword/bytes.hpp"
#include "sword/error.hpp"
#include "sword/identity.hpp"
#include "sword/io.hpp"
#include "sword/merkle.hpp"
#include "sword/tal.hpp"

namespace sword::sync {

inline constexpr TimeMs kDefaultConflictWindow = 1'000;
inline constexpr std::uint16_t kMaxRetransmissions = 3;

// ---------------------------------------------------------------------------
// Wire types

/// cluster_id(32) ‖ merkle_root(32) ‖ attempt(u16) ‖ count(u32) ‖ count × 256-byte frames
struct SyncRequest {
  Digest cluster_id{};
  merkle::MerkleRoot merkle_root;
  std::uint16_t attempt = 0;
  std::vector<Frame> records;

  static constexpr std::size_t kHeaderSize = 32 + 32 + 2 + 4;
  static constexpr std::size_t wire_size(std::size_t count) { return kHeaderSize + count * kRecordSize; }

  Bytes encode() const {
    ByteWriter w(wire_size(records.size()));
    w.raw(cluster_id).raw(merkle_root.digest).u16(attempt).u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& f : records) w.raw(ByteView{f});
    return std::move(w).take();
  }

  static SyncRequest decode(ByteView b) {
    ByteReader r(b);
    SyncRequest req;
    req.cluster_id = r.digest();
    req.merkle_root.digest = r.digest();
    req.attempt = r.u16();
    const auto count = r.u32();
    if (r.remaining() != static_cast<std::size_t>(count) * kRecordSize)
      throw Error(ErrorCode::MalformedInput, "frame count does not match payload length");
    req.records.resize(count);
    for (auto& f : req.records) {
      auto v = r.raw(kRecordSize);
      std::copy(v.begin(), v.end(), f.begin());
    }
    return req;
  }
};

enum class SyncStatus : std::uint8_t { Confirmed = 0, Rejected = 1 };
enum class RejectReason : std::uint8_t { None = 0, RootMismatch = 1, MalformedFrame = 2, TooManyAttempts = 3 };

inline std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::None: return "none";
    case RejectReason::RootMismatch: return "root_mismatch";
    case RejectReason::MalformedFrame: return "malformed_frame";
    case RejectReason::TooManyAttempts: return "too_many_attempts";
  }
  return "unknown";
}

struct SyncResult {
  SyncStatus status = SyncStatus::Rejected;
  std::uint64_t watermark = 0;  // meaningful when Confirmed
  RejectReason reason = RejectReason::None;
  std::uint32_t conflicts_resolved = 0;
  std::uint32_t committed = 0;
  std::uint16_t attempt = 0;

  bool confirmed() const { return status == SyncStatus::Confirmed; }

  Bytes encode() const {
    return ByteWriter()
        .u8(static_cast<std::uint8_t>(status))
        .u64(watermark)
        .u8(static_cast<std::uint8_t>(reason))
        .u32(conflicts_resolved)
        .u32(committed)
        .u16(attempt)
        .bytes();
  }

  static SyncResult decode(ByteView b) {
    ByteReader r(b);
    SyncResult s;
    s.status = static_cast<SyncStatus>(r.u8());
    s.watermark = r.u64();
    s.reason = static_cast<RejectReason>(r.u8());
    s.conflicts_resolved = r.u32();
    s.committed = r.u32();
    s.attempt = r.u16();
    r.expect_done();
    return s;
  }
};

/// Root over exactly the unconfirmed suffix. NothingToSync when it is empty.
inline SyncRequest prepare_sync(const Tal& tal, std::uint16_t attempt = 0) {
  if (tal.active_count() == 0) throw Error(ErrorCode::NothingToSync, "no unconfirmed records");
  return SyncRequest{tal.cluster_id(), tal.commit_root(), attempt, tal.active()};
}

// ---------------------------------------------------------------------------
// Ordering and conflicts

/// Global total order: timestamp, device, cluster, then the raw frame bytes.
/// Those three fields sit contiguously at offsets 4..76, big-endian, so the
/// order is a byte comparison of that span.
inline bool order_less(const Frame& a, const Frame& b) {
  constexpr auto off = record_layout::kTimestamp;
  constexpr auto len = record_layout::kChallengeSet - record_layout::kTimestamp;
  static_assert(record_layout::kDevice == off + 8 && record_layout::kCluster == record_layout::kDevice + 32);
  if (int c = std::memcmp(a.data() + off, b.data() + off, len); c != 0) return c < 0;
  return std::memcmp(a.data(), b.data(), kRecordSize) < 0;
}

inline Frame mark_superseded(Frame f) {
  f[record_layout::kFlags] |= record_flags::kSuperseded;
  return f;
}

/// Two successful authentications of one device from different clusters
/// within the conflict window.
inline bool conflicting(const AuthRecord& a, const AuthRecord& b, TimeMs window) {
  if (!a.is_success() || !b.is_success()) return false;
  if (a.device != b.device || a.cluster_id == b.cluster_id) return false;
  const auto diff = a.timestamp_ms > b.timestamp_ms ? a.timestamp_ms - b.timestamp_ms : b.timestamp_ms - a.timestamp_ms;
  return diff < window;
}

struct ConflictPair {
  Frame authoritative;  // earlier in the total order
  Frame superseded;
};

struct MergePlan {
  std::vector<Frame> ordered;  // incoming, not yet committed, in total order
  std::vector<ConflictPair> conflicts;
};

struct Anomaly {
  enum class Kind : std::uint8_t { UnregisteredJoin, DegradedAuthentication, TallyExceedsRoster };
  Kind kind;
  Digest cluster_id{};
  DeviceId device;
  TimeMs timestamp_ms = 0;
};

inline std::string_view to_string(Anomaly::Kind k) {
  switch (k) {
    case Anomaly::Kind::UnregisteredJoin: return "unregistered_join";
    case Anomaly::Kind::DegradedAuthentication: return "degraded_authentication";
    case Anomaly::Kind::TallyExceedsRoster: return "tally_exceeds_roster";
  }
  return "unknown";
}

struct CommittedEntry {
  Frame frame;  // as received
  bool superseded = false;

  Frame committed_copy() const { return superseded ? mark_superseded(frame) : frame; }
};

/// Membership as replayed by the main network from one cluster's events.
struct ClusterAudit {
  std::set<DeviceId> active;
  std::uint32_t rejected_attempts = 0;
  bool flagged = false;
};

/**
 * Global append-only ledger. Committed records are kept in the total order;
 * a late-arriving earlier record is inserted at its ordered position, and
 * conflict losers carry the superseded annotation.
 */
class MainLedger {
 public:
  explicit MainLedger(std::shared_ptr<const CredentialBlock> block = std::make_shared<CredentialBlock>(),
                      TimeMs conflict_window = kDefaultConflictWindow)
      : block_(std::move(block)), conflict_window_(conflict_window) {}

  const CredentialBlock& block() const { return *block_; }
  TimeMs conflict_window() const { return conflict_window_; }

  const std::vector<CommittedEntry>& committed() const { return committed_; }
  std::size_t size() const { return committed_.size(); }

  std::vector<Frame> committed_frames() const {
    std::vector<Frame> out;
    out.reserve(committed_.size());
    for (const auto& e : committed_) out.push_back(e.committed_copy());
    return out;
  }

  bool contains(const Frame& f) const { return leaves_.contains(merkle::leaf_hash(f)); }

  std::uint64_t watermark(const Digest& cluster_id) const {
    auto it = watermarks_.find(cluster_id);
    return it == watermarks_.end() ? 0 : it->second;
  }
  const std::map<Digest, std::uint64_t>& cluster_watermarks() const { return watermarks_; }

  /// Ordinals of committed records for a device, in ledger order.
  std::vector<std::size_t> ordinals_for(const DeviceId& device) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < committed_.size(); ++i)
      if (AuthRecord::decode(committed_[i].frame).device == device) out.push_back(i);
    return out;
  }

  const std::vector<Anomaly>& anomalies() const { return anomalies_; }
  const std::map<Digest, ClusterAudit>& audits() const { return audits_; }
  bool flagged(const Digest& cluster_id) const {
    auto it = audits_.find(cluster_id);
    return it != audits_.end() && it->second.flagged;
  }

 private:
  friend MergePlan resolve_conflicts(const MainLedger&, const std::vector<Frame>&);
  friend std::vector<Anomaly> validate_membership_changes(const MainLedger&, const SyncRequest&);
  friend SyncResult apply_sync(MainLedger&, const SyncRequest&);

  std::shared_ptr<const CredentialBlock> block_;
  TimeMs conflict_window_;
  std::vector<CommittedEntry> committed_;
  std::set<Digest> leaves_;
  std::map<DeviceId, std::vector<Frame>> successes_;  // committed successful authentications
  std::map<Digest, std::uint64_t> watermarks_;
  std::map<Digest, ClusterAudit> audits_;
  std::vector<Anomaly> anomalies_;
};

/// Root check plus per-frame structure, cluster binding, and chain continuity within the suffix.
inline bool verify_sync(const MainLedger&, const SyncRequest& request) {
  if (!merkle::verify_root(request.merkle_root, request.records)) return false;
  for (std::size_t i = 0; i < request.records.size(); ++i) {
    const auto& f = request.records[i];
    if (structural_error(f)) return false;
    const auto rec = AuthRecord::decode(f);
    if (rec.cluster_id != request.cluster_id) return false;
    if (i > 0 && rec.prev_record_hash != merkle::leaf_hash(request.records[i - 1])) return false;
  }
  return true;
}

/**
 * Orders the not-yet-committed incoming records and lists every conflict pair
 * they take part in, against each other or against committed records. The
 * earlier record in the total order is authoritative.
 */
inline MergePlan resolve_conflicts(const MainLedger& main, const std::vector<Frame>& records) {
  MergePlan plan;
  std::set<Digest> seen;
  for (const auto& f : records) {
    auto leaf = merkle::leaf_hash(f);
    if (main.leaves_.contains(leaf) || !seen.insert(leaf).second) continue;
    plan.ordered.push_back(f);
  }
  std::sort(plan.ordered.begin(), plan.ordered.end(), order_less);

  auto add_pair = [&](const Frame& a, const Frame& b) {
    if (order_less(a, b))
      plan.conflicts.push_back({a, b});
    else
      plan.conflicts.push_back({b, a});
  };
  for (std::size_t i = 0; i < plan.ordered.size(); ++i) {
    const auto ri = AuthRecord::decode(plan.ordered[i]);
    if (!ri.is_success()) continue;
    for (std::size_t j = i + 1; j < plan.ordered.size(); ++j)
      if (conflicting(ri, AuthRecord::decode(plan.ordered[j]), main.conflict_window_))
        add_pair(plan.ordered[i], plan.ordered[j]);
    if (auto it = main.successes_.find(ri.device); it != main.successes_.end())
      for (const auto& f : it->second)
        if (conflicting(ri, AuthRecord::decode(f), main.conflict_window_)) add_pair(plan.ordered[i], f);
  }
  return plan;
}

namespace detail {

inline std::vector<Anomaly> replay_membership(ClusterAudit& audit, const CredentialBlock& block,
                                              const std::vector<Frame>& frames,
                                              const std::set<Digest>& already_committed) {
  std::vector<Anomaly> out;
  for (const auto& f : frames) {
    if (already_committed.contains(merkle::leaf_hash(f))) continue;
    const auto rec = AuthRecord::decode(f);
    if (rec.type == RecordType::Membership) {
      switch (static_cast<MembershipKind>(rec.outcome)) {
        case MembershipKind::Join:
          if (!block.find(rec.device))
            out.push_back({Anomaly::Kind::UnregisteredJoin, rec.cluster_id, rec.device, rec.timestamp_ms});
          audit.active.insert(rec.device);
          break;
        case MembershipKind::Leave:
        case MembershipKind::Departed:
          audit.active.erase(rec.device);
          break;
      }
      continue;
    }
    const auto n = audit.active.size();
    if (n < 3 && !rec.degraded())
      out.push_back({Anomaly::Kind::DegradedAuthentication, rec.cluster_id, rec.device, rec.timestamp_ms});
    if (rec.valid_count > n)
      out.push_back({Anomaly::Kind::TallyExceedsRoster, rec.cluster_id, rec.device, rec.timestamp_ms});
  }
  return out;
}

}  // namespace detail

/// Audits the membership history carried by a request without changing the ledger.
inline std::vector<Anomaly> validate_membership_changes(const MainLedger& main, const SyncRequest& request) {
  ClusterAudit audit;
  if (auto it = main.audits_.find(request.cluster_id); it != main.audits_.end()) audit = it->second;
  return detail::replay_membership(audit, *main.block_, request.records, main.leaves_);
}

/**
 * Confirm path: verify, audit, resolve, commit, advance the watermark.
 * Reject path leaves the ledger untouched; a rejection on the third
 * retransmission reports TooManyAttempts and flags the cluster.
 */
inline SyncResult apply_sync(MainLedger& main, const SyncRequest& request) {
  SyncResult result;
  result.attempt = request.attempt;
  auto& audit = main.audits_[request.cluster_id];

  if (!verify_sync(main, request)) {
    result.status = SyncStatus::Rejected;
    const bool root_ok = merkle::verify_root(request.merkle_root, request.records);
    result.reason = root_ok ? RejectReason::MalformedFrame : RejectReason::RootMismatch;
    ++audit.rejected_attempts;
    if (request.attempt >= kMaxRetransmissions) {
      result.reason = RejectReason::TooManyAttempts;
      audit.flagged = true;
    }
    result.watermark = main.watermark(request.cluster_id);
    return result;
  }

  auto anomalies = detail::replay_membership(audit, *main.block_, request.records, main.leaves_);
  main.anomalies_.insert(main.anomalies_.end(), anomalies.begin(), anomalies.end());

  auto plan = resolve_conflicts(main, request.records);
  std::set<Digest> losers;
  for (const auto& c : plan.conflicts) losers.insert(merkle::leaf_hash(c.superseded));

  if (!losers.empty())
    for (auto& e : main.committed_)
      if (!e.superseded && losers.contains(merkle::leaf_hash(e.frame))) e.superseded = true;

  std::vector<CommittedEntry> incoming;
  incoming.reserve(plan.ordered.size());
  for (const auto& f : plan.ordered) {
    incoming.push_back({f, losers.contains(merkle::leaf_hash(f))});
    main.leaves_.insert(merkle::leaf_hash(f));
    if (const auto rec = AuthRecord::decode(f); rec.is_success()) main.successes_[rec.device].push_back(f);
  }
  std::vector<CommittedEntry> merged;
  merged.reserve(main.committed_.size() + incoming.size());
  std::merge(main.committed_.begin(), main.committed_.end(), incoming.begin(), incoming.end(),
             std::back_inserter(merged),
             [](const CommittedEntry& a, const CommittedEntry& b) { return order_less(a.frame, b.frame); });
  main.committed_ = std::move(merged);

  auto& wm = main.watermarks_[request.cluster_id];
  wm += plan.ordered.size();

  result.status = SyncStatus::Confirmed;
  result.watermark = wm;
  result.conflicts_resolved = static_cast<std::uint32_t>(plan.conflicts.size());
  result.committed = static_cast<std::uint32_t>(plan.ordered.size());
  return result;
}

// ---------------------------------------------------------------------------
// Main ledger image: "SWML" ‖ committed copies as 256-byte frames.

inline constexpr std::array<char, 4> kMainLedgerMagic{'S', 'W', 'M', 'L'};

inline void write_main_ledger(const MainLedger& main, const std::filesystem::path& path) {
  io::write_atomic(path, [&](std::ostream& out) {
    out.write(kMainLedgerMagic.data(), kMainLedgerMagic.size());
    for (const auto& f : main.committed_frames()) out.write(reinterpret_cast<const char*>(f.data()), kRecordSize);
  });
}

struct MainLedgerImage {
  std::vector<Frame> frames;
  std::optional<CorruptFrame> corrupt;  // structure, ordering, or torn frame
};

inline MainLedgerImage read_main_ledger(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kMainLedgerMagic) throw Error(ErrorCode::MalformedInput, "not a main ledger image");
  MainLedgerImage img;
  while (true) {
    Frame f;
    in.read(reinterpret_cast<char*>(f.data()), kRecordSize);
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got == 0) break;
    if (got < kRecordSize) {
      img.corrupt = CorruptFrame{img.frames.size(), "torn frame"};
      break;
    }
    if (auto err = structural_error(f, /*allow_superseded=*/true)) {
      img.corrupt = CorruptFrame{img.frames.size(), *err};
      break;
    }
    if (!img.frames.empty()) {
      Frame prev = img.frames.back();
      prev[record_layout::kFlags] &= static_cast<std::uint8_t>(~record_flags::kSuperseded);
      Frame cur = f;
      cur[record_layout::kFlags] &= static_cast<std::uint8_t>(~record_flags::kSuperseded);
      if (!order_less(prev, cur)) {
        img.corrupt = CorruptFrame{img.frames.size(), "out of global order"};
        break;
      }
    }
    img.frames.push_back(f);
  }
  return img;
}

}  // namespace sword::sync
