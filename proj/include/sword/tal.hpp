#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sword/bytes.hpp"
#include "sword/crypto.hpp"
#include "sword/error.hpp"
#include "sword/identity.hpp"
#include "sword/io.hpp"
#include "sword/merkle.hpp"

namespace sword {

inline constexpr std::size_t kRecordSize = 256;
inline constexpr std::uint8_t kRecordVersion = 1;

using Frame = std::array<std::uint8_t, kRecordSize>;

enum class RecordType : std::uint8_t { Authentication = 0, Membership = 1 };

enum class MembershipKind : std::uint8_t { Join = 0, Leave = 1, Departed = 2 };

namespace record_flags {
inline constexpr std::uint8_t kDegraded = 0x01;
// Set only on the main ledger's committed copy of a conflict loser.
inline constexpr std::uint8_t kSuperseded = 0x02;
}  // namespace record_flags

namespace record_layout {
inline constexpr std::size_t kVersion = 0;
inline constexpr std::size_t kType = 1;
inline constexpr std::size_t kOutcome = 2;
inline constexpr std::size_t kFlags = 3;
inline constexpr std::size_t kTimestamp = 4;
inline constexpr std::size_t kDevice = 12;
inline constexpr std::size_t kCluster = 44;
inline constexpr std::size_t kChallengeSet = 76;
inline constexpr std::size_t kSnapshot = 108;
inline constexpr std::size_t kPrev = 140;
inline constexpr std::size_t kValidCount = 172;
inline constexpr std::size_t kThreshold = 174;
inline constexpr std::size_t kPadding = 176;
inline constexpr std::size_t kPaddingSize = kRecordSize - kPadding;
static_assert(kPaddingSize == 80);
}  // namespace record_layout

/// Hash of the roster's DeviceIds in ascending byte order.
inline Digest roster_snapshot_hash(std::span<const DeviceId> roster) {
  std::vector<DeviceId> sorted(roster.begin(), roster.end());
  std::sort(sorted.begin(), sorted.end());
  Hasher h;
  for (const auto& id : sorted) h.update(id.raw);
  return h.finish();
}

/// One TAL entry, serialized as a fixed 256-byte big-endian frame.
struct AuthRecord {
  std::uint8_t version = kRecordVersion;
  RecordType type = RecordType::Authentication;
  std::uint8_t outcome = 0;
  std::uint8_t flags = 0;
  TimeMs timestamp_ms = 0;
  DeviceId device;
  Digest cluster_id{};
  Digest challenge_set_hash{};
  Digest membership_snapshot_hash{};
  Digest prev_record_hash{};
  std::uint16_t valid_count = 0;
  std::uint16_t threshold = 0;

  bool is_auth() const { return type == RecordType::Authentication; }
  bool is_success() const { return is_auth() && outcome == 1; }
  bool degraded() const { return flags & record_flags::kDegraded; }
  bool superseded() const { return flags & record_flags::kSuperseded; }

  Frame encode() const {
    ByteWriter w(kRecordSize);
    w.u8(version).u8(static_cast<std::uint8_t>(type)).u8(outcome).u8(flags).u64(timestamp_ms);
    w.raw(device.raw).raw(cluster_id).raw(challenge_set_hash).raw(membership_snapshot_hash).raw(prev_record_hash);
    w.u16(valid_count).u16(threshold).zeros(record_layout::kPaddingSize);
    Frame f;
    std::copy(w.bytes().begin(), w.bytes().end(), f.begin());
    return f;
  }

  /// Field decode only; see structural_error() for validation.
  static AuthRecord decode(const Frame& f) {
    ByteReader r{ByteView{f}};
    AuthRecord rec;
    rec.version = r.u8();
    rec.type = static_cast<RecordType>(r.u8());
    rec.outcome = r.u8();
    rec.flags = r.u8();
    rec.timestamp_ms = r.u64();
    rec.device.raw = r.digest();
    rec.cluster_id = r.digest();
    rec.challenge_set_hash = r.digest();
    rec.membership_snapshot_hash = r.digest();
    rec.prev_record_hash = r.digest();
    rec.valid_count = r.u16();
    rec.threshold = r.u16();
    return rec;
  }

  bool operator==(const AuthRecord&) const = default;
};

/**
 * Returns a description of the first structural constraint the frame breaks,
 * or nullopt when the frame is well formed. Chain linkage is checked
 * separately since it depends on the neighbouring frame.
 */
inline std::optional<std::string> structural_error(const Frame& f, bool allow_superseded = false) {
  namespace L = record_layout;
  if (f[L::kVersion] != kRecordVersion) return "unsupported record version";
  const std::uint8_t allowed_flags = record_flags::kDegraded | (allow_superseded ? record_flags::kSuperseded : 0);
  if (f[L::kFlags] & ~allowed_flags) return "unknown flag bits";
  for (std::size_t i = L::kPadding; i < kRecordSize; ++i)
    if (f[i] != 0) return "non-zero padding";

  const auto rec = AuthRecord::decode(f);
  switch (static_cast<std::uint8_t>(rec.type)) {
    case static_cast<std::uint8_t>(RecordType::Authentication):
      if (rec.outcome > 1) return "invalid authentication outcome";
      if (rec.outcome == 1 && rec.valid_count < rec.threshold) return "success below threshold";
      break;
    case static_cast<std::uint8_t>(RecordType::Membership):
      if (rec.outcome > 2) return "invalid membership kind";
      if (rec.challenge_set_hash != kZeroDigest) return "membership event carries a challenge hash";
      if (rec.valid_count != 0 || rec.threshold != 0) return "membership event carries a tally";
      break;
    default:
      return "unknown record type";
  }
  return std::nullopt;
}

struct CorruptFrame {
  std::size_t frame_index = 0;
  std::string reason;
};

/**
 * Temporary Authentication Ledger: an append-only, hash-chained log of
 * 256-byte frames owned by one node. Frames below the confirmed watermark
 * move to the archive on prune; the archive is kept for persistence.
 */
class Tal {
 public:
  Tal() = default;
  explicit Tal(const Digest& cluster_id) : cluster_id_(cluster_id) {}

  const Digest& cluster_id() const { return cluster_id_; }

  /// Absolute ordinal of the first active record.
  std::size_t confirmed_watermark() const { return archive_.size(); }
  std::size_t total_count() const { return archive_.size() + active_.size(); }
  std::size_t active_count() const { return active_.size(); }
  std::size_t active_bytes() const { return active_.size() * kRecordSize; }

  const std::vector<Frame>& active() const { return active_; }
  const std::vector<Frame>& archive() const { return archive_; }

  /// leaf_hash of the most recent record, or zero for an empty ledger.
  const Digest& chain_tail() const { return tail_; }

  /// leaf_hash of the last archived record; the first active frame chains to it.
  Digest chain_base() const { return archive_.empty() ? kZeroDigest : merkle::leaf_hash(archive_.back()); }

  std::optional<TimeMs> last_timestamp() const {
    if (total_count() == 0) return std::nullopt;
    return last_ts_;
  }

  AuthRecord record(std::size_t active_index) const { return AuthRecord::decode(active_.at(active_index)); }

  const Frame& append_auth_record(const DeviceId& device, TimeMs ts, bool success, std::uint16_t valid_count,
                                  std::uint16_t threshold, const Digest& challenge_set_hash,
                                  std::span<const DeviceId> roster_snapshot, bool degraded = false) {
    AuthRecord rec;
    rec.type = RecordType::Authentication;
    rec.outcome = success ? 1 : 0;
    rec.flags = degraded ? record_flags::kDegraded : 0;
    rec.timestamp_ms = ts;
    rec.device = device;
    rec.challenge_set_hash = challenge_set_hash;
    rec.membership_snapshot_hash = roster_snapshot_hash(roster_snapshot);
    rec.valid_count = valid_count;
    rec.threshold = threshold;
    return append(rec);
  }

  const Frame& append_membership_event(const DeviceId& device, TimeMs ts, MembershipKind kind,
                                       std::span<const DeviceId> roster_snapshot, bool degraded = false) {
    AuthRecord rec;
    rec.type = RecordType::Membership;
    rec.outcome = static_cast<std::uint8_t>(kind);
    rec.flags = degraded ? record_flags::kDegraded : 0;
    rec.timestamp_ms = ts;
    rec.device = device;
    rec.membership_snapshot_hash = roster_snapshot_hash(roster_snapshot);
    return append(rec);
  }

  /// Merkle root over the active records, in order.
  merkle::MerkleRoot commit_root() const { return merkle::root_of_records(active_); }

  merkle::MerkleTree commit_tree() const {
    std::vector<Digest> leaves;
    leaves.reserve(active_.size());
    for (const auto& f : active_) leaves.push_back(merkle::leaf_hash(f));
    return merkle::MerkleTree(std::move(leaves));
  }

  /// Moves every record below the absolute ordinal `watermark` to the archive.
  void prune_confirmed(std::size_t watermark) {
    if (watermark > total_count()) throw Error(ErrorCode::WatermarkBeyondEnd, "watermark past last record");
    if (watermark <= archive_.size()) return;
    const auto n = watermark - archive_.size();
    archive_.insert(archive_.end(), active_.begin(), active_.begin() + static_cast<std::ptrdiff_t>(n));
    active_.erase(active_.begin(), active_.begin() + static_cast<std::ptrdiff_t>(n));
  }

  /// Index (absolute) of the first frame whose structure or chain link is broken.
  std::optional<CorruptFrame> verify_chain() const {
    Digest prev = kZeroDigest;
    std::size_t index = 0;
    auto check = [&](const Frame& f) -> std::optional<CorruptFrame> {
      if (auto err = structural_error(f)) return CorruptFrame{index, *err};
      if (AuthRecord::decode(f).prev_record_hash != prev) return CorruptFrame{index, "chain mismatch"};
      prev = merkle::leaf_hash(f);
      ++index;
      return std::nullopt;
    };
    for (const auto& f : archive_)
      if (auto e = check(f)) return e;
    for (const auto& f : active_)
      if (auto e = check(f)) return e;
    return std::nullopt;
  }

  /// Rebuilds a ledger from persisted frames. Frames are trusted as given.
  static Tal restore(const Digest& cluster_id, std::vector<Frame> frames, std::size_t watermark) {
    Tal tal(cluster_id);
    watermark = std::min(watermark, frames.size());
    for (const auto& f : frames) {
      tal.last_ts_ = AuthRecord::decode(f).timestamp_ms;
      tal.tail_ = merkle::leaf_hash(f);
    }
    tal.archive_.assign(frames.begin(), frames.begin() + static_cast<std::ptrdiff_t>(watermark));
    tal.active_.assign(frames.begin() + static_cast<std::ptrdiff_t>(watermark), frames.end());
    return tal;
  }

  bool operator==(const Tal&) const = default;

 private:
  const Frame& append(AuthRecord& rec) {
    if (total_count() > 0 && rec.timestamp_ms < last_ts_)
      throw Error(ErrorCode::ClockRegression, "timestamp precedes last record");
    rec.cluster_id = cluster_id_;
    rec.prev_record_hash = tail_;
    active_.push_back(rec.encode());
    tail_ = merkle::leaf_hash(active_.back());
    last_ts_ = rec.timestamp_ms;
    return active_.back();
  }

  Digest cluster_id_{};
  std::vector<Frame> archive_;
  std::vector<Frame> active_;
  Digest tail_{};
  TimeMs last_ts_ = 0;
};

// ---------------------------------------------------------------------------
// On-disk image: "SWTL" ‖ cluster_id(32) ‖ 256-byte frames (archive then
// active). The confirmed watermark lives in a sidecar file "<path>.wm".

inline constexpr std::array<char, 4> kTalMagic{'S', 'W', 'T', 'L'};
inline constexpr std::size_t kTalHeaderSize = 4 + 32;

inline void persist(const Tal& tal, std::ostream& out) {
  out.write(kTalMagic.data(), kTalMagic.size());
  out.write(reinterpret_cast<const char*>(tal.cluster_id().data()), 32);
  for (const auto& f : tal.archive()) out.write(reinterpret_cast<const char*>(f.data()), kRecordSize);
  for (const auto& f : tal.active()) out.write(reinterpret_cast<const char*>(f.data()), kRecordSize);
}

struct TalLoadResult {
  Tal tal;  // every frame before the first corrupt one
  std::optional<CorruptFrame> corrupt;
};

inline TalLoadResult load(std::istream& in, std::size_t watermark = 0) {
  std::array<char, kTalHeaderSize> header;
  in.read(header.data(), header.size());
  if (in.gcount() != static_cast<std::streamsize>(header.size()) ||
      !std::equal(kTalMagic.begin(), kTalMagic.end(), header.begin()))
    throw Error(ErrorCode::MalformedInput, "not a TAL image");
  Digest cluster_id;
  std::copy(header.begin() + 4, header.end(), cluster_id.begin());

  std::vector<Frame> frames;
  std::optional<CorruptFrame> corrupt;
  Digest prev = kZeroDigest;
  while (true) {
    Frame f;
    in.read(reinterpret_cast<char*>(f.data()), kRecordSize);
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got == 0) break;
    if (got < kRecordSize) {
      corrupt = CorruptFrame{frames.size(), "torn frame"};
      break;
    }
    if (auto err = structural_error(f)) {
      corrupt = CorruptFrame{frames.size(), *err};
      break;
    }
    if (AuthRecord::decode(f).prev_record_hash != prev) {
      corrupt = CorruptFrame{frames.size(), "chain mismatch"};
      break;
    }
    prev = merkle::leaf_hash(f);
    frames.push_back(f);
  }
  return {Tal::restore(cluster_id, std::move(frames), watermark), corrupt};
}

inline std::filesystem::path watermark_path(const std::filesystem::path& p) {
  auto w = p;
  w += ".wm";
  return w;
}

inline void persist_file(const Tal& tal, const std::filesystem::path& path) {
  io::write_atomic(path, [&](std::ostream& out) { persist(tal, out); });
  io::write_atomic(watermark_path(path), [&](std::ostream& out) {
    const Bytes wm = ByteWriter().u64(tal.confirmed_watermark()).bytes();
    out.write(reinterpret_cast<const char*>(wm.data()), static_cast<std::streamsize>(wm.size()));
  });
}

inline TalLoadResult load_file(const std::filesystem::path& path) {
  std::size_t watermark = 0;
  if (std::ifstream wm(watermark_path(path), std::ios::binary); wm) {
    std::array<std::uint8_t, 8> buf{};
    wm.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (wm.gcount() == 8) watermark = static_cast<std::size_t>(ByteReader(ByteView{buf}).u64());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MalformedInput, "cannot open " + path.string());
  return load(in, watermark);
}

/// Throwing variant: any corrupt frame raises CorruptRecord.
inline Tal load_strict(std::istream& in, std::size_t watermark = 0) {
  auto r = load(in, watermark);
  if (r.corrupt)
    throw Error(ErrorCode::CorruptRecord,
                "frame " + std::to_string(r.corrupt->frame_index) + ": " + r.corrupt->reason);
  return std::move(r.tal);
}

}  // namespace sword
