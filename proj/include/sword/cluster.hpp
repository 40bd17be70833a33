#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "sword/bytes.hpp"
#include "sword/crypto.hpp"
#include "sword/error.hpp"
#include "sword/identity.hpp"
#include "sword/tal.hpp"

namespace sword::cluster {

inline constexpr TimeMs kBeaconInterval = 10'000;
inline constexpr TimeMs kBeaconFreshness = 2 * kBeaconInterval;
inline constexpr TimeMs kHeartbeatInterval = 30'000;
inline constexpr std::uint64_t kMissedHeartbeatLimit = 3;
inline constexpr TimeMs kDepartureAfter = kMissedHeartbeatLimit * kHeartbeatInterval;
inline constexpr TimeMs kJoinBallotTimeout = 60'000;
inline constexpr std::size_t kMinClusterSize = 3;

/// ⌈0.6 n⌉ in exact integer arithmetic.
constexpr std::size_t threshold_for(std::size_t n) { return (3 * n + 4) / 5; }

/// ⌈2n/3⌉ approvals needed to admit a new member.
constexpr std::size_t join_quorum(std::size_t n) { return (2 * n + 2) / 3; }

// ---------------------------------------------------------------------------
// Discovery

struct Beacon {
  DeviceId sender;
  Digest block_state_hash{};
  std::uint64_t block_version = 0;
  TimeMs sent_at = 0;

  Bytes encode() const {
    return ByteWriter().raw(sender.raw).raw(block_state_hash).u64(block_version).u64(sent_at).bytes();
  }
  static Beacon decode(ByteView b) {
    ByteReader r(b);
    Beacon out;
    out.sender.raw = r.digest();
    out.block_state_hash = r.digest();
    out.block_version = r.u64();
    out.sent_at = r.u64();
    r.expect_done();
    return out;
  }
};

/// A node's signed list of peers it currently considers valid candidates.
struct CandidateAnnouncement {
  DeviceId sender;
  TimeMs sent_at = 0;
  std::vector<DeviceId> candidates;
  Signature signature;

  Bytes signing_bytes() const {
    ByteWriter w;
    w.raw(to_bytes("sword-announce")).raw(sender.raw).u64(sent_at).u32(static_cast<std::uint32_t>(candidates.size()));
    for (const auto& c : candidates) w.raw(c.raw);
    return std::move(w).take();
  }

  Bytes encode() const {
    ByteWriter w;
    w.raw(signing_bytes()).raw(ByteView{signature.bytes});
    return std::move(w).take();
  }

  static CandidateAnnouncement decode(ByteView b) {
    ByteReader r(b);
    r.raw(14);
    CandidateAnnouncement a;
    a.sender.raw = r.digest();
    a.sent_at = r.u64();
    const auto n = r.u32();
    if (n > r.remaining() / 32) throw Error(ErrorCode::MalformedInput, "candidate count");
    for (std::uint32_t i = 0; i < n; ++i) a.candidates.push_back(DeviceId{r.digest()});
    auto sig = r.raw(a.signature.bytes.size());
    std::copy(sig.begin(), sig.end(), a.signature.bytes.begin());
    r.expect_done();
    return a;
  }
};

/// Per-node discovery state. Single owner; fed one event at a time.
class NodeState {
 public:
  NodeState(DeviceId self, std::shared_ptr<const CredentialBlock> block) : self_(self), block_(std::move(block)) {}

  const DeviceId& self() const { return self_; }
  const CredentialBlock& block() const { return *block_; }
  void set_block(std::shared_ptr<const CredentialBlock> block) { block_ = std::move(block); }

  const std::map<DeviceId, TimeMs>& candidates() const { return candidates_; }
  const std::map<DeviceId, CandidateAnnouncement>& peer_views() const { return peer_views_; }

  /// Candidates whose last valid beacon is within the freshness window.
  std::vector<DeviceId> fresh_candidates(TimeMs now) const {
    std::vector<DeviceId> out;
    for (const auto& [id, seen] : candidates_)
      if (now - std::min(now, seen) <= kBeaconFreshness) out.push_back(id);
    return out;
  }

  bool is_fresh_candidate(const DeviceId& id, TimeMs now) const {
    auto it = candidates_.find(id);
    return it != candidates_.end() && now - std::min(now, it->second) <= kBeaconFreshness;
  }

  Beacon emit_beacon(TimeMs now) const { return Beacon{self_, block_->state_hash(), block_->version(), now}; }

  /// Adds the sender to the candidate set iff its credential validates against
  /// the local block and the advertised block hash matches ours.
  bool handle_beacon(const Beacon& beacon, TimeMs now) {
    if (beacon.sender == self_) return false;
    if (!validate_credential(*block_, beacon.sender, now)) return false;
    if (beacon.block_state_hash != block_->state_hash()) return false;
    candidates_[beacon.sender] = now;
    return true;
  }

  CandidateAnnouncement announce(const KeyPair& keys, TimeMs now) const {
    CandidateAnnouncement a{self_, now, fresh_candidates(now), {}};
    a.signature = sign(keys.secret_key, a.signing_bytes());
    return a;
  }

  /// Accepts a peer's announcement if it is from a current candidate and signed
  /// under that candidate's registered key.
  bool handle_announcement(const CandidateAnnouncement& a, TimeMs now) {
    if (!is_fresh_candidate(a.sender, now)) return false;
    const auto* cred = block_->find(a.sender);
    if (!cred || !verify(cred->public_key, a.signing_bytes(), a.signature)) return false;
    peer_views_[a.sender] = a;
    return true;
  }

  /**
   * Largest set (greedy, deterministic) containing self in which every pair
   * has seen each other's valid beacon within the freshness window.
   */
  std::vector<DeviceId> mutual_set(TimeMs now) const {
    std::set<DeviceId> set{self_};
    for (const auto& c : fresh_candidates(now)) {
      auto it = peer_views_.find(c);
      if (it != peer_views_.end() && now - std::min(now, it->second.sent_at) <= kBeaconFreshness) set.insert(c);
    }
    auto view_of = [&](const DeviceId& id) -> std::set<DeviceId> {
      if (id == self_) {
        auto f = fresh_candidates(now);
        return {f.begin(), f.end()};
      }
      const auto& c = peer_views_.at(id).candidates;
      return {c.begin(), c.end()};
    };
    while (true) {
      std::optional<DeviceId> worst;
      std::size_t worst_missing = 0;
      for (const auto& x : set) {
        if (x == self_) continue;
        const auto vx = view_of(x);
        std::size_t missing = 0;
        for (const auto& y : set)
          if (y != x && !vx.contains(y)) ++missing;
        if (missing > worst_missing) {
          worst_missing = missing;
          worst = x;
        }
      }
      if (!worst) break;
      set.erase(*worst);
    }
    return {set.begin(), set.end()};
  }

 private:
  DeviceId self_;
  std::shared_ptr<const CredentialBlock> block_;
  std::map<DeviceId, TimeMs> candidates_;
  std::map<DeviceId, CandidateAnnouncement> peer_views_;
};

// ---------------------------------------------------------------------------
// Roster and certificates

enum class MemberStatus : std::uint8_t { Active, Departed };
enum class ClusterState : std::uint8_t { Active, Degraded };

class ClusterRoster {
 public:
  ClusterRoster() = default;
  ClusterRoster(const Digest& cluster_id, TimeMs formed_at, const std::vector<DeviceId>& founders)
      : cluster_id_(cluster_id), formed_at_(formed_at) {
    for (const auto& f : founders) members_[f] = MemberStatus::Active;
  }

  const Digest& cluster_id() const { return cluster_id_; }
  TimeMs formed_at() const { return formed_at_; }
  const std::map<DeviceId, MemberStatus>& members() const { return members_; }

  std::vector<DeviceId> active_members() const {
    std::vector<DeviceId> out;
    for (const auto& [id, st] : members_)
      if (st == MemberStatus::Active) out.push_back(id);
    return out;
  }

  std::size_t active_count() const {
    return static_cast<std::size_t>(
        std::count_if(members_.begin(), members_.end(), [](const auto& kv) { return kv.second == MemberStatus::Active; }));
  }

  bool is_active(const DeviceId& id) const {
    auto it = members_.find(id);
    return it != members_.end() && it->second == MemberStatus::Active;
  }

  std::optional<TimeMs> departed_at(const DeviceId& id) const {
    auto it = departed_at_.find(id);
    if (it == departed_at_.end()) return std::nullopt;
    return it->second;
  }

  ClusterState state() const { return active_count() < kMinClusterSize ? ClusterState::Degraded : ClusterState::Active; }

  Digest snapshot_hash() const {
    auto active = active_members();
    return roster_snapshot_hash(active);
  }

  void admit(const DeviceId& id) {
    if (is_active(id)) throw Error(ErrorCode::AlreadyMember, id.short_hex());
    members_[id] = MemberStatus::Active;
    departed_at_.erase(id);
  }

  void mark_departed(const DeviceId& id, TimeMs at) {
    if (!is_active(id)) throw Error(ErrorCode::NotMember, id.short_hex());
    members_[id] = MemberStatus::Departed;
    departed_at_[id] = at;
  }

 private:
  Digest cluster_id_{};
  TimeMs formed_at_ = 0;
  std::map<DeviceId, MemberStatus> members_;
  std::map<DeviceId, TimeMs> departed_at_;
};

/// t = ⌈0.6 n⌉ over active members. DegradedMode below three members.
inline std::size_t current_threshold(const ClusterRoster& roster) {
  const auto n = roster.active_count();
  if (n < kMinClusterSize) throw Error(ErrorCode::DegradedMode, "fewer than three active members; online verification required");
  return threshold_for(n);
}

inline Bytes certificate_signing_bytes(const Digest& roster_snapshot_hash, TimeMs timestamp) {
  return ByteWriter().raw(roster_snapshot_hash).u64(timestamp).bytes();
}

struct MembershipCertificate {
  Digest roster_snapshot_hash{};
  TimeMs timestamp = 0;
  std::vector<std::pair<DeviceId, Signature>> signatures;

  Bytes signing_bytes() const { return certificate_signing_bytes(roster_snapshot_hash, timestamp); }
};

/// Every signature must come from a registered device and verify over the certificate bytes.
inline bool verify_certificate(const MembershipCertificate& cert, const CredentialBlock& block) {
  if (cert.signatures.empty()) return false;
  const auto msg = cert.signing_bytes();
  std::set<DeviceId> seen;
  for (const auto& [id, sig] : cert.signatures) {
    const auto* cred = block.find(id);
    if (!cred || !seen.insert(id).second) return false;
    if (!verify(cred->public_key, msg, sig)) return false;
  }
  return true;
}

inline Digest derive_cluster_id(std::span<const DeviceId> founders, TimeMs formed_at) {
  std::vector<DeviceId> sorted(founders.begin(), founders.end());
  std::sort(sorted.begin(), sorted.end());
  Hasher h;
  for (const auto& id : sorted) h.update(id.raw);
  h.update(ByteWriter().u64(formed_at).bytes());
  return h.finish();
}

// ---------------------------------------------------------------------------
// Formation

struct FormationProposal {
  std::vector<DeviceId> founders;  // sorted
  TimeMs formed_at = 0;
  Digest cluster_id{};
  Digest snapshot_hash{};

  Bytes signing_bytes() const { return certificate_signing_bytes(snapshot_hash, formed_at); }

  Bytes encode() const {
    ByteWriter w;
    w.u64(formed_at).u32(static_cast<std::uint32_t>(founders.size()));
    for (const auto& f : founders) w.raw(f.raw);
    return std::move(w).take();
  }

  static FormationProposal decode(ByteView b) {
    ByteReader r(b);
    const auto at = r.u64();
    const auto n = r.u32();
    if (n > r.remaining() / 32) throw Error(ErrorCode::MalformedInput, "founder count");
    std::vector<DeviceId> founders;
    for (std::uint32_t i = 0; i < n; ++i) founders.push_back(DeviceId{r.digest()});
    r.expect_done();
    return make(std::move(founders), at);
  }

  static FormationProposal make(std::vector<DeviceId> founders, TimeMs at) {
    std::sort(founders.begin(), founders.end());
    FormationProposal p;
    p.founders = std::move(founders);
    p.formed_at = at;
    p.cluster_id = derive_cluster_id(p.founders, at);
    p.snapshot_hash = roster_snapshot_hash(p.founders);
    return p;
  }
};

/// Proposes a roster of the mutually reachable validated set. InsufficientPeers below three.
inline FormationProposal plan_formation(const NodeState& node, TimeMs now) {
  auto set = node.mutual_set(now);
  if (set.size() < kMinClusterSize)
    throw Error(ErrorCode::InsufficientPeers, std::to_string(set.size()) + " mutually reachable nodes");
  return FormationProposal::make(std::move(set), now);
}

/// A founder signs the proposal only if it lists itself and every other
/// founder is one of its own fresh candidates.
inline std::optional<Signature> endorse_formation(const NodeState& founder, const FormationProposal& proposal,
                                                  const KeyPair& keys, TimeMs now) {
  if (!std::binary_search(proposal.founders.begin(), proposal.founders.end(), founder.self())) return std::nullopt;
  for (const auto& f : proposal.founders)
    if (f != founder.self() && !founder.is_fresh_candidate(f, now)) return std::nullopt;
  return sign(keys.secret_key, proposal.signing_bytes());
}

struct Formation {
  ClusterRoster roster;
  MembershipCertificate certificate;
};

/// Assembles the roster once every founder has endorsed the proposal.
inline Formation finalize_formation(const FormationProposal& proposal,
                                    const std::map<DeviceId, Signature>& endorsements, const CredentialBlock& block) {
  MembershipCertificate cert{proposal.snapshot_hash, proposal.formed_at, {}};
  for (const auto& f : proposal.founders) {
    auto it = endorsements.find(f);
    if (it == endorsements.end()) throw Error(ErrorCode::InsufficientPeers, "missing endorsement from " + f.short_hex());
    cert.signatures.emplace_back(f, it->second);
  }
  if (!verify_certificate(cert, block)) throw Error(ErrorCode::InsufficientPeers, "invalid founder endorsement");
  return {ClusterRoster(proposal.cluster_id, proposal.formed_at, proposal.founders), std::move(cert)};
}

/// Logs one join event per founder, in DeviceId order.
inline void record_formation(Tal& tal, const ClusterRoster& roster) {
  const auto founders = roster.active_members();
  for (const auto& f : founders) tal.append_membership_event(f, roster.formed_at(), MembershipKind::Join, founders);
}

using Endorser = std::function<std::optional<Signature>(const DeviceId&, const FormationProposal&)>;

/// Single-process formation: plan, collect endorsements, finalize.
inline Formation try_form_cluster(const NodeState& node, TimeMs now, const Endorser& endorse) {
  auto proposal = plan_formation(node, now);
  std::map<DeviceId, Signature> sigs;
  for (const auto& f : proposal.founders)
    if (auto s = endorse(f, proposal)) sigs.emplace(f, *s);
  return finalize_formation(proposal, sigs, node.block());
}

// ---------------------------------------------------------------------------
// Join voting

struct Vote {
  DeviceId voter;
  bool approve = false;
  TimeMs cast_at = 0;
  Signature signature;
};

struct JoinBallot {
  Digest cluster_id{};
  DeviceId applicant;
  TimeMs opened_at = 0;
  TimeMs deadline = 0;
  std::set<DeviceId> eligible;  // active members at opening
  Digest proposed_snapshot{};   // roster snapshot after admission
  std::map<DeviceId, Vote> votes;

  /// Approvals sign exactly the join certificate bytes; rejections append 0x00.
  Bytes vote_bytes(bool approve) const {
    ByteWriter w;
    w.raw(certificate_signing_bytes(proposed_snapshot, opened_at));
    if (!approve) w.u8(0);
    return std::move(w).take();
  }

  std::size_t approvals() const {
    return static_cast<std::size_t>(
        std::count_if(votes.begin(), votes.end(), [](const auto& kv) { return kv.second.approve; }));
  }
};

inline JoinBallot propose_join(const ClusterRoster& roster, const DeviceId& applicant, TimeMs now) {
  if (roster.is_active(applicant)) throw Error(ErrorCode::AlreadyMember, applicant.short_hex());
  JoinBallot b;
  b.cluster_id = roster.cluster_id();
  b.applicant = applicant;
  b.opened_at = now;
  b.deadline = now + kJoinBallotTimeout;
  auto active = roster.active_members();
  b.eligible = {active.begin(), active.end()};
  active.push_back(applicant);
  b.proposed_snapshot = roster_snapshot_hash(active);
  return b;
}

/// The voter approves only if the applicant validates against its own block.
inline Vote make_vote(const DeviceId& voter, const KeyPair& keys, const CredentialBlock& voter_block,
                      const JoinBallot& ballot, bool intent, TimeMs now) {
  const bool approve = intent && validate_credential(voter_block, ballot.applicant, now);
  return Vote{voter, approve, now, sign(keys.secret_key, ballot.vote_bytes(approve))};
}

/// Records a vote. Returns false when the vote is discarded (late, duplicate,
/// or badly signed). Votes from outside the eligible set raise UnknownVoter.
inline bool cast_vote(JoinBallot& ballot, const CredentialBlock& block, const Vote& vote) {
  if (!ballot.eligible.contains(vote.voter)) throw Error(ErrorCode::UnknownVoter, vote.voter.short_hex());
  if (vote.cast_at > ballot.deadline) return false;
  if (ballot.votes.contains(vote.voter)) return false;
  const auto* cred = block.find(vote.voter);
  if (!cred || !verify(cred->public_key, ballot.vote_bytes(vote.approve), vote.signature)) return false;
  ballot.votes.emplace(vote.voter, vote);
  return true;
}

inline bool tally_join(const JoinBallot& ballot, const CredentialBlock& block, TimeMs now) {
  if (!validate_credential(block, ballot.applicant, now)) return false;
  return ballot.approvals() >= join_quorum(ballot.eligible.size());
}

/// Applies an admitted ballot: roster gains the member, a join event is logged,
/// and the approving votes form the membership certificate.
inline MembershipCertificate admit_member(ClusterRoster& roster, Tal& tal, const JoinBallot& ballot, TimeMs now) {
  roster.admit(ballot.applicant);
  const auto active = roster.active_members();
  tal.append_membership_event(ballot.applicant, now, MembershipKind::Join, active,
                              roster.state() == ClusterState::Degraded);
  MembershipCertificate cert{ballot.proposed_snapshot, ballot.opened_at, {}};
  for (const auto& [id, v] : ballot.votes)
    if (v.approve) cert.signatures.emplace_back(id, v.signature);
  return cert;
}

// ---------------------------------------------------------------------------
// Heartbeats

class HeartbeatTracker {
 public:
  void process_heartbeat(const DeviceId& member, TimeMs now) {
    auto& last = last_[member];
    last = std::max(last, now);
  }

  void forget(const DeviceId& member) { last_.erase(member); }

  std::optional<TimeMs> last_heartbeat(const DeviceId& member) const {
    auto it = last_.find(member);
    if (it == last_.end()) return std::nullopt;
    return it->second;
  }

  /// ⌊(now − last) / interval⌋ capped at the departure limit.
  std::uint64_t missed_count(const DeviceId& member, TimeMs now) const {
    auto last = last_heartbeat(member);
    if (!last) return 0;
    const auto elapsed = now - std::min(now, *last);
    return std::min(kMissedHeartbeatLimit, elapsed / kHeartbeatInterval);
  }

 private:
  std::map<DeviceId, TimeMs> last_;
};

/// Marks members departed once three heartbeat intervals have passed without
/// one, logging each departure. Earlier TAL records are left untouched.
inline std::vector<DeviceId> sweep_departures(ClusterRoster& roster, HeartbeatTracker& tracker, Tal& tal, TimeMs now) {
  std::vector<DeviceId> departed;
  for (const auto& id : roster.active_members()) {
    auto last = tracker.last_heartbeat(id);
    if (!last) continue;
    if (now - std::min(now, *last) >= kDepartureAfter) departed.push_back(id);
  }
  for (const auto& id : departed) {
    roster.mark_departed(id, now);
    tracker.forget(id);
    const auto active = roster.active_members();
    tal.append_membership_event(id, now, MembershipKind::Departed, active, roster.state() == ClusterState::Degraded);
  }
  return departed;
}

}  // namespace sword::cluster
