#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "sword/authproto.hpp"
#include "sword/bytes.hpp"
#include "sword/cluster.hpp"
#include "sword/identity.hpp"

// Payload codecs for the messages nodes exchange in simulation.
namespace sword::wire {

enum class Kind : std::uint8_t {
  Beacon,
  Challenge,
  Response,
  Vote,
  Heartbeat,
  SyncRequest,
  SyncResult,
  AuthRequest,
  AuthResult,
  SessionOpen,
  Verdict,
};

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Beacon: return "beacon";
    case Kind::Challenge: return "challenge";
    case Kind::Response: return "response";
    case Kind::Vote: return "vote";
    case Kind::Heartbeat: return "heartbeat";
    case Kind::SyncRequest: return "sync_request";
    case Kind::SyncResult: return "sync_result";
    case Kind::AuthRequest: return "auth_request";
    case Kind::AuthResult: return "auth_result";
    case Kind::SessionOpen: return "session_open";
    case Kind::Verdict: return "verdict";
  }
  return "unknown";
}

/// Messages that carry one authentication session's challenge/response pairs.
inline bool is_protocol(Kind k) { return k == Kind::Challenge || k == Kind::Response; }
/// Per-session coordination around them.
inline bool is_coordination(Kind k) {
  return k == Kind::AuthRequest || k == Kind::SessionOpen || k == Kind::Verdict || k == Kind::AuthResult;
}

struct SessionKey {
  DeviceId subject;
  std::uint64_t request_id = 0;

  auto operator<=>(const SessionKey&) const = default;

  void write(ByteWriter& w) const { w.raw(subject.raw).u64(request_id); }
  static SessionKey read(ByteReader& r) {
    SessionKey k;
    k.subject.raw = r.digest();
    k.request_id = r.u64();
    return k;
  }
};

inline DeviceId read_id(ByteReader& r) { return DeviceId{r.digest()}; }

inline Signature read_signature(ByteReader& r) {
  Signature s;
  auto v = r.raw(s.bytes.size());
  std::copy(v.begin(), v.end(), s.bytes.begin());
  return s;
}

struct AuthRequest {
  SessionKey key;

  Bytes encode() const {
    ByteWriter w;
    key.write(w);
    return std::move(w).take();
  }
  static AuthRequest decode(ByteView b) {
    ByteReader r(b);
    AuthRequest m{SessionKey::read(r)};
    r.expect_done();
    return m;
  }
};

struct SessionOpen {
  SessionKey key;

  Bytes encode() const {
    ByteWriter w;
    key.write(w);
    return std::move(w).take();
  }
  static SessionOpen decode(ByteView b) {
    ByteReader r(b);
    SessionOpen m{SessionKey::read(r)};
    r.expect_done();
    return m;
  }
};

struct ChallengeMsg {
  SessionKey key;
  auth::Challenge challenge;

  Bytes encode() const {
    ByteWriter w;
    key.write(w);
    w.raw(challenge.encode());
    return std::move(w).take();
  }
  static ChallengeMsg decode(ByteView b) {
    ByteReader r(b);
    ChallengeMsg m;
    m.key = SessionKey::read(r);
    m.challenge = auth::Challenge::decode(r.raw(r.remaining()));
    return m;
  }
};

struct ResponseMsg {
  SessionKey key;
  auth::ChallengeResponse response;

  Bytes encode() const {
    ByteWriter w;
    key.write(w);
    w.raw(response.encode());
    return std::move(w).take();
  }
  static ResponseMsg decode(ByteView b) {
    ByteReader r(b);
    ResponseMsg m;
    m.key = SessionKey::read(r);
    m.response = auth::ChallengeResponse::decode(r.raw(r.remaining()));
    return m;
  }
};

/// An issuer's signed report of its own check on the subject's response.
struct Verdict {
  SessionKey key;
  DeviceId issuer;
  auth::Challenge challenge;
  std::optional<auth::ChallengeResponse> response;
  bool valid = false;
  Signature signature;

  Bytes signing_bytes() const {
    ByteWriter w;
    w.raw(to_bytes("sword-verdict"));
    key.write(w);
    w.raw(issuer.raw).raw(challenge.encode());
    w.u8(response ? 1 : 0);
    if (response) w.raw(response->encode());
    w.u8(valid ? 1 : 0);
    return std::move(w).take();
  }

  void sign_with(const KeyPair& keys) { signature = sword::sign(keys.secret_key, signing_bytes()); }

  Bytes encode() const {
    ByteWriter w;
    key.write(w);
    w.raw(issuer.raw).blob16(challenge.encode());
    w.blob16(response ? response->encode() : Bytes{});
    w.u8(valid ? 1 : 0).raw(ByteView{signature.bytes});
    return std::move(w).take();
  }
  static Verdict decode(ByteView b) {
    ByteReader r(b);
    Verdict v;
    v.key = SessionKey::read(r);
    v.issuer = read_id(r);
    v.challenge = auth::Challenge::decode(r.blob16());
    if (auto resp = r.blob16(); !resp.empty()) v.response = auth::ChallengeResponse::decode(resp);
    v.valid = r.u8() != 0;
    v.signature = read_signature(r);
    r.expect_done();
    return v;
  }
};

enum class Outcome : std::uint8_t {
  Failure = 0,
  Success = 1,
  RefusedDegraded = 2,
  RefusedUnknownSubject = 3,
  RefusedStorageFull = 4,
};

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::Failure: return "failure";
    case Outcome::Success: return "success";
    case Outcome::RefusedDegraded: return "refused_degraded";
    case Outcome::RefusedUnknownSubject: return "refused_unknown_subject";
    case Outcome::RefusedStorageFull: return "refused_storage_full";
  }
  return "unknown";
}

struct AuthResultMsg {
  SessionKey key;
  Outcome outcome = Outcome::Failure;

  Bytes encode() const {
    ByteWriter w;
    key.write(w);
    w.u8(static_cast<std::uint8_t>(outcome));
    return std::move(w).take();
  }
  static AuthResultMsg decode(ByteView b) {
    ByteReader r(b);
    AuthResultMsg m;
    m.key = SessionKey::read(r);
    m.outcome = static_cast<Outcome>(r.u8());
    r.expect_done();
    return m;
  }
};

struct Heartbeat {
  DeviceId sender;
  TimeMs sent_at = 0;

  Bytes encode() const { return ByteWriter().raw(sender.raw).u64(sent_at).bytes(); }
  static Heartbeat decode(ByteView b) {
    ByteReader r(b);
    Heartbeat h{read_id(r), r.u64()};
    r.expect_done();
    return h;
  }
};

// ---------------------------------------------------------------------------
// Cluster-management traffic shares the vote kind; the first byte says which.

enum class VoteType : std::uint8_t {
  Announce = 0,
  Proposal = 1,
  Endorse = 2,
  Commit = 3,
  Ballot = 4,
  BallotVote = 5,
};

struct VoteMsg {
  VoteType type = VoteType::Announce;
  Bytes body;

  Bytes encode() const {
    ByteWriter w(1 + body.size());
    w.u8(static_cast<std::uint8_t>(type)).raw(body);
    return std::move(w).take();
  }
  static VoteMsg decode(ByteView b) {
    ByteReader r(b);
    VoteMsg m;
    const auto t = r.u8();
    if (t > static_cast<std::uint8_t>(VoteType::BallotVote)) throw Error(ErrorCode::MalformedInput, "vote type");
    m.type = static_cast<VoteType>(t);
    auto rest = r.raw(r.remaining());
    m.body.assign(rest.begin(), rest.end());
    return m;
  }
};

struct Endorsement {
  cluster::FormationProposal proposal;
  DeviceId signer;
  Signature signature;

  Bytes encode() const {
    return ByteWriter().blob16(proposal.encode()).raw(signer.raw).raw(ByteView{signature.bytes}).bytes();
  }
  static Endorsement decode(ByteView b) {
    ByteReader r(b);
    Endorsement e;
    e.proposal = cluster::FormationProposal::decode(r.blob16());
    e.signer = read_id(r);
    e.signature = read_signature(r);
    r.expect_done();
    return e;
  }
};

/// Formation outcome: the proposal plus every founder's endorsement.
struct Commit {
  cluster::FormationProposal proposal;
  std::vector<std::pair<DeviceId, Signature>> signatures;

  Bytes encode() const {
    ByteWriter w;
    w.blob16(proposal.encode()).u32(static_cast<std::uint32_t>(signatures.size()));
    for (const auto& [id, sig] : signatures) w.raw(id.raw).raw(ByteView{sig.bytes});
    return std::move(w).take();
  }
  static Commit decode(ByteView b) {
    ByteReader r(b);
    Commit c;
    c.proposal = cluster::FormationProposal::decode(r.blob16());
    const auto n = r.u32();
    if (n > r.remaining() / (32 + 64)) throw Error(ErrorCode::MalformedInput, "signature count");
    for (std::uint32_t i = 0; i < n; ++i) {
      auto id = read_id(r);
      c.signatures.emplace_back(id, read_signature(r));
    }
    r.expect_done();
    return c;
  }
};

struct Ballot {
  cluster::JoinBallot ballot;

  Bytes encode() const {
    ByteWriter w;
    w.raw(ballot.cluster_id).raw(ballot.applicant.raw).u64(ballot.opened_at).u64(ballot.deadline);
    w.raw(ballot.proposed_snapshot).u32(static_cast<std::uint32_t>(ballot.eligible.size()));
    for (const auto& id : ballot.eligible) w.raw(id.raw);
    return std::move(w).take();
  }
  static Ballot decode(ByteView b) {
    ByteReader r(b);
    Ballot m;
    m.ballot.cluster_id = r.digest();
    m.ballot.applicant = read_id(r);
    m.ballot.opened_at = r.u64();
    m.ballot.deadline = r.u64();
    m.ballot.proposed_snapshot = r.digest();
    const auto n = r.u32();
    if (n > r.remaining() / 32) throw Error(ErrorCode::MalformedInput, "eligible count");
    for (std::uint32_t i = 0; i < n; ++i) m.ballot.eligible.insert(read_id(r));
    r.expect_done();
    return m;
  }
};

struct BallotVote {
  DeviceId applicant;
  TimeMs opened_at = 0;
  cluster::Vote vote;

  Bytes encode() const {
    return ByteWriter()
        .raw(applicant.raw)
        .u64(opened_at)
        .raw(vote.voter.raw)
        .u8(vote.approve ? 1 : 0)
        .u64(vote.cast_at)
        .raw(ByteView{vote.signature.bytes})
        .bytes();
  }
  static BallotVote decode(ByteView b) {
    ByteReader r(b);
    BallotVote m;
    m.applicant = read_id(r);
    m.opened_at = r.u64();
    m.vote.voter = read_id(r);
    m.vote.approve = r.u8() != 0;
    m.vote.cast_at = r.u64();
    m.vote.signature = read_signature(r);
    r.expect_done();
    return m;
  }
};

}  // namespace sword::wire
