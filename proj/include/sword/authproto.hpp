#pragma once

#include <map>
#include <set>
#include <vector>

#include "sword/bytes.hpp"
#include "sword/cluster.hpp"
#include "sword/crypto.hpp"
#include "sword/error.hpp"
#include "sword/identity.hpp"
#include "sword/tal.hpp"

namespace sword::auth {

inline constexpr TimeMs kChallengeLifetime = 30'000;
inline constexpr TimeMs kOtpWindow = 30'000;
// One OTP window either side of the receiver's clock.
inline constexpr TimeMs kSkewTolerance = kOtpWindow;
inline constexpr TimeMs kSessionTimeout = 2 * kChallengeLifetime;

using Nonce = Digest;

inline std::uint64_t otp_window(TimeMs t) { return t / kOtpWindow; }

inline Mac8 compute_otp(const Digest& mfa_secret, std::uint64_t window) {
  return mac8(mfa_secret, ByteWriter().u64(window).bytes());
}

struct Challenge {
  Nonce id{};
  DeviceId issuer;
  DeviceId subject;
  Mac8 otp{};
  TimeMs issued_at = 0;
  TimeMs expires_at = 0;

  /// challenge_id ‖ issuer ‖ subject ‖ issued_at(u64 BE) ‖ otp(8)
  Bytes signing_bytes() const {
    return ByteWriter(32 + 32 + 32 + 8 + 8).raw(id).raw(issuer.raw).raw(subject.raw).u64(issued_at).raw(otp).bytes();
  }

  Bytes encode() const { return ByteWriter().raw(signing_bytes()).u64(expires_at).bytes(); }

  static Challenge decode(ByteView b) {
    ByteReader r(b);
    Challenge c;
    c.id = r.digest();
    c.issuer.raw = r.digest();
    c.subject.raw = r.digest();
    c.issued_at = r.u64();
    auto otp = r.raw(c.otp.size());
    std::copy(otp.begin(), otp.end(), c.otp.begin());
    c.expires_at = r.u64();
    r.expect_done();
    return c;
  }

  bool operator==(const Challenge&) const = default;
};

struct ChallengeResponse {
  Nonce challenge_id{};
  Signature signature;

  Bytes encode() const { return ByteWriter().raw(challenge_id).raw(ByteView{signature.bytes}).bytes(); }

  static ChallengeResponse decode(ByteView b) {
    ByteReader r(b);
    ChallengeResponse out;
    out.challenge_id = r.digest();
    auto sig = r.raw(out.signature.bytes.size());
    std::copy(sig.begin(), sig.end(), out.signature.bytes.begin());
    r.expect_done();
    return out;
  }
};

inline bool challenge_expired(const Challenge& c, TimeMs now) { return now > c.expires_at + kSkewTolerance; }

/// Subject side: checks freshness and the OTP binding, then signs.
inline ChallengeResponse respond(const KeyPair& subject_keys, const Digest& mfa_secret, const Challenge& challenge,
                                 TimeMs now) {
  if (challenge_expired(challenge, now)) throw Error(ErrorCode::ExpiredChallenge, "challenge past lifetime");
  const auto w = otp_window(now);
  bool otp_ok = false;
  for (auto cand : {w, w + 1, w == 0 ? w : w - 1})
    if (compute_otp(mfa_secret, cand) == challenge.otp) otp_ok = true;
  if (!otp_ok) throw Error(ErrorCode::OtpMismatch, "challenge OTP does not match local secret");
  return ChallengeResponse{challenge.id, sign(subject_keys.secret_key, challenge.signing_bytes())};
}

enum class ResponseCheck : std::uint8_t { Valid, BadSignature, Expired, UnknownChallenge };

/**
 * Issuer-side challenge state for one node. Nonces come from the node's own
 * stream and are never reissued; every challenge is consumed by the first
 * response that names it, whatever the outcome.
 */
class Issuer {
 public:
  Issuer(DeviceId self, Rng rng) : self_(self), rng_(std::move(rng)) {}

  const DeviceId& id() const { return self_; }

  Challenge issue(const Credential& subject, TimeMs now) {
    Nonce id;
    do {
      id = rng_.digest();
    } while (!used_.insert(id).second);
    Challenge c{id, self_, subject.did, compute_otp(subject.mfa_secret, otp_window(now)), now, now + kChallengeLifetime};
    outstanding_.emplace(id, c);
    return c;
  }

  ResponseCheck verify_response(const PublicKey& subject_key, const ChallengeResponse& response, TimeMs now) {
    auto it = outstanding_.find(response.challenge_id);
    if (it == outstanding_.end()) return ResponseCheck::UnknownChallenge;
    const Challenge c = it->second;
    outstanding_.erase(it);
    if (challenge_expired(c, now)) return ResponseCheck::Expired;
    return verify(subject_key, c.signing_bytes(), response.signature) ? ResponseCheck::Valid
                                                                      : ResponseCheck::BadSignature;
  }

  const Challenge* outstanding(const Nonce& id) const {
    auto it = outstanding_.find(id);
    return it == outstanding_.end() ? nullptr : &it->second;
  }

  /// Drops unanswered challenges whose lifetime has passed. Their nonces stay used.
  void expire(TimeMs now) {
    std::erase_if(outstanding_, [&](const auto& kv) { return challenge_expired(kv.second, now); });
  }

  std::size_t outstanding_count() const { return outstanding_.size(); }

 private:
  DeviceId self_;
  Rng rng_;
  std::map<Nonce, Challenge> outstanding_;
  std::set<Nonce> used_;
};

enum class AuthResult : std::uint8_t { Pending, Success, Failure };

/// Aggregate held by the coordinating member for one authentication attempt.
struct AuthSession {
  DeviceId subject;
  Digest cluster_id{};
  std::vector<DeviceId> participants;  // active roster at opening
  std::map<DeviceId, Challenge> challenges;
  std::map<DeviceId, ChallengeResponse> responses;
  std::set<DeviceId> reported;
  std::size_t valid_count = 0;
  std::size_t threshold = 0;
  TimeMs opened_at = 0;
  TimeMs decided_at = 0;
  AuthResult result = AuthResult::Pending;

  TimeMs deadline() const { return opened_at + kSessionTimeout; }
  bool is_participant(const DeviceId& id) const {
    return std::binary_search(participants.begin(), participants.end(), id);
  }
  bool all_reported() const { return reported.size() == participants.size(); }

  /// hash(challenge ids concatenated in issuer order)
  Digest challenge_set_hash() const {
    Hasher h;
    for (const auto& [issuer, c] : challenges) h.update(c.id);
    return h.finish();
  }
};

/// One challenge slot per active member; threshold fixed from the roster now.
inline AuthSession open_session(const cluster::ClusterRoster& roster, const CredentialBlock& block,
                                const DeviceId& subject, TimeMs now) {
  const auto t = cluster::current_threshold(roster);
  if (!validate_credential(block, subject, now)) throw Error(ErrorCode::UnknownSubject, subject.short_hex());
  AuthSession s;
  s.subject = subject;
  s.cluster_id = roster.cluster_id();
  s.participants = roster.active_members();
  s.threshold = t;
  s.opened_at = now;
  return s;
}

/// Opens a session and has every participant's issuer produce its challenge.
inline AuthSession open_session(const cluster::ClusterRoster& roster, const CredentialBlock& block,
                                const DeviceId& subject, TimeMs now, std::map<DeviceId, Issuer>& issuers) {
  auto s = open_session(roster, block, subject, now);
  const auto* cred = block.find(subject);
  for (const auto& p : s.participants) s.challenges.emplace(p, issuers.at(p).issue(*cred, now));
  return s;
}

/**
 * Records one participant's verification outcome. Reports from non-participants
 * (including members that departed before the session opened), duplicates,
 * and reports arriving after the decision are discarded.
 */
inline bool record_verdict(AuthSession& s, const DeviceId& issuer, const Challenge& challenge,
                           const std::optional<ChallengeResponse>& response, bool valid) {
  if (s.result != AuthResult::Pending) return false;
  if (!s.is_participant(issuer) || s.reported.contains(issuer)) return false;
  if (challenge.issuer != issuer || challenge.subject != s.subject) return false;
  if (auto it = s.challenges.find(issuer); it != s.challenges.end() && it->second.id != challenge.id) return false;
  s.reported.insert(issuer);
  s.challenges.emplace(issuer, challenge);
  if (response) s.responses.emplace(issuer, *response);
  if (valid && response) ++s.valid_count;
  return true;
}

/// Threshold decision with exactly one TAL record per session.
inline AuthResult decide(AuthSession& s, Tal& tal, TimeMs now) {
  if (s.result != AuthResult::Pending) return s.result;
  const bool success = s.valid_count >= s.threshold;
  s.result = success ? AuthResult::Success : AuthResult::Failure;
  s.decided_at = now;
  tal.append_auth_record(s.subject, now, success, static_cast<std::uint16_t>(s.valid_count),
                         static_cast<std::uint16_t>(s.threshold), s.challenge_set_hash(), s.participants);
  return s.result;
}

}  // namespace sword::auth
