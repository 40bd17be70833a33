#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "sword/bytes.hpp"
#include "sword/crypto.hpp"
#include "sword/error.hpp"
#include "sword/identity.hpp"
#include "sword/wire.hpp"

namespace sword::sim {

using wire::Kind;

inline const DeviceId kMainNetwork = [] {
  DeviceId d;
  d.raw.fill(0xff);
  return d;
}();

struct Envelope {
  DeviceId src;
  DeviceId dst;
  Kind kind = Kind::Beacon;
  Bytes payload;
  TimeMs send_at = 0;
  TimeMs deliver_at = 0;
  std::uint64_t seq = 0;
  bool injected = false;  // originated by an adversary
  bool tampered = false;  // modified in transit
};

struct LinkModel {
  TimeMs latency_min_ms = 5;
  TimeMs latency_max_ms = 20;
  double loss_probability = 0.0;
};

struct TraceEntry {
  TimeMs time_ms = 0;
  std::uint64_t seq = 0;
  DeviceId src;
  DeviceId dst;
  Kind kind = Kind::Beacon;
  std::size_t size_bytes = 0;
  bool dropped = false;
};

struct NetStats {
  std::uint64_t sent = 0;
  std::uint64_t injected = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped_loss = 0;
  std::uint64_t dropped_partition = 0;
  std::uint64_t consumed = 0;
  std::uint64_t tampered = 0;
  std::map<Kind, std::uint64_t> sent_by_kind;

  std::uint64_t settled() const { return delivered + dropped_loss + dropped_partition + consumed; }
};

class Simulator;

/// Sees envelopes in transit. Returning false consumes the envelope.
class Adversary {
 public:
  virtual ~Adversary() = default;
  virtual std::string_view name() const = 0;
  virtual void attach(Simulator&) {}
  virtual bool intercept(Envelope&, Simulator&) { return true; }
};

class Simulator {
 public:
  using Handler = std::function<void(const Envelope&)>;
  using Action = std::function<void()>;

  Simulator(LinkModel link, Rng rng) : link_(link), rng_(std::move(rng)) {}

  TimeMs now() const { return now_; }
  const LinkModel& link() const { return link_; }
  const NetStats& stats() const { return stats_; }
  const std::vector<TraceEntry>& trace() const { return trace_; }
  std::size_t pending() const { return queue_.size(); }
  std::size_t pending_envelopes() const {
    return static_cast<std::size_t>(std::count_if(queue_.begin(), queue_.end(), [](const auto& kv) {
      return std::holds_alternative<Envelope>(kv.second);
    }));
  }

  void attach(const DeviceId& id, Handler handler, std::string label = {}) {
    handlers_[id] = std::move(handler);
    if (!label.empty()) labels_[id] = std::move(label);
  }
  void set_label(const DeviceId& id, std::string label) { labels_[id] = std::move(label); }

  std::string label(const DeviceId& id) const {
    if (auto it = labels_.find(id); it != labels_.end()) return it->second;
    if (id == kMainNetwork) return "main";
    return id.short_hex();
  }

  std::uint64_t send(const DeviceId& src, const DeviceId& dst, Kind kind, Bytes payload) {
    return transmit(Envelope{src, dst, kind, std::move(payload), 0, 0, 0, false, false});
  }

  /// Adversary-originated traffic. Not offered to interceptors.
  std::uint64_t inject(const DeviceId& src, const DeviceId& dst, Kind kind, Bytes payload) {
    return transmit(Envelope{src, dst, kind, std::move(payload), 0, 0, 0, true, false});
  }

  void at(TimeMs when, Action action) {
    queue_.emplace(Key{std::max(when, now_), next_seq_++}, std::move(action));
  }
  void after(TimeMs delay, Action action) { at(now_ + delay, std::move(action)); }

  /// Fires every event due at or before t, in (time, seq) order.
  void run_until(TimeMs t) {
    if (t < now_) throw Error(ErrorCode::ClockRegression, "run_until before current time");
    while (!queue_.empty() && queue_.begin()->first.time <= t) {
      auto node = queue_.extract(queue_.begin());
      now_ = node.key().time;
      std::visit([&](auto& ev) { fire(ev); }, node.mapped());
    }
    now_ = t;
  }

  // -------------------------------------------------------------------------
  // Partitions

  /// Nodes in different groups cannot reach each other; unlisted nodes
  /// (including the main network) form one further group.
  void partition(const std::vector<std::set<DeviceId>>& groups) {
    std::map<DeviceId, std::size_t> assign;
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (const auto& id : groups[g])
        if (!assign.emplace(id, g).second) throw Error(ErrorCode::OverlappingGroups, label(id) + " in two groups");
    group_of_ = std::move(assign);
  }

  void heal() {
    group_of_.clear();
    for (auto& fn : heal_listeners_) fn();
  }

  bool partitioned() const { return !group_of_.empty(); }
  void on_heal(Action fn) { heal_listeners_.push_back(std::move(fn)); }

  /// Cuts one node off from everyone, independent of the partition groups.
  void set_isolated(const DeviceId& id, bool isolated) {
    if (isolated)
      isolated_.insert(id);
    else
      isolated_.erase(id);
  }

  bool reachable(const DeviceId& a, const DeviceId& b) const {
    if (a == b) return true;
    if (isolated_.contains(a) || isolated_.contains(b)) return false;
    return group(a) == group(b);
  }

  // -------------------------------------------------------------------------
  // Adversaries

  void inject_adversary(std::shared_ptr<Adversary> adv, std::set<Kind> targets = {}) {
    adv->attach(*this);
    adversaries_.push_back({std::move(adv), std::move(targets)});
  }

  /// time_ms,seq,src,dst,kind,size_bytes,dropped_flag
  std::string trace_csv() const {
    std::ostringstream out;
    out << "time_ms,seq,src,dst,kind,size_bytes,dropped_flag\n";
    for (const auto& e : trace_)
      out << e.time_ms << ',' << e.seq << ',' << label(e.src) << ',' << label(e.dst) << ',' << wire::to_string(e.kind)
          << ',' << e.size_bytes << ',' << (e.dropped ? 1 : 0) << '\n';
    return out.str();
  }

 private:
  struct Key {
    TimeMs time;
    std::uint64_t seq;
    auto operator<=>(const Key&) const = default;
  };
  using Event = std::variant<Envelope, Action>;

  std::ptrdiff_t group(const DeviceId& id) const {
    auto it = group_of_.find(id);
    return it == group_of_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
  }

  std::uint64_t transmit(Envelope env) {
    env.send_at = now_;
    env.seq = next_seq_++;
    env.injected ? ++stats_.injected : ++stats_.sent;
    ++stats_.sent_by_kind[env.kind];

    // Never leaves the sender's side of a partition.
    if (!reachable(env.src, env.dst)) {
      ++stats_.dropped_partition;
      return env.seq;
    }
    if (!env.injected) {
      for (auto& [adv, kinds] : adversaries_) {
        if (!kinds.empty() && !kinds.contains(env.kind)) continue;
        if (!adv->intercept(env, *this)) {
          ++stats_.consumed;
          record(env, now_, true);
          return env.seq;
        }
      }
      if (env.tampered) ++stats_.tampered;
    }
    // Both draws happen for every message so the stream does not depend on outcomes.
    const auto latency = rng_.uniform(link_.latency_min_ms, link_.latency_max_ms);
    const bool lost = rng_.bernoulli(link_.loss_probability);
    if (lost) {
      ++stats_.dropped_loss;
      record(env, now_, true);
      return env.seq;
    }
    env.deliver_at = now_ + latency;
    const auto seq = env.seq;
    queue_.emplace(Key{env.deliver_at, seq}, std::move(env));
    return seq;
  }

  void fire(Envelope& env) {
    ++stats_.delivered;
    record(env, now_, false);
    if (auto it = handlers_.find(env.dst); it != handlers_.end()) it->second(env);
  }

  void fire(Action& action) { action(); }

  void record(const Envelope& env, TimeMs t, bool dropped) {
    trace_.push_back({t, env.seq, env.src, env.dst, env.kind, env.payload.size(), dropped});
  }

  LinkModel link_;
  Rng rng_;
  TimeMs now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::map<Key, Event> queue_;
  std::map<DeviceId, Handler> handlers_;
  std::map<DeviceId, std::string> labels_;
  std::map<DeviceId, std::size_t> group_of_;
  std::set<DeviceId> isolated_;
  std::vector<Action> heal_listeners_;
  std::vector<std::pair<std::shared_ptr<Adversary>, std::set<Kind>>> adversaries_;
  std::vector<TraceEntry> trace_;
  NetStats stats_;
};

// ---------------------------------------------------------------------------
// Adversaries

/// Flips one byte inside the frames of sync requests in transit.
class TamperAdversary : public Adversary {
 public:
  TamperAdversary(Rng rng, double probability = 1.0, std::uint16_t max_attempt = 0)
      : rng_(std::move(rng)), probability_(probability), max_attempt_(max_attempt) {}

  std::string_view name() const override { return "tamper"; }

  bool intercept(Envelope& env, Simulator&) override {
    if (env.kind != Kind::SyncRequest || env.payload.size() <= kFramesOffset) return true;
    const auto attempt = static_cast<std::uint16_t>(env.payload[64] << 8 | env.payload[65]);
    if (attempt > max_attempt_ || !rng_.bernoulli(probability_)) return true;
    const auto pos = rng_.uniform(kFramesOffset, env.payload.size() - 1);
    env.payload[pos] ^= static_cast<std::uint8_t>(rng_.uniform(1, 255));
    env.tampered = true;
    ++tampered_;
    return true;
  }

  std::uint64_t tampered() const { return tampered_; }

 private:
  static constexpr std::size_t kFramesOffset = 32 + 32 + 2 + 4;
  Rng rng_;
  double probability_;
  std::uint16_t max_attempt_;
  std::uint64_t tampered_ = 0;
};

/**
 * Base for adversaries that try to authenticate as someone else. It learns
 * subjects and their coordinators from observed auth requests, periodically
 * opens a session in a victim's name, swallows the challenges of that session,
 * and answers them with whatever the subclass forges.
 */
class SessionAttacker : public Adversary {
 public:
  SessionAttacker(Rng rng, TimeMs start_ms, TimeMs interval_ms, TimeMs stop_ms)
      : rng_(std::move(rng)), start_(start_ms), interval_(interval_ms), stop_(stop_ms) {}

  void attach(Simulator& sim) override { schedule(sim, start_); }

  bool intercept(Envelope& env, Simulator& sim) override {
    switch (env.kind) {
      case Kind::AuthRequest:
        if (auto m = try_decode<wire::AuthRequest>(env)) coordinator_of_[m->key.subject] = env.dst;
        return true;
      case Kind::Response:
        if (auto m = try_decode<wire::ResponseMsg>(env)) observe_response(*m, env, sim);
        return true;
      case Kind::Challenge: {
        auto m = try_decode<wire::ChallengeMsg>(env);
        if (!m || !own_.contains(m->key)) return true;
        if (auto forged = forge(*m)) {
          sim.inject(m->challenge.subject, env.src, Kind::Response, forged->encode());
          ++forged_;
        }
        return false;
      }
      default:
        return true;
    }
  }

  const std::set<wire::SessionKey>& sessions() const { return own_; }
  std::uint64_t launched() const { return own_.size(); }
  std::uint64_t forged() const { return forged_; }

 protected:
  virtual std::optional<wire::ResponseMsg> forge(const wire::ChallengeMsg& challenge) = 0;
  virtual void observe_response(const wire::ResponseMsg&, const Envelope&, Simulator&) {}

  /// Picks the identity to claim; defaults to an observed subject.
  virtual std::optional<std::pair<DeviceId, DeviceId>> pick_target() {
    if (coordinator_of_.empty()) return std::nullopt;
    auto it = coordinator_of_.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng_.uniform(0, coordinator_of_.size() - 1)));
    return *it;
  }

  template <typename M>
  static std::optional<M> try_decode(const Envelope& env) {
    try {
      return M::decode(env.payload);
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  Rng rng_;
  std::map<DeviceId, DeviceId> coordinator_of_;  // subject -> coordinator

 private:
  void schedule(Simulator& sim, TimeMs when) {
    if (when >= stop_) return;
    sim.at(when, [this, &sim] {
      launch(sim);
      schedule(sim, sim.now() + interval_);
    });
  }

  void launch(Simulator& sim) {
    auto target = pick_target();
    if (!target) return;
    wire::SessionKey key{target->first, rng_.next_u64()};
    own_.insert(key);
    sim.inject(target->first, target->second, Kind::AuthRequest, wire::AuthRequest{key}.encode());
  }

  TimeMs start_;
  TimeMs interval_;
  TimeMs stop_;
  std::set<wire::SessionKey> own_;
  std::uint64_t forged_ = 0;
};

/// Captures responses; re-sends each once to its issuer and reuses their
/// signatures to answer challenges in sessions it opens.
class ReplayAdversary : public SessionAttacker {
 public:
  using SessionAttacker::SessionAttacker;

  std::string_view name() const override { return "replay"; }
  std::uint64_t replayed() const { return replayed_; }

 protected:
  void observe_response(const wire::ResponseMsg& m, const Envelope& env, Simulator& sim) override {
    captured_[m.key.subject].push_back(m.response);
    sim.after(kReplayDelay, [this, &sim, src = env.src, dst = env.dst, payload = env.payload] {
      sim.inject(src, dst, Kind::Response, payload);
      ++replayed_;
    });
  }

  std::optional<wire::ResponseMsg> forge(const wire::ChallengeMsg& c) override {
    auto it = captured_.find(c.challenge.subject);
    if (it == captured_.end() || it->second.empty()) return std::nullopt;
    const auto& old = it->second[rng_.uniform(0, it->second.size() - 1)];
    return wire::ResponseMsg{c.key, {c.challenge.id, old.signature}};
  }

 private:
  static constexpr TimeMs kReplayDelay = 1'000;
  std::map<DeviceId, std::vector<auth::ChallengeResponse>> captured_;
  std::uint64_t replayed_ = 0;
};

/// Claims a victim's identity and signs challenges with its own key.
class ImpersonationAdversary : public SessionAttacker {
 public:
  ImpersonationAdversary(Rng rng, TimeMs start_ms, TimeMs interval_ms, TimeMs stop_ms)
      : SessionAttacker(std::move(rng), start_ms, interval_ms, stop_ms), keys_(KeyPair::generate(rng_)) {}

  std::string_view name() const override { return "impersonation"; }

 protected:
  std::optional<wire::ResponseMsg> forge(const wire::ChallengeMsg& c) override {
    return wire::ResponseMsg{c.key, {c.challenge.id, sign(keys_.secret_key, c.challenge.signing_bytes())}};
  }

 private:
  KeyPair keys_;
};

/**
 * Operates under an unregistered identity: beacons and announces itself to
 * the given nodes during discovery, and in the sessions it opens answers with
 * random signatures, alternately claiming its own identity and a victim's.
 */
class SpoofAdversary : public SessionAttacker {
 public:
  SpoofAdversary(Rng rng, TimeMs start_ms, TimeMs interval_ms, TimeMs stop_ms, std::vector<DeviceId> beacon_targets,
                 TimeMs beacon_until)
      : SessionAttacker(std::move(rng), start_ms, interval_ms, stop_ms),
        fake_(DeviceId::from_did("did:sword:spoof:" + to_hex(rng_.digest()))),
        keys_(KeyPair::generate(rng_)),
        beacon_targets_(std::move(beacon_targets)),
        beacon_until_(beacon_until) {}

  std::string_view name() const override { return "spoof"; }
  const DeviceId& fake_id() const { return fake_; }
  std::uint64_t beacons_sent() const { return beacons_; }

  void attach(Simulator& sim) override {
    SessionAttacker::attach(sim);
    sim.set_label(fake_, "spoof");
    beacon_round(sim, 0);
  }

  bool intercept(Envelope& env, Simulator& sim) override {
    if (env.kind == Kind::Beacon && !block_hash_) {
      try {
        block_hash_ = cluster::Beacon::decode(env.payload).block_state_hash;
      } catch (const Error&) {
      }
    }
    return SessionAttacker::intercept(env, sim);
  }

 protected:
  std::optional<std::pair<DeviceId, DeviceId>> pick_target() override {
    auto t = SessionAttacker::pick_target();
    if (t && (flip_ = !flip_)) t->first = fake_;
    return t;
  }

  std::optional<wire::ResponseMsg> forge(const wire::ChallengeMsg& c) override {
    Signature junk;
    rng_.fill(junk.bytes);
    return wire::ResponseMsg{c.key, {c.challenge.id, junk}};
  }

 private:
  void beacon_round(Simulator& sim, TimeMs when) {
    if (when > beacon_until_) return;
    sim.at(when, [this, &sim] {
      cluster::Beacon b{fake_, block_hash_.value_or(kZeroDigest), 1, sim.now()};
      cluster::CandidateAnnouncement a{fake_, sim.now(), beacon_targets_, {}};
      a.signature = sign(keys_.secret_key, a.signing_bytes());
      for (const auto& t : beacon_targets_) {
        sim.inject(fake_, t, Kind::Beacon, b.encode());
        sim.inject(fake_, t, Kind::Vote, wire::VoteMsg{wire::VoteType::Announce, a.encode()}.encode());
        ++beacons_;
      }
      beacon_round(sim, sim.now() + cluster::kBeaconInterval);
    });
  }

  DeviceId fake_;
  KeyPair keys_;
  std::vector<DeviceId> beacon_targets_;
  TimeMs beacon_until_;
  std::optional<Digest> block_hash_;
  bool flip_ = false;
  std::uint64_t beacons_ = 0;
};

}  // namespace sword::sim
