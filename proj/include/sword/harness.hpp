#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sword/authproto.hpp"
#include "sword/cluster.hpp"
#include "sword/crypto.hpp"
#include "sword/error.hpp"
#include "sword/identity.hpp"
#include "sword/io.hpp"
#include "sword/simnet.hpp"
#include "sword/sync.hpp"
#include "sword/tal.hpp"
#include "sword/wire.hpp"

namespace sword::harness {

using json = nlohmann::json;
using wire::SessionKey;

// ---------------------------------------------------------------------------
// Scenario

struct PartitionWindow {
  TimeMs start_ms = 0;
  TimeMs end_ms = 0;
  std::vector<std::vector<std::size_t>> groups;  // node indices
  std::vector<std::size_t> isolate_clusters;     // each listed cluster (members and clients) becomes its own group
};

/// A node cut off from everyone for a while.
struct ChurnWindow {
  std::size_t node = 0;
  TimeMs from_ms = 0;
  TimeMs until_ms = 0;
};

struct AdversarySpec {
  bool replay = false;
  bool spoof = false;
  bool impersonation = false;
  bool tamper = false;
  double tamper_probability = 1.0;
  std::uint16_t tamper_max_attempt = 0;
  TimeMs attack_interval_ms = 5'000;

  bool any() const { return replay || spoof || impersonation || tamper; }
};

struct WorkloadMix {
  double online = 0.4;
  double offline = 0.4;
  double sync = 0.2;
};

enum class Arrival : std::uint8_t { Poisson, Periodic };

struct Scenario {
  std::string name = "scenario";
  std::uint64_t seed = 1;
  std::size_t node_count = 5;
  std::vector<std::size_t> cluster_layout{5};
  double request_rate = 100;  // per cluster, per simulated minute
  std::vector<PartitionWindow> partition_schedule;
  AdversarySpec adversary;
  TimeMs duration_ms = 300'000;
  TimeMs conflict_window_ms = sync::kDefaultConflictWindow;
  WorkloadMix workload_mix;
  sim::LinkModel link;
  Arrival arrival = Arrival::Poisson;
  TimeMs warmup_ms = 15'000;
  TimeMs sync_interval_ms = 60'000;
  std::size_t max_active_records = 1'000;
  TimeMs credential_validity_ms = 30ull * 24 * 3600 * 1000;
  std::vector<ChurnWindow> churn;
  bool allow_rejoin = true;
  bool allow_degraded = false;
  double roaming_probability = 0.0;

  std::size_t member_count() const { return std::accumulate(cluster_layout.begin(), cluster_layout.end(), std::size_t{0}); }
  TimeMs workload_end() const { return warmup_ms + duration_ms; }
};

namespace detail {

[[noreturn]] inline void invalid(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::InvalidScenario, field + ": " + why);
}

template <typename T>
T field(const json& j, const char* key, const T& fallback, const std::string& prefix = "") {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->template get<T>();
  } catch (const json::exception&) {
    invalid(prefix + key, "wrong type");
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& prefix = "") {
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* x) { return k == x; }))
      invalid(prefix + k, "unknown field");
  }
}

inline bool is_nonneg_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline std::uint64_t nonneg(const json& j, const char* key, std::uint64_t fallback, const std::string& prefix = "") {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!is_nonneg_integer(*it)) invalid(prefix + key, "must be a non-negative integer");
  return it->get<std::uint64_t>();
}

}  // namespace detail

inline void validate(const Scenario& s) {
  using detail::invalid;
  if (s.cluster_layout.empty()) invalid("cluster_layout", "at least one cluster required");
  for (std::size_t i = 0; i < s.cluster_layout.size(); ++i) {
    const auto n = s.cluster_layout[i];
    if (n == 0) invalid("cluster_layout[" + std::to_string(i) + "]", "cluster size must be positive");
    if (n < cluster::kMinClusterSize && !s.allow_degraded)
      invalid("cluster_layout[" + std::to_string(i) + "]", "cluster size below 3 requires allow_degraded");
  }
  if (s.node_count < s.member_count()) invalid("node_count", "smaller than the sum of cluster_layout");
  if (!(s.request_rate >= 0) || !std::isfinite(s.request_rate)) invalid("request_rate", "must be non-negative");
  if (s.duration_ms == 0) invalid("duration_ms", "must be positive");
  const auto& m = s.workload_mix;
  for (auto [name, v] : {std::pair{"online", m.online}, {"offline", m.offline}, {"sync", m.sync}})
    if (!(v >= 0) || v > 1) invalid(std::string("workload_mix.") + name, "fraction outside [0, 1]");
  if (std::abs(m.online + m.offline + m.sync - 1.0) > 1e-9) invalid("workload_mix", "fractions must sum to 1");
  if (s.link.latency_min_ms > s.link.latency_max_ms) invalid("link.latency_min_ms", "exceeds latency_max_ms");
  if (!(s.link.loss_probability >= 0) || s.link.loss_probability >= 1)
    invalid("link.loss_probability", "must lie in [0, 1)");
  if (!(s.adversary.tamper_probability >= 0) || s.adversary.tamper_probability > 1)
    invalid("adversary.tamper_probability", "must lie in [0, 1]");
  if (s.adversary.attack_interval_ms == 0) invalid("adversary.attack_interval_ms", "must be positive");
  if (!(s.roaming_probability >= 0) || s.roaming_probability > 1)
    invalid("roaming_probability", "must lie in [0, 1]");
  if (s.sync_interval_ms == 0) invalid("sync_interval_ms", "must be positive");
  if (s.max_active_records < 16) invalid("max_active_records", "must be at least 16");
  if (s.credential_validity_ms == 0) invalid("credential_validity_ms", "must be positive");

  std::vector<std::pair<TimeMs, TimeMs>> spans;
  for (std::size_t w = 0; w < s.partition_schedule.size(); ++w) {
    const auto& p = s.partition_schedule[w];
    const auto where = "partition_schedule[" + std::to_string(w) + "]";
    if (p.start_ms >= p.end_ms) invalid(where + ".end_ms", "must be after start_ms");
    if (p.groups.empty() && p.isolate_clusters.empty()) invalid(where, "needs groups or isolate_clusters");
    std::set<std::size_t> seen;
    for (const auto& g : p.groups)
      for (auto n : g) {
        if (n >= s.node_count) invalid(where + ".groups", "node index " + std::to_string(n) + " out of range");
        if (!seen.insert(n).second) invalid(where + ".groups", "node " + std::to_string(n) + " in two groups");
      }
    for (auto c : p.isolate_clusters)
      if (c >= s.cluster_layout.size())
        invalid(where + ".isolate_clusters", "cluster index " + std::to_string(c) + " out of range");
    if (!p.groups.empty() && !p.isolate_clusters.empty())
      invalid(where, "use either groups or isolate_clusters, not both");
    spans.emplace_back(p.start_ms, p.end_ms);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) invalid("partition_schedule", "windows overlap");
  for (std::size_t i = 0; i < s.churn.size(); ++i) {
    const auto& c = s.churn[i];
    const auto where = "churn[" + std::to_string(i) + "]";
    if (c.node >= s.node_count) invalid(where + ".node", "out of range");
    if (c.from_ms >= c.until_ms) invalid(where + ".until_ms", "must be after from_ms");
  }
}

inline Scenario parse_scenario(const json& j) {
  using namespace detail;
  if (!j.is_object()) invalid("scenario", "must be a JSON object");
  reject_unknown(j, {"name", "seed", "node_count", "cluster_layout", "request_rate", "partition_schedule", "adversary",
                     "duration_ms", "conflict_window_ms", "workload_mix", "link", "arrival", "warmup_ms",
                     "sync_interval_ms", "max_active_records", "credential_validity_ms", "churn", "allow_rejoin",
                     "allow_degraded", "roaming_probability"});
  Scenario s;
  s.name = field<std::string>(j, "name", s.name);
  s.seed = nonneg(j, "seed", s.seed);
  s.node_count = nonneg(j, "node_count", s.node_count);
  if (j.contains("cluster_layout")) {
    if (!j["cluster_layout"].is_array()) invalid("cluster_layout", "must be an array");
    s.cluster_layout.clear();
    for (const auto& v : j["cluster_layout"]) {
      if (!is_nonneg_integer(v)) invalid("cluster_layout", "sizes must be non-negative integers");
      s.cluster_layout.push_back(v.get<std::size_t>());
    }
  }
  s.request_rate = field<double>(j, "request_rate", s.request_rate);
  s.duration_ms = nonneg(j, "duration_ms", s.duration_ms);
  s.conflict_window_ms = nonneg(j, "conflict_window_ms", s.conflict_window_ms);
  s.warmup_ms = nonneg(j, "warmup_ms", s.warmup_ms);
  s.sync_interval_ms = nonneg(j, "sync_interval_ms", s.sync_interval_ms);
  s.max_active_records = nonneg(j, "max_active_records", s.max_active_records);
  s.credential_validity_ms = nonneg(j, "credential_validity_ms", s.credential_validity_ms);
  s.allow_rejoin = field<bool>(j, "allow_rejoin", s.allow_rejoin);
  s.allow_degraded = field<bool>(j, "allow_degraded", s.allow_degraded);
  s.roaming_probability = field<double>(j, "roaming_probability", s.roaming_probability);

  if (auto a = field<std::string>(j, "arrival", "poisson"); a == "poisson")
    s.arrival = Arrival::Poisson;
  else if (a == "periodic")
    s.arrival = Arrival::Periodic;
  else
    invalid("arrival", "expected \"poisson\" or \"periodic\"");

  if (j.contains("workload_mix")) {
    const auto& m = j["workload_mix"];
    if (!m.is_object()) invalid("workload_mix", "must be an object");
    reject_unknown(m, {"online", "offline", "sync"}, "workload_mix.");
    s.workload_mix = {field<double>(m, "online", 0.0, "workload_mix."), field<double>(m, "offline", 0.0, "workload_mix."),
                      field<double>(m, "sync", 0.0, "workload_mix.")};
  }
  if (j.contains("link")) {
    const auto& l = j["link"];
    if (!l.is_object()) invalid("link", "must be an object");
    reject_unknown(l, {"latency_min_ms", "latency_max_ms", "loss_probability"}, "link.");
    s.link.latency_min_ms = nonneg(l, "latency_min_ms", s.link.latency_min_ms, "link.");
    s.link.latency_max_ms = nonneg(l, "latency_max_ms", s.link.latency_max_ms, "link.");
    s.link.loss_probability = field<double>(l, "loss_probability", s.link.loss_probability, "link.");
  }
  if (j.contains("adversary")) {
    const auto& a = j["adversary"];
    if (!a.is_object()) invalid("adversary", "must be an object");
    reject_unknown(a, {"replay", "spoof", "impersonation", "tamper", "tamper_probability", "tamper_max_attempt",
                       "attack_interval_ms"},
                   "adversary.");
    auto& adv = s.adversary;
    adv.replay = field<bool>(a, "replay", false, "adversary.");
    adv.spoof = field<bool>(a, "spoof", false, "adversary.");
    adv.impersonation = field<bool>(a, "impersonation", false, "adversary.");
    adv.tamper = field<bool>(a, "tamper", false, "adversary.");
    adv.tamper_probability = field<double>(a, "tamper_probability", adv.tamper_probability, "adversary.");
    adv.tamper_max_attempt =
        static_cast<std::uint16_t>(nonneg(a, "tamper_max_attempt", adv.tamper_max_attempt, "adversary."));
    adv.attack_interval_ms = nonneg(a, "attack_interval_ms", adv.attack_interval_ms, "adversary.");
  }
  if (j.contains("partition_schedule")) {
    const auto& ps = j["partition_schedule"];
    if (!ps.is_array()) invalid("partition_schedule", "must be an array");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& p = ps[i];
      const auto where = "partition_schedule[" + std::to_string(i) + "].";
      if (!p.is_object()) invalid(where, "must be an object");
      reject_unknown(p, {"start_ms", "end_ms", "groups", "isolate_clusters"}, where);
      PartitionWindow w;
      w.start_ms = nonneg(p, "start_ms", 0, where);
      w.end_ms = nonneg(p, "end_ms", 0, where);
      w.groups = field<std::vector<std::vector<std::size_t>>>(p, "groups", {}, where);
      w.isolate_clusters = field<std::vector<std::size_t>>(p, "isolate_clusters", {}, where);
      s.partition_schedule.push_back(std::move(w));
    }
  }
  if (j.contains("churn")) {
    const auto& cs = j["churn"];
    if (!cs.is_array()) invalid("churn", "must be an array");
    for (std::size_t i = 0; i < cs.size(); ++i) {
      const auto where = "churn[" + std::to_string(i) + "].";
      if (!cs[i].is_object()) invalid(where, "must be an object");
      reject_unknown(cs[i], {"node", "from_ms", "until_ms"}, where);
      s.churn.push_back({nonneg(cs[i], "node", 0, where), nonneg(cs[i], "from_ms", 0, where),
                         nonneg(cs[i], "until_ms", 0, where)});
    }
  }
  validate(s);
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidScenario, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidScenario, path.string() + ": " + e.what());
  }
  auto s = parse_scenario(j);
  if (!j.contains("name")) s.name = path.stem().string();
  return s;
}

inline json to_json(const Scenario& s) {
  json parts = json::array();
  for (const auto& p : s.partition_schedule)
    parts.push_back({{"start_ms", p.start_ms}, {"end_ms", p.end_ms}, {"groups", p.groups},
                     {"isolate_clusters", p.isolate_clusters}});
  json churn = json::array();
  for (const auto& c : s.churn) churn.push_back({{"node", c.node}, {"from_ms", c.from_ms}, {"until_ms", c.until_ms}});
  return {
      {"name", s.name},
      {"seed", s.seed},
      {"node_count", s.node_count},
      {"cluster_layout", s.cluster_layout},
      {"request_rate", s.request_rate},
      {"partition_schedule", parts},
      {"adversary",
       {{"replay", s.adversary.replay},
        {"spoof", s.adversary.spoof},
        {"impersonation", s.adversary.impersonation},
        {"tamper", s.adversary.tamper},
        {"tamper_probability", s.adversary.tamper_probability},
        {"tamper_max_attempt", s.adversary.tamper_max_attempt},
        {"attack_interval_ms", s.adversary.attack_interval_ms}}},
      {"duration_ms", s.duration_ms},
      {"conflict_window_ms", s.conflict_window_ms},
      {"workload_mix",
       {{"online", s.workload_mix.online}, {"offline", s.workload_mix.offline}, {"sync", s.workload_mix.sync}}},
      {"link",
       {{"latency_min_ms", s.link.latency_min_ms},
        {"latency_max_ms", s.link.latency_max_ms},
        {"loss_probability", s.link.loss_probability}}},
      {"arrival", s.arrival == Arrival::Poisson ? "poisson" : "periodic"},
      {"warmup_ms", s.warmup_ms},
      {"sync_interval_ms", s.sync_interval_ms},
      {"max_active_records", s.max_active_records},
      {"credential_validity_ms", s.credential_validity_ms},
      {"churn", churn},
      {"allow_rejoin", s.allow_rejoin},
      {"allow_degraded", s.allow_degraded},
      {"roaming_probability", s.roaming_probability},
  };
}

// ---------------------------------------------------------------------------
// Metrics

struct AuthEvent {
  std::size_t cluster = 0;
  std::string subject;
  std::uint64_t request_id = 0;
  std::string mode;  // online | offline
  TimeMs opened_at = 0;
  TimeMs decided_at = 0;
  std::size_t participants = 0;
  std::size_t valid_count = 0;
  std::size_t threshold = 0;
  wire::Outcome outcome = wire::Outcome::Failure;
  std::uint64_t protocol_messages = 0;
  std::uint64_t coordination_messages = 0;
  bool adversarial = false;

  bool decided() const { return outcome == wire::Outcome::Success || outcome == wire::Outcome::Failure; }
  TimeMs latency() const { return decided_at - opened_at; }
};

struct SyncEvent {
  std::size_t cluster = 0;
  std::uint16_t attempt = 0;
  TimeMs sent_at = 0;
  TimeMs received_at = 0;
  TimeMs finished_at = 0;  // zero if the result never arrived
  std::size_t records = 0;
  std::size_t request_bytes = 0;
  std::string status;
  std::string reason;
  std::uint32_t committed = 0;
  std::uint32_t conflicts = 0;
  bool tampered = false;
  bool offline_backlog = false;  // carried records created while cut off from the main network

  TimeMs duration() const { return finished_at ? finished_at - sent_at : 0; }
};

struct ModeRow {
  std::string mode;
  std::size_t sessions = 0;
  std::size_t successes = 0;
  double mean_latency_ms = 0;
  TimeMs p50_latency_ms = 0;
  TimeMs p95_latency_ms = 0;
  double mean_cluster_size = 0;
  double protocol_messages_per_session = 0;
  double coordination_messages_per_session = 0;
  double messages_per_attempt = 0;  // sync row only
  std::size_t records = 0;          // sync row only
};

struct Audit {
  std::size_t decided_sessions = 0;
  std::size_t auth_records = 0;
  bool records_reconciled = false;
  bool main_matches_oracle = false;
  std::size_t unconfirmed_records = 0;
  bool conservation_ok = false;
  bool storage_ok = false;
  std::vector<std::string> violations;
};

struct AttackCounters {
  std::size_t adversarial_sessions = 0;
  std::size_t adversarial_decided = 0;
  std::size_t fraudulent_successes = 0;
  std::size_t fraudulent_response_accepts = 0;
  std::uint64_t replayed_responses = 0;
  std::uint64_t forged_responses = 0;
  std::uint64_t spoof_beacons = 0;
  std::size_t spoof_candidate_admissions = 0;
  std::size_t tampered_syncs = 0;
  std::size_t tamper_detected = 0;
  std::size_t tamper_recovered = 0;
  std::size_t unknown_challenge = 0;
  std::size_t bad_signature = 0;
  std::size_t expired = 0;
  std::size_t nonparticipant_verdicts = 0;
};

struct MembershipCounters {
  std::size_t formed_clusters = 0;
  std::size_t departures = 0;
  std::size_t joins = 0;
  std::size_t degraded_refusals = 0;
};

struct MetricsReport {
  Scenario scenario;
  std::vector<AuthEvent> auth_events;
  std::vector<SyncEvent> sync_events;
  std::vector<ModeRow> modes;
  std::size_t requested = 0;
  std::size_t not_ready = 0;
  std::size_t decided = 0;
  std::size_t successes = 0;
  double success_rate = 0;
  double throughput_per_s = 0;
  double mean_latency_ms = 0;
  TimeMs p50_latency_ms = 0;
  TimeMs p95_latency_ms = 0;
  std::size_t max_tal_bytes = 0;
  std::size_t max_active_records = 0;
  std::size_t main_records = 0;
  std::size_t main_superseded = 0;
  std::size_t anomalies = 0;
  std::size_t flagged_clusters = 0;
  std::size_t sync_timeouts = 0;
  MembershipCounters membership;
  AttackCounters attacks;
  sim::NetStats network;
  Audit audit;
};

inline TimeMs percentile(std::vector<TimeMs> v, double p) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline double mean(const std::vector<TimeMs>& v) {
  if (v.empty()) return 0;
  return static_cast<double>(std::accumulate(v.begin(), v.end(), std::uint64_t{0})) / static_cast<double>(v.size());
}

/// Expected main ledger from the union of every cluster's records, by exhaustive pairwise check.
inline std::vector<Frame> oracle_main_ledger(std::vector<Frame> all, TimeMs window) {
  std::sort(all.begin(), all.end(), sync::order_less);
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<Frame> out = all;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto ri = AuthRecord::decode(all[i]);
    if (!ri.is_success()) continue;
    for (std::size_t j = 0; j < i; ++j)
      if (sync::conflicting(AuthRecord::decode(all[j]), ri, window)) {
        out[i] = sync::mark_superseded(all[i]);
        break;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulated world

struct RunOptions {
  std::ostream* log = nullptr;
  int verbosity = 0;
};

inline constexpr TimeMs kSyncTimeout = 5'000;
inline constexpr TimeMs kSweepInterval = 5'000;
inline constexpr TimeMs kDrainStep = 5'000;
inline constexpr TimeMs kDrainLimit = 600'000;
inline constexpr std::size_t kMembershipReserve = 8;

struct OpenSession {
  SessionKey key;
  auth::AuthSession session;
  std::string mode;
  bool adversarial = false;
};

struct Coordinator {
  Coordinator(std::size_t cluster_index, cluster::ClusterRoster r)
      : cluster(cluster_index), roster(std::move(r)), tal(roster.cluster_id()) {}

  std::size_t cluster;
  cluster::ClusterRoster roster;
  Tal tal;
  cluster::HeartbeatTracker heartbeats;
  std::map<SessionKey, OpenSession> sessions;
  std::set<SessionKey> seen;
  std::optional<cluster::JoinBallot> ballot;

  bool sync_in_flight = false;
  std::uint16_t attempt = 0;
  std::uint64_t sync_serial = 0;
  TimeMs sync_sent_at = 0;
  std::optional<std::size_t> sync_event;  // index into the sync event table
  std::size_t max_active = 0;
  TimeMs offline_since = 0;
  bool was_offline = false;
};

struct Device {
  Device(std::size_t i, Registration reg, Rng r, std::shared_ptr<const CredentialBlock> block)
      : index(i),
        id(reg.credential.did),
        keys(std::move(reg.keys)),
        mfa(reg.credential.mfa_secret),
        rng(std::move(r)),
        discovery(id, std::move(block)),
        issuer(id, rng.fork("issuer")) {}

  std::size_t index;
  DeviceId id;
  KeyPair keys;
  Digest mfa;
  Rng rng;
  cluster::NodeState discovery;
  auth::Issuer issuer;

  bool member = false;
  std::size_t home = 0;  // cluster layout index (members) or assigned cluster (clients)

  bool in_cluster = false;
  DeviceId coordinator;
  Digest cluster_id{};
  std::optional<cluster::FormationProposal> proposal;
  std::map<DeviceId, Signature> endorsements;

  std::map<SessionKey, TimeMs> pending;                       // own outstanding requests
  std::uint64_t next_request = 1;
  std::map<Digest, std::pair<SessionKey, DeviceId>> issued;  // challenge id -> session, coordinator

  std::unique_ptr<Coordinator> coord;
};

class World {
 public:
  explicit World(Scenario s, RunOptions opts = {})
      : s_(std::move(s)),
        opts_(opts),
        root_(s_.seed),
        sim_(s_.link, root_.fork("network")),
        main_(nullptr) {
    validate(s_);
    build();
  }

  World(const World&) = delete;
  World& operator=(const World&) = delete;

  const Scenario& scenario() const { return s_; }
  sim::Simulator& sim() { return sim_; }
  const sim::Simulator& sim() const { return sim_; }
  const sync::MainLedger& main() const { return *main_; }
  const CredentialBlock& block() const { return *block_; }
  std::size_t device_count() const { return devices_.size(); }
  Device& device(std::size_t i) { return *devices_.at(i); }
  const Device& device(std::size_t i) const { return *devices_.at(i); }
  const std::vector<AuthEvent>& auth_events() const { return auth_events_; }
  const std::vector<SyncEvent>& sync_events() const { return sync_events_; }
  const AttackCounters& attacks() const { return attacks_; }

  /// Coordinator of layout cluster c, once formed.
  Device* coordinator_of(std::size_t c) {
    auto it = coordinators_.find(c);
    return it == coordinators_.end() ? nullptr : devices_[it->second].get();
  }

  std::vector<std::size_t> members_of(std::size_t c) const {
    std::vector<std::size_t> out;
    for (const auto& d : devices_)
      if (d->member && d->home == c) out.push_back(d->index);
    return out;
  }

  /// Schedules discovery, partitions, churn, adversaries, workload, and periodic timers.
  void start() {
    if (started_) return;
    started_ = true;
    schedule_discovery();
    schedule_partitions();
    schedule_churn();
    schedule_adversaries();
    schedule_workload();
    schedule_periodic();
  }

  void advance_to(TimeMs t) {
    start();
    sim_.run_until(std::max(t, sim_.now()));
  }

  /// Sends an authentication request from device `subject` to cluster c's coordinator.
  std::optional<SessionKey> request_auth(std::size_t subject, std::size_t c) {
    auto* coord = coordinator_of(c);
    if (!coord) {
      ++not_ready_;
      return std::nullopt;
    }
    auto& d = device(subject);
    SessionKey key{d.id, d.next_request++};
    d.pending.emplace(key, sim_.now());
    ++requested_;
    send(d.id, coord->id, wire::Kind::AuthRequest, wire::AuthRequest{key}.encode(), key);
    return key;
  }

  /// Delivers a verdict signed by `issuer` for an open session directly to the coordinator.
  bool submit_verdict(std::size_t issuer, std::size_t c, const SessionKey& key, bool valid) {
    auto* coord = coordinator_of(c);
    if (!coord) return false;
    auto it = coord->coord->sessions.find(key);
    if (it == coord->coord->sessions.end()) return false;
    auto& d = device(issuer);
    const auto* cred = block_->find(key.subject);
    if (!cred) return false;
    wire::Verdict v{key, d.id, d.issuer.issue(*cred, sim_.now()), std::nullopt, valid, {}};
    v.sign_with(d.keys);
    return accept_verdict(*coord, v);
  }

  /// Heals everything and syncs until no unconfirmed record remains or the limit passes.
  void drain() {
    const auto end = std::max(sim_.now(), s_.workload_end());
    sim_.run_until(end);
    draining_ = true;
    for (const auto& d : devices_) sim_.set_isolated(d->id, false);
    if (sim_.partitioned()) sim_.heal();
    sim_.run_until(end + auth::kSessionTimeout + kSweepInterval);
    const auto limit = sim_.now() + kDrainLimit;
    while (sim_.now() < limit) {
      bool busy = false;
      for (auto& [c, idx] : coordinators_) {
        auto& co = *devices_[idx]->coord;
        if (co.tal.active_count() > 0 || co.sync_in_flight || !co.sessions.empty()) busy = true;
        if (co.tal.active_count() > 0) maybe_sync(*devices_[idx], false);
      }
      if (!busy) break;
      sim_.run_until(sim_.now() + kDrainStep);
    }
  }

  void run() {
    start();
    drain();
  }

  MetricsReport report() const;

  /// Every TAL frame across clusters, archive and active.
  std::vector<Frame> all_tal_frames() const {
    std::vector<Frame> out;
    for (const auto& [c, idx] : coordinators_) {
      const auto& tal = devices_[idx]->coord->tal;
      out.insert(out.end(), tal.archive().begin(), tal.archive().end());
      out.insert(out.end(), tal.active().begin(), tal.active().end());
    }
    return out;
  }

  void write_ledgers(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    sync::write_main_ledger(*main_, dir / "main.swml");
    for (const auto& [c, idx] : coordinators_)
      persist_file(devices_[idx]->coord->tal, dir / ("cluster-" + std::to_string(c) + ".swtl"));
  }

 private:
  // -------------------------------------------------------------------------
  // Setup

  void build() {
    CredentialBlock block;
    std::vector<Registration> regs;
    auto reg_rng = root_.fork("registration");
    for (std::size_t i = 0; i < s_.node_count; ++i) {
      regs.push_back(register_device(block, "did:sword:device:" + std::to_string(i), s_.credential_validity_ms,
                                     reg_rng, 0));
      block = regs.back().block;
    }
    block_ = std::make_shared<const CredentialBlock>(std::move(block));
    main_ = std::make_unique<sync::MainLedger>(block_, s_.conflict_window_ms);

    std::size_t next = 0;
    for (std::size_t c = 0; c < s_.cluster_layout.size(); ++c)
      for (std::size_t k = 0; k < s_.cluster_layout[c]; ++k) home_of_.push_back({true, c}), ++next;
    for (std::size_t j = 0; next < s_.node_count; ++j, ++next) home_of_.push_back({false, j % s_.cluster_layout.size()});

    for (std::size_t i = 0; i < s_.node_count; ++i) {
      auto d = std::make_unique<Device>(i, std::move(regs[i]), root_.fork("device", i), block_);
      d->member = home_of_[i].first;
      d->home = home_of_[i].second;
      sim_.attach(d->id, [this, i](const sim::Envelope& env) { on_message(i, env); }, "n" + std::to_string(i));
      index_of_.emplace(d->id, i);
      devices_.push_back(std::move(d));
    }
    sim_.attach(sim::kMainNetwork, [this](const sim::Envelope& env) { on_main(env); }, "main");
    sim_.on_heal([this] {
      for (auto& [c, idx] : coordinators_) {
        const auto i = idx;
        sim_.after(devices_[i]->rng.uniform(0, 1'000), [this, i] { maybe_sync(*devices_[i], true); });
      }
    });
  }

  void log(int level, const std::string& msg) const {
    if (opts_.log && opts_.verbosity >= level) *opts_.log << '[' << sim_.now() << "] " << msg << '\n';
  }

  void schedule_discovery() {
    for (auto& d : devices_)
      if (d->member) {
        const auto i = d->index;
        sim_.at(d->rng.uniform(0, 500), [this, i] { discovery_round(i); });
      }
  }

  void schedule_partitions() {
    auto windows = s_.partition_schedule;
    const auto& m = s_.workload_mix;
    if (windows.empty() && m.offline > 0) {
      // Offline phase: every cluster cut off from the main network and from each other.
      PartitionWindow w;
      w.start_ms = s_.warmup_ms + static_cast<TimeMs>(std::llround(m.online * static_cast<double>(s_.duration_ms)));
      w.end_ms = s_.warmup_ms +
                 static_cast<TimeMs>(std::llround((m.online + m.offline) * static_cast<double>(s_.duration_ms)));
      for (std::size_t c = 0; c < s_.cluster_layout.size(); ++c) w.isolate_clusters.push_back(c);
      if (w.end_ms > w.start_ms) windows.push_back(std::move(w));
    }
    for (const auto& w : windows) {
      std::vector<std::set<DeviceId>> groups;
      for (const auto& g : w.groups) {
        std::set<DeviceId> ids;
        for (auto n : g) ids.insert(devices_[n]->id);
        groups.push_back(std::move(ids));
      }
      for (auto c : w.isolate_clusters) {
        std::set<DeviceId> ids;
        for (const auto& d : devices_)
          if (d->home == c) ids.insert(d->id);
        groups.push_back(std::move(ids));
      }
      sim_.at(w.start_ms, [this, groups] {
        log(1, "partition");
        sim_.partition(groups);
      });
      sim_.at(w.end_ms, [this] {
        log(1, "heal");
        sim_.heal();
      });
    }
  }

  void schedule_churn() {
    for (const auto& c : s_.churn) {
      const auto id = devices_[c.node]->id;
      sim_.at(c.from_ms, [this, id, n = c.node] {
        log(1, "isolate n" + std::to_string(n));
        sim_.set_isolated(id, true);
      });
      sim_.at(c.until_ms, [this, id, n = c.node] {
        log(1, "reconnect n" + std::to_string(n));
        sim_.set_isolated(id, false);
      });
    }
  }

  void schedule_adversaries() {
    const auto& a = s_.adversary;
    const auto start = s_.warmup_ms;
    const auto stop = s_.workload_end();
    using K = wire::Kind;
    const std::set<K> session_kinds{K::AuthRequest, K::Challenge, K::Response};
    if (a.tamper) {
      tamper_ = std::make_shared<sim::TamperAdversary>(root_.fork("adversary-tamper"), a.tamper_probability,
                                                       a.tamper_max_attempt);
      sim_.inject_adversary(tamper_, {K::SyncRequest});
    }
    if (a.replay) {
      replay_ = std::make_shared<sim::ReplayAdversary>(root_.fork("adversary-replay"), start, a.attack_interval_ms, stop);
      sim_.inject_adversary(replay_, session_kinds);
    }
    if (a.impersonation) {
      impersonation_ = std::make_shared<sim::ImpersonationAdversary>(root_.fork("adversary-impersonation"), start,
                                                                     a.attack_interval_ms, stop);
      sim_.inject_adversary(impersonation_, session_kinds);
    }
    if (a.spoof) {
      std::vector<DeviceId> targets;
      for (const auto& d : devices_)
        if (d->member) targets.push_back(d->id);
      spoof_ = std::make_shared<sim::SpoofAdversary>(root_.fork("adversary-spoof"), start, a.attack_interval_ms, stop,
                                                     targets, s_.warmup_ms);
      auto kinds = session_kinds;
      kinds.insert(K::Beacon);
      sim_.inject_adversary(spoof_, kinds);
    }
  }

  void schedule_workload() {
    if (s_.request_rate <= 0) return;
    const auto m = s_.workload_mix;
    const auto auth_end =
        s_.warmup_ms + static_cast<TimeMs>(std::llround((m.online + m.offline) * static_cast<double>(s_.duration_ms)));
    for (std::size_t c = 0; c < s_.cluster_layout.size(); ++c) {
      auto rng = std::make_shared<Rng>(root_.fork("workload", c));
      next_arrival(c, rng, s_.warmup_ms, auth_end);
    }
  }

  void next_arrival(std::size_t c, std::shared_ptr<Rng> rng, TimeMs from, TimeMs until) {
    const double mean_gap = 60'000.0 / s_.request_rate;
    const auto gap = s_.arrival == Arrival::Poisson ? static_cast<TimeMs>(std::llround(rng->exponential(mean_gap)))
                                                    : static_cast<TimeMs>(std::llround(mean_gap));
    const auto at = from + std::max<TimeMs>(gap, 1);
    if (at >= until) return;
    sim_.at(at, [this, c, rng, at, until] {
      request_auth(pick_subject(c, *rng), c);
      next_arrival(c, rng, at, until);
    });
  }

  std::size_t pick_subject(std::size_t c, Rng& rng) {
    auto pool_of = [&](std::size_t cluster) {
      std::vector<std::size_t> clients, members;
      for (const auto& d : devices_)
        if (d->home == cluster) (d->member ? members : clients).push_back(d->index);
      return clients.empty() ? members : clients;
    };
    std::size_t from = c;
    if (s_.cluster_layout.size() > 1 && s_.roaming_probability > 0 && rng.bernoulli(s_.roaming_probability)) {
      from = rng.uniform(0, s_.cluster_layout.size() - 2);
      if (from >= c) ++from;
    }
    const auto pool = pool_of(from);
    return pool[rng.uniform(0, pool.size() - 1)];
  }

  void schedule_periodic() {
    periodic_sweep(kSweepInterval);
    periodic_sync(s_.warmup_ms + s_.sync_interval_ms);
  }

  void periodic_sweep(TimeMs at) {
    sim_.at(at, [this] {
      sweep();
      if (!stopped()) periodic_sweep(sim_.now() + kSweepInterval);
    });
  }

  void periodic_sync(TimeMs at) {
    sim_.at(at, [this] {
      for (auto& [c, idx] : coordinators_) maybe_sync(*devices_[idx], false);
      if (!stopped()) periodic_sync(sim_.now() + s_.sync_interval_ms);
    });
  }

  bool stopped() const { return draining_ && sim_.now() > s_.workload_end() + kDrainLimit + auth::kSessionTimeout; }

  // -------------------------------------------------------------------------
  // Messaging

  void send(const DeviceId& src, const DeviceId& dst, wire::Kind kind, Bytes payload,
            std::optional<SessionKey> session = std::nullopt) {
    if (session) {
      auto& c = counters_[*session];
      if (wire::is_protocol(kind)) ++c.first;
      if (wire::is_coordination(kind)) ++c.second;
    }
    sim_.send(src, dst, kind, std::move(payload));
  }

  template <typename M>
  static M decode(const sim::Envelope& env) {
    return M::decode(env.payload);
  }

  void on_message(std::size_t i, const sim::Envelope& env) {
    auto& d = *devices_[i];
    using K = wire::Kind;
    try {
      switch (env.kind) {
        case K::Beacon: d.discovery.handle_beacon(cluster::Beacon::decode(env.payload), sim_.now()); break;
        case K::Vote: on_vote(d, env); break;
        case K::AuthRequest: on_auth_request(d, env); break;
        case K::SessionOpen: on_session_open(d, env); break;
        case K::Challenge: on_challenge(d, env); break;
        case K::Response: on_response(d, env); break;
        case K::Verdict:
          if (d.coord) accept_verdict(d, decode<wire::Verdict>(env));
          break;
        case K::AuthResult: d.pending.erase(decode<wire::AuthResultMsg>(env).key); break;
        case K::Heartbeat: on_heartbeat(d, env); break;
        case K::SyncResult: on_sync_result(d, sync::SyncResult::decode(env.payload)); break;
        case K::SyncRequest: break;
      }
    } catch (const Error& e) {
      ++malformed_;
      log(2, "n" + std::to_string(i) + " dropped " + std::string(wire::to_string(env.kind)) + ": " + e.what());
    }
  }

  // -------------------------------------------------------------------------
  // Discovery and formation

  std::vector<DeviceId> proximity_peers(const Device& d) const {
    std::vector<DeviceId> out;
    for (const auto& o : devices_)
      if (o->member && o->home == d.home && o->index != d.index) out.push_back(o->id);
    return out;
  }

  void discovery_round(std::size_t i) {
    auto& d = *devices_[i];
    if (d.in_cluster || draining_) return;
    const auto beacon = d.discovery.emit_beacon(sim_.now()).encode();
    for (const auto& p : proximity_peers(d)) send(d.id, p, wire::Kind::Beacon, beacon);
    sim_.after(2'000, [this, i] {
      auto& d = *devices_[i];
      if (d.in_cluster) return;
      const auto a = wire::VoteMsg{wire::VoteType::Announce, d.discovery.announce(d.keys, sim_.now()).encode()}.encode();
      for (const auto& p : proximity_peers(d)) send(d.id, p, wire::Kind::Vote, a);
    });
    sim_.after(4'000, [this, i] { try_propose(*devices_[i]); });
    sim_.after(cluster::kBeaconInterval, [this, i] { discovery_round(i); });
  }

  void try_propose(Device& d) {
    if (d.in_cluster) return;
    const auto set = d.discovery.mutual_set(sim_.now());
    if (set.front() != d.id || set.size() < cluster::kMinClusterSize) return;
    d.proposal = cluster::plan_formation(d.discovery, sim_.now());
    d.endorsements.clear();
    if (auto sig = cluster::endorse_formation(d.discovery, *d.proposal, d.keys, sim_.now()))
      d.endorsements.emplace(d.id, *sig);
    const auto msg = wire::VoteMsg{wire::VoteType::Proposal, d.proposal->encode()}.encode();
    for (const auto& f : d.proposal->founders)
      if (f != d.id) send(d.id, f, wire::Kind::Vote, msg);
    log(2, "n" + std::to_string(d.index) + " proposes a cluster of " + std::to_string(set.size()));
  }

  void on_vote(Device& d, const sim::Envelope& env) {
    const auto m = wire::VoteMsg::decode(env.payload);
    const auto now = sim_.now();
    switch (m.type) {
      case wire::VoteType::Announce:
        d.discovery.handle_announcement(cluster::CandidateAnnouncement::decode(m.body), now);
        break;
      case wire::VoteType::Proposal: {
        if (d.in_cluster) break;
        const auto p = cluster::FormationProposal::decode(m.body);
        if (auto sig = cluster::endorse_formation(d.discovery, p, d.keys, now))
          send(d.id, p.founders.front(), wire::Kind::Vote,
               wire::VoteMsg{wire::VoteType::Endorse, wire::Endorsement{p, d.id, *sig}.encode()}.encode());
        break;
      }
      case wire::VoteType::Endorse: {
        const auto e = wire::Endorsement::decode(m.body);
        if (d.in_cluster || !d.proposal || e.proposal.encode() != d.proposal->encode()) break;
        d.endorsements.emplace(e.signer, e.signature);
        if (d.endorsements.size() == d.proposal->founders.size()) finish_formation(d);
        break;
      }
      case wire::VoteType::Commit: {
        if (d.in_cluster) break;
        const auto c = wire::Commit::decode(m.body);
        const auto& p = c.proposal;
        if (!std::binary_search(p.founders.begin(), p.founders.end(), d.id)) break;
        cluster::MembershipCertificate cert{p.snapshot_hash, p.formed_at, c.signatures};
        if (c.signatures.size() != p.founders.size() || !cluster::verify_certificate(cert, *block_)) break;
        join_cluster(d, p.founders.front(), p.cluster_id);
        break;
      }
      case wire::VoteType::Ballot: {
        const auto b = wire::Ballot::decode(m.body).ballot;
        if (!d.in_cluster || env.src != d.coordinator || b.cluster_id != d.cluster_id) break;
        const auto v = cluster::make_vote(d.id, d.keys, *block_, b, true, now);
        send(d.id, d.coordinator, wire::Kind::Vote,
             wire::VoteMsg{wire::VoteType::BallotVote, wire::BallotVote{b.applicant, b.opened_at, v}.encode()}.encode());
        break;
      }
      case wire::VoteType::BallotVote: {
        if (!d.coord || !d.coord->ballot) break;
        const auto bv = wire::BallotVote::decode(m.body);
        auto& ballot = *d.coord->ballot;
        if (bv.applicant != ballot.applicant || bv.opened_at != ballot.opened_at) break;
        if (!ballot.eligible.contains(bv.vote.voter)) break;
        cluster::cast_vote(ballot, *block_, bv.vote);
        maybe_admit(d);
        break;
      }
    }
  }

  void finish_formation(Device& d) {
    const auto& p = *d.proposal;
    auto formation = cluster::finalize_formation(p, d.endorsements, *block_);
    d.coord = std::make_unique<Coordinator>(d.home, formation.roster);
    auto& co = *d.coord;
    cluster::record_formation(co.tal, co.roster);
    note_storage(co);
    for (const auto& f : p.founders) co.heartbeats.process_heartbeat(f, sim_.now());
    coordinators_[d.home] = d.index;
    ++membership_.formed_clusters;
    const auto msg = wire::VoteMsg{wire::VoteType::Commit,
                                   wire::Commit{p, formation.certificate.signatures}.encode()}.encode();
    for (const auto& f : p.founders)
      if (f != d.id) send(d.id, f, wire::Kind::Vote, msg);
    join_cluster(d, d.id, p.cluster_id);
    if (!sim_.reachable(d.id, sim::kMainNetwork)) {
      co.was_offline = true;
      co.offline_since = sim_.now();
    }
    log(1, "cluster " + std::to_string(d.home) + " formed, coordinator n" + std::to_string(d.index));
  }

  void join_cluster(Device& d, const DeviceId& coordinator, const Digest& cluster_id) {
    d.in_cluster = true;
    d.coordinator = coordinator;
    d.cluster_id = cluster_id;
    d.proposal.reset();
    if (coordinator != d.id) {
      const auto i = d.index;
      sim_.after(d.rng.uniform(1'000, cluster::kHeartbeatInterval), [this, i] { heartbeat(i); });
    }
  }

  void heartbeat(std::size_t i) {
    auto& d = *devices_[i];
    send(d.id, d.coordinator, wire::Kind::Heartbeat, wire::Heartbeat{d.id, sim_.now()}.encode());
    if (!stopped()) sim_.after(cluster::kHeartbeatInterval, [this, i] { heartbeat(i); });
  }

  // -------------------------------------------------------------------------
  // Membership maintenance (coordinator)

  void on_heartbeat(Device& d, const sim::Envelope& env) {
    if (!d.coord) return;
    const auto h = wire::Heartbeat::decode(env.payload);
    auto& co = *d.coord;
    if (co.roster.is_active(h.sender)) {
      co.heartbeats.process_heartbeat(h.sender, sim_.now());
      return;
    }
    if (co.roster.members().contains(h.sender) && s_.allow_rejoin && !co.ballot) open_ballot(d, h.sender);
  }

  void open_ballot(Device& d, const DeviceId& applicant) {
    auto& co = *d.coord;
    co.ballot = cluster::propose_join(co.roster, applicant, sim_.now());
    auto& b = *co.ballot;
    cluster::cast_vote(b, *block_, cluster::make_vote(d.id, d.keys, *block_, b, true, sim_.now()));
    const auto msg = wire::VoteMsg{wire::VoteType::Ballot, wire::Ballot{b}.encode()}.encode();
    for (const auto& m : b.eligible)
      if (m != d.id) send(d.id, m, wire::Kind::Vote, msg);
    log(1, "join ballot for " + sim_.label(applicant));
    maybe_admit(d);
  }

  void maybe_admit(Device& d) {
    auto& co = *d.coord;
    auto& b = *co.ballot;
    if (!cluster::tally_join(b, *block_, sim_.now())) return;
    cluster::admit_member(co.roster, co.tal, b, sim_.now());
    note_storage(co);
    co.heartbeats.process_heartbeat(b.applicant, sim_.now());
    ++membership_.joins;
    log(1, sim_.label(b.applicant) + " admitted");
    co.ballot.reset();
  }

  void sweep() {
    const auto now = sim_.now();
    for (auto& [c, idx] : coordinators_) {
      auto& co = *devices_[idx]->coord;
      co.heartbeats.process_heartbeat(devices_[idx]->id, now);
      const auto gone = cluster::sweep_departures(co.roster, co.heartbeats, co.tal, now);
      for (const auto& id : gone) log(1, sim_.label(id) + " departed cluster " + std::to_string(c));
      membership_.departures += gone.size();
      if (!gone.empty()) note_storage(co);
      if (co.ballot && now > co.ballot->deadline) co.ballot.reset();
      track_offline(co, *devices_[idx]);
    }
    for (auto& d : devices_) {
      d->issuer.expire(now);
      std::erase_if(d->issued, [&](const auto& kv) { return !d->issuer.outstanding(kv.first); });
      std::erase_if(d->pending, [&](const auto& kv) { return now - kv.second > 2 * auth::kSessionTimeout; });
    }
  }

  void track_offline(Coordinator& co, const Device& d) {
    if (!sim_.reachable(d.id, sim::kMainNetwork) && !co.was_offline) {
      co.was_offline = true;
      co.offline_since = sim_.now();
    }
  }

  // -------------------------------------------------------------------------
  // Authentication

  void on_auth_request(Device& d, const sim::Envelope& env) {
    if (!d.coord) return;
    auto& co = *d.coord;
    const auto key = wire::AuthRequest::decode(env.payload).key;
    if (!co.seen.insert(key).second) return;
    const auto now = sim_.now();
    if (env.injected) ++attacks_.adversarial_sessions;

    auto refuse = [&](wire::Outcome o) {
      send(d.id, key.subject, wire::Kind::AuthResult, wire::AuthResultMsg{key, o}.encode(), key);
      AuthEvent ev;
      ev.cluster = co.cluster;
      ev.subject = sim_.label(key.subject);
      ev.request_id = key.request_id;
      ev.mode = mode_of(d);
      ev.opened_at = ev.decided_at = now;
      ev.participants = co.roster.active_count();
      ev.outcome = o;
      ev.adversarial = env.injected;
      finish_counters(ev, key);
      auth_events_.push_back(std::move(ev));
    };

    if (co.tal.active_count() + co.sessions.size() + kMembershipReserve >= s_.max_active_records) {
      refuse(wire::Outcome::RefusedStorageFull);
      maybe_sync(d, false);
      return;
    }
    OpenSession os{key, {}, mode_of(d), env.injected};
    try {
      os.session = auth::open_session(co.roster, *block_, key.subject, now);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::DegradedMode) {
        ++membership_.degraded_refusals;
        refuse(wire::Outcome::RefusedDegraded);
      } else {
        refuse(wire::Outcome::RefusedUnknownSubject);
      }
      return;
    }
    const auto participants = os.session.participants;
    co.sessions.emplace(key, std::move(os));
    for (const auto& p : participants) {
      if (p == d.id)
        issue_challenge(d, key, d.id);
      else
        send(d.id, p, wire::Kind::SessionOpen, wire::SessionOpen{key}.encode(), key);
    }
    sim_.at(now + auth::kSessionTimeout, [this, i = d.index, key] { conclude(*devices_[i], key); });
  }

  std::string mode_of(const Device& d) const {
    return sim_.reachable(d.id, sim::kMainNetwork) ? "online" : "offline";
  }

  void on_session_open(Device& d, const sim::Envelope& env) {
    if (!d.in_cluster || env.src != d.coordinator) return;
    issue_challenge(d, wire::SessionOpen::decode(env.payload).key, d.coordinator);
  }

  void issue_challenge(Device& d, const SessionKey& key, const DeviceId& coordinator) {
    const auto* cred = block_->find(key.subject);
    if (!cred) return;
    const auto c = d.issuer.issue(*cred, sim_.now());
    d.issued.emplace(c.id, std::pair{key, coordinator});
    send(d.id, key.subject, wire::Kind::Challenge, wire::ChallengeMsg{key, c}.encode(), key);
  }

  void on_challenge(Device& d, const sim::Envelope& env) {
    const auto m = wire::ChallengeMsg::decode(env.payload);
    if (!d.pending.contains(m.key) || m.challenge.subject != d.id) return;
    try {
      const auto resp = auth::respond(d.keys, d.mfa, m.challenge, sim_.now());
      send(d.id, m.challenge.issuer, wire::Kind::Response, wire::ResponseMsg{m.key, resp}.encode(), m.key);
    } catch (const Error& e) {
      log(2, sim_.label(d.id) + " refused challenge: " + e.what());
    }
  }

  void on_response(Device& d, const sim::Envelope& env) {
    const auto m = wire::ResponseMsg::decode(env.payload);
    auto it = d.issued.find(m.response.challenge_id);
    if (it == d.issued.end()) {
      ++attacks_.unknown_challenge;
      return;
    }
    const auto [key, coordinator] = it->second;
    const auto challenge = *d.issuer.outstanding(m.response.challenge_id);
    d.issued.erase(it);
    const auto* cred = block_->find(challenge.subject);
    const auto check = d.issuer.verify_response(cred->public_key, m.response, sim_.now());
    if (check == auth::ResponseCheck::BadSignature) ++attacks_.bad_signature;
    if (check == auth::ResponseCheck::Expired) ++attacks_.expired;
    const bool valid = check == auth::ResponseCheck::Valid;
    if (valid && env.injected) ++attacks_.fraudulent_response_accepts;

    wire::Verdict v{key, d.id, challenge, m.response, valid, {}};
    v.sign_with(d.keys);
    if (coordinator == d.id)
      accept_verdict(d, v);
    else
      send(d.id, coordinator, wire::Kind::Verdict, v.encode(), key);
  }

  /// Coordinator side. A valid claim is rechecked against the subject's key.
  bool accept_verdict(Device& d, const wire::Verdict& v) {
    if (!d.coord) return false;
    auto it = d.coord->sessions.find(v.key);
    if (it == d.coord->sessions.end()) return false;
    auto& s = it->second.session;
    const auto* issuer = block_->find(v.issuer);
    if (!issuer || !verify(issuer->public_key, v.signing_bytes(), v.signature)) return false;
    if (!s.is_participant(v.issuer)) {
      ++attacks_.nonparticipant_verdicts;
      return false;
    }
    bool valid = v.valid && v.response && v.response->challenge_id == v.challenge.id;
    if (valid) {
      const auto* subject = block_->find(s.subject);
      valid = subject && verify(subject->public_key, v.challenge.signing_bytes(), v.response->signature);
    }
    if (!auth::record_verdict(s, v.issuer, v.challenge, v.response, valid)) return false;
    if (s.all_reported()) conclude(d, v.key);
    return true;
  }

  void conclude(Device& d, const SessionKey& key) {
    auto& co = *d.coord;
    auto it = co.sessions.find(key);
    if (it == co.sessions.end()) return;
    auto os = std::move(it->second);
    co.sessions.erase(it);
    const auto result = auth::decide(os.session, co.tal, sim_.now());
    note_storage(co);
    const auto outcome = result == auth::AuthResult::Success ? wire::Outcome::Success : wire::Outcome::Failure;
    send(d.id, key.subject, wire::Kind::AuthResult, wire::AuthResultMsg{key, outcome}.encode(), key);

    AuthEvent ev;
    ev.cluster = co.cluster;
    ev.subject = sim_.label(key.subject);
    ev.request_id = key.request_id;
    ev.mode = os.mode;
    ev.opened_at = os.session.opened_at;
    ev.decided_at = os.session.decided_at;
    ev.participants = os.session.participants.size();
    ev.valid_count = os.session.valid_count;
    ev.threshold = os.session.threshold;
    ev.outcome = outcome;
    ev.adversarial = os.adversarial;
    finish_counters(ev, key);
    if (os.adversarial) {
      ++attacks_.adversarial_decided;
      if (outcome == wire::Outcome::Success) ++attacks_.fraudulent_successes;
    }
    auth_events_.push_back(std::move(ev));
    if (co.tal.active_count() * 2 >= s_.max_active_records) maybe_sync(d, false);
  }

  void finish_counters(AuthEvent& ev, const SessionKey& key) {
    if (auto it = counters_.find(key); it != counters_.end()) {
      ev.protocol_messages = it->second.first;
      ev.coordination_messages = it->second.second;
      counters_.erase(it);
    }
  }

  void note_storage(Coordinator& co) {
    co.max_active = std::max(co.max_active, co.tal.active_count());
  }

  // -------------------------------------------------------------------------
  // Synchronisation

  void maybe_sync(Device& d, bool on_heal) {
    if (!d.coord) return;
    auto& co = *d.coord;
    if (co.sync_in_flight || !sim_.reachable(d.id, sim::kMainNetwork)) return;
    if (co.tal.active_count() == 0) {
      // Empty suffix: a bare heartbeat so the main network learns the cluster is back.
      if (on_heal) send_sync(d, sync::SyncRequest{co.tal.cluster_id(), {}, 0, {}});
      return;
    }
    send_sync(d, sync::prepare_sync(co.tal, 0));
  }

  void send_sync(Device& d, sync::SyncRequest req) {
    auto& co = *d.coord;
    co.sync_in_flight = true;
    co.attempt = req.attempt;
    co.sync_sent_at = sim_.now();
    co.sync_event.reset();
    const auto serial = ++co.sync_serial;
    send(d.id, sim::kMainNetwork, wire::Kind::SyncRequest, req.encode());
    sim_.after(kSyncTimeout, [this, i = d.index, serial] {
      auto& co = *devices_[i]->coord;
      if (co.sync_in_flight && co.sync_serial == serial) {
        co.sync_in_flight = false;
        ++sync_timeouts_;
      }
    });
  }

  void on_sync_result(Device& d, const sync::SyncResult& r) {
    if (!d.coord) return;
    auto& co = *d.coord;
    if (!co.sync_in_flight || r.attempt != co.attempt) return;
    co.sync_in_flight = false;
    if (co.sync_event) sync_events_[*co.sync_event].finished_at = sim_.now();
    if (r.confirmed()) {
      co.tal.prune_confirmed(static_cast<std::size_t>(r.watermark));
      if (sim_.reachable(d.id, sim::kMainNetwork)) co.was_offline = false;
      return;
    }
    if (r.reason == sync::RejectReason::TooManyAttempts || co.tal.active_count() == 0) return;
    send_sync(d, sync::prepare_sync(co.tal, static_cast<std::uint16_t>(r.attempt + 1)));
  }

  void on_main(const sim::Envelope& env) {
    if (env.kind != wire::Kind::SyncRequest) return;
    auto it = index_of_.find(env.src);
    if (it == index_of_.end()) return;
    auto& d = *devices_[it->second];
    sync::SyncRequest req;
    sync::SyncResult result;
    try {
      req = sync::SyncRequest::decode(env.payload);
      result = sync::apply_sync(*main_, req);
    } catch (const Error&) {
      result.status = sync::SyncStatus::Rejected;
      result.reason = sync::RejectReason::MalformedFrame;
    }
    SyncEvent ev;
    ev.cluster = d.home;
    ev.attempt = req.attempt;
    ev.sent_at = env.send_at;
    ev.received_at = sim_.now();
    ev.records = req.records.size();
    ev.request_bytes = env.payload.size();
    ev.status = result.confirmed() ? "confirmed" : "rejected";
    ev.reason = std::string(sync::to_string(result.reason));
    ev.committed = result.committed;
    ev.conflicts = result.conflicts_resolved;
    ev.tampered = env.tampered;
    ev.offline_backlog = d.coord && d.coord->was_offline;
    if (d.coord && d.coord->sync_in_flight) d.coord->sync_event = sync_events_.size();
    sync_events_.push_back(ev);

    const auto cid = req.cluster_id;
    if (env.tampered) {
      ++attacks_.tampered_syncs;
      if (!result.confirmed()) {
        ++attacks_.tamper_detected;
        awaiting_clean_[cid] = req.attempt;
      }
    } else if (auto w = awaiting_clean_.find(cid); w != awaiting_clean_.end()) {
      if (result.confirmed() && req.attempt == w->second + 1) ++attacks_.tamper_recovered;
      awaiting_clean_.erase(w);
    }
    send(sim::kMainNetwork, env.src, wire::Kind::SyncResult, result.encode());
  }

  Scenario s_;
  RunOptions opts_;
  Rng root_;
  sim::Simulator sim_;
  std::shared_ptr<const CredentialBlock> block_;
  std::unique_ptr<sync::MainLedger> main_;
  std::vector<std::pair<bool, std::size_t>> home_of_;
  std::vector<std::unique_ptr<Device>> devices_;
  std::map<DeviceId, std::size_t> index_of_;
  std::map<std::size_t, std::size_t> coordinators_;  // cluster -> device index
  std::map<SessionKey, std::pair<std::uint64_t, std::uint64_t>> counters_;
  std::map<Digest, std::uint16_t> awaiting_clean_;
  std::vector<AuthEvent> auth_events_;
  std::vector<SyncEvent> sync_events_;
  std::shared_ptr<sim::TamperAdversary> tamper_;
  std::shared_ptr<sim::ReplayAdversary> replay_;
  std::shared_ptr<sim::ImpersonationAdversary> impersonation_;
  std::shared_ptr<sim::SpoofAdversary> spoof_;
  AttackCounters attacks_;
  MembershipCounters membership_;
  std::size_t requested_ = 0;
  std::size_t not_ready_ = 0;
  std::size_t malformed_ = 0;
  std::size_t sync_timeouts_ = 0;
  bool started_ = false;
  bool draining_ = false;
};

inline MetricsReport World::report() const {
  MetricsReport r;
  r.scenario = s_;
  r.auth_events = auth_events_;
  r.sync_events = sync_events_;
  r.requested = requested_;
  r.not_ready = not_ready_;
  r.network = sim_.stats();
  r.membership = membership_;
  r.attacks = attacks_;
  r.sync_timeouts = sync_timeouts_;
  if (replay_) r.attacks.replayed_responses = replay_->replayed();
  for (const sim::SessionAttacker* a : {static_cast<const sim::SessionAttacker*>(replay_.get()),
                                        static_cast<const sim::SessionAttacker*>(impersonation_.get()),
                                        static_cast<const sim::SessionAttacker*>(spoof_.get())})
    if (a) r.attacks.forged_responses += a->forged();
  if (spoof_) {
    r.attacks.spoof_beacons = spoof_->beacons_sent();
    for (const auto& d : devices_) {
      if (d->discovery.candidates().contains(spoof_->fake_id())) ++r.attacks.spoof_candidate_admissions;
      if (d->coord && d->coord->roster.members().contains(spoof_->fake_id())) ++r.attacks.spoof_candidate_admissions;
    }
  }

  std::vector<TimeMs> latencies;
  for (const auto& e : auth_events_) {
    if (!e.decided()) continue;
    ++r.decided;
    if (e.outcome == wire::Outcome::Success) ++r.successes;
    latencies.push_back(e.latency());
  }
  r.success_rate = r.decided ? static_cast<double>(r.successes) / static_cast<double>(r.decided) : 0;
  const auto& m = s_.workload_mix;
  const double auth_seconds = (m.online + m.offline) * static_cast<double>(s_.duration_ms) / 1000.0;
  r.throughput_per_s = auth_seconds > 0 ? static_cast<double>(r.decided) / auth_seconds : 0;
  r.mean_latency_ms = mean(latencies);
  r.p50_latency_ms = percentile(latencies, 0.50);
  r.p95_latency_ms = percentile(latencies, 0.95);

  for (const char* mode : {"online", "offline"}) {
    ModeRow row;
    row.mode = mode;
    std::vector<TimeMs> lat;
    double n = 0, proto = 0, coord = 0;
    for (const auto& e : auth_events_) {
      if (!e.decided() || e.mode != mode || e.adversarial) continue;
      ++row.sessions;
      if (e.outcome == wire::Outcome::Success) ++row.successes;
      lat.push_back(e.latency());
      n += static_cast<double>(e.participants);
      proto += static_cast<double>(e.protocol_messages);
      coord += static_cast<double>(e.coordination_messages);
    }
    if (row.sessions) {
      const auto k = static_cast<double>(row.sessions);
      row.mean_latency_ms = mean(lat);
      row.p50_latency_ms = percentile(lat, 0.5);
      row.p95_latency_ms = percentile(lat, 0.95);
      row.mean_cluster_size = n / k;
      row.protocol_messages_per_session = proto / k;
      row.coordination_messages_per_session = coord / k;
    }
    r.modes.push_back(row);
  }
  {
    ModeRow row;
    row.mode = "sync";
    std::vector<TimeMs> dur;
    for (const auto& e : sync_events_) {
      ++row.sessions;
      if (e.status == "confirmed") ++row.successes;
      row.records += e.committed;
      if (e.finished_at) dur.push_back(e.duration());
    }
    row.mean_latency_ms = mean(dur);
    row.p50_latency_ms = percentile(dur, 0.5);
    row.p95_latency_ms = percentile(dur, 0.95);
    const auto& by_kind = r.network.sent_by_kind;
    auto count = [&](wire::Kind k) {
      auto it = by_kind.find(k);
      return it == by_kind.end() ? 0.0 : static_cast<double>(it->second);
    };
    if (count(wire::Kind::SyncRequest) > 0)
      row.messages_per_attempt =
          (count(wire::Kind::SyncRequest) + count(wire::Kind::SyncResult)) / count(wire::Kind::SyncRequest);
    r.modes.push_back(row);
  }

  for (const auto& [c, idx] : coordinators_) {
    const auto& co = *devices_[idx]->coord;
    r.max_active_records = std::max(r.max_active_records, co.max_active);
  }
  r.max_tal_bytes = r.max_active_records * kRecordSize;
  r.main_records = main_->size();
  for (const auto& e : main_->committed()) r.main_superseded += e.superseded;
  r.anomalies = main_->anomalies().size();
  for (const auto& [cid, a] : main_->audits()) r.flagged_clusters += a.flagged;

  // End-state audit.
  auto& audit = r.audit;
  const auto frames = all_tal_frames();
  audit.decided_sessions = r.decided;
  audit.auth_records = static_cast<std::size_t>(
      std::count_if(frames.begin(), frames.end(), [](const Frame& f) { return AuthRecord::decode(f).is_auth(); }));
  audit.records_reconciled = audit.auth_records == audit.decided_sessions;
  for (const auto& [c, idx] : coordinators_) audit.unconfirmed_records += devices_[idx]->coord->tal.active_count();
  audit.main_matches_oracle = main_->committed_frames() == oracle_main_ledger(frames, s_.conflict_window_ms);
  const auto& st = r.network;
  audit.conservation_ok = st.sent + st.injected == st.settled() + sim_.pending_envelopes();
  audit.storage_ok = r.max_tal_bytes <= s_.max_active_records * kRecordSize;

  auto& v = audit.violations;
  if (!audit.records_reconciled)
    v.push_back("auth records (" + std::to_string(audit.auth_records) + ") != decided sessions (" +
                std::to_string(audit.decided_sessions) + ")");
  if (audit.unconfirmed_records == 0 && !audit.main_matches_oracle) v.push_back("main ledger differs from oracle");
  if (audit.unconfirmed_records > 0 && r.flagged_clusters == 0)
    v.push_back(std::to_string(audit.unconfirmed_records) + " records left unconfirmed");
  if (!audit.conservation_ok) v.push_back("message conservation broken");
  if (!audit.storage_ok) v.push_back("active TAL exceeded its cap");
  if (r.attacks.fraudulent_successes > 0)
    v.push_back(std::to_string(r.attacks.fraudulent_successes) + " fraudulent authentications succeeded");
  if (r.attacks.tamper_detected != r.attacks.tampered_syncs) v.push_back("tampered sync accepted");
  if (r.attacks.spoof_candidate_admissions > 0) v.push_back("spoofed identity admitted as candidate");
  if (r.anomalies > 0) v.push_back(std::to_string(r.anomalies) + " membership anomalies");
  return r;
}

inline MetricsReport run_scenario(const Scenario& s, RunOptions opts = {}) {
  World w(s, opts);
  w.run();
  return w.report();
}

/// Per-mode message counts and simulated latencies.
inline std::vector<ModeRow> compare_modes(const Scenario& s) {
  const auto& m = s.workload_mix;
  if (m.online <= 0 || m.offline <= 0 || m.sync <= 0)
    throw Error(ErrorCode::InvalidScenario, "workload_mix: all three phases must be present");
  return run_scenario(s).modes;
}

// ---------------------------------------------------------------------------
// Output

inline json to_json(const ModeRow& m) {
  json j = {{"mode", m.mode},
            {"count", m.sessions},
            {"successes", m.successes},
            {"mean_latency_ms", m.mean_latency_ms},
            {"p50_latency_ms", m.p50_latency_ms},
            {"p95_latency_ms", m.p95_latency_ms}};
  if (m.mode == "sync") {
    j["messages_per_attempt"] = m.messages_per_attempt;
    j["records_committed"] = m.records;
  } else {
    j["mean_cluster_size"] = m.mean_cluster_size;
    j["protocol_messages_per_session"] = m.protocol_messages_per_session;
    j["coordination_messages_per_session"] = m.coordination_messages_per_session;
  }
  return j;
}

inline json to_json(const MetricsReport& r) {
  json modes = json::array();
  for (const auto& m : r.modes) modes.push_back(to_json(m));
  std::size_t refused_degraded = 0, refused_unknown = 0, refused_storage = 0;
  for (const auto& e : r.auth_events) {
    refused_degraded += e.outcome == wire::Outcome::RefusedDegraded;
    refused_unknown += e.outcome == wire::Outcome::RefusedUnknownSubject;
    refused_storage += e.outcome == wire::Outcome::RefusedStorageFull;
  }
  std::size_t confirmed = 0, rejected = 0;
  for (const auto& e : r.sync_events) (e.status == "confirmed" ? confirmed : rejected)++;
  json by_kind = json::object();
  for (const auto& [k, n] : r.network.sent_by_kind) by_kind[std::string(wire::to_string(k))] = n;
  const auto& a = r.attacks;
  return {
      {"scenario", to_json(r.scenario)},
      {"auth",
       {{"requested", r.requested},
        {"not_ready", r.not_ready},
        {"decided", r.decided},
        {"successes", r.successes},
        {"success_rate", r.success_rate},
        {"throughput_per_s", r.throughput_per_s},
        {"mean_latency_ms", r.mean_latency_ms},
        {"p50_latency_ms", r.p50_latency_ms},
        {"p95_latency_ms", r.p95_latency_ms},
        {"refused",
         {{"degraded", refused_degraded}, {"unknown_subject", refused_unknown}, {"storage_full", refused_storage}}}}},
      {"modes", modes},
      {"sync",
       {{"attempts", r.sync_events.size()},
        {"confirmed", confirmed},
        {"rejected", rejected},
        {"timeouts", r.sync_timeouts},
        {"flagged_clusters", r.flagged_clusters}}},
      {"membership",
       {{"formed_clusters", r.membership.formed_clusters},
        {"departures", r.membership.departures},
        {"joins", r.membership.joins},
        {"degraded_refusals", r.membership.degraded_refusals}}},
      {"storage",
       {{"max_tal_bytes", r.max_tal_bytes},
        {"max_active_records", r.max_active_records},
        {"cap_records", r.scenario.max_active_records}}},
      {"main_ledger", {{"records", r.main_records}, {"superseded", r.main_superseded}, {"anomalies", r.anomalies}}},
      {"attacks",
       {{"adversarial_sessions", a.adversarial_sessions},
        {"adversarial_decided", a.adversarial_decided},
        {"fraudulent_successes", a.fraudulent_successes},
        {"fraudulent_response_accepts", a.fraudulent_response_accepts},
        {"replayed_responses", a.replayed_responses},
        {"forged_responses", a.forged_responses},
        {"spoof_beacons", a.spoof_beacons},
        {"spoof_candidate_admissions", a.spoof_candidate_admissions},
        {"tampered_syncs", a.tampered_syncs},
        {"tamper_detected", a.tamper_detected},
        {"tamper_recovered", a.tamper_recovered},
        {"rejected_unknown_challenge", a.unknown_challenge},
        {"rejected_bad_signature", a.bad_signature},
        {"rejected_expired", a.expired},
        {"nonparticipant_verdicts", a.nonparticipant_verdicts}}},
      {"network",
       {{"sent", r.network.sent},
        {"injected", r.network.injected},
        {"delivered", r.network.delivered},
        {"dropped_loss", r.network.dropped_loss},
        {"dropped_partition", r.network.dropped_partition},
        {"consumed", r.network.consumed},
        {"tampered", r.network.tampered},
        {"sent_by_kind", by_kind}}},
      {"audit",
       {{"decided_sessions", r.audit.decided_sessions},
        {"auth_records", r.audit.auth_records},
        {"records_reconciled", r.audit.records_reconciled},
        {"main_matches_oracle", r.audit.main_matches_oracle},
        {"unconfirmed_records", r.audit.unconfirmed_records},
        {"conservation_ok", r.audit.conservation_ok},
        {"storage_ok", r.audit.storage_ok},
        {"violations", r.audit.violations}}},
  };
}

inline std::string auth_events_csv(const MetricsReport& r) {
  std::ostringstream out;
  out << "cluster,subject,request_id,mode,opened_at_ms,decided_at_ms,latency_ms,participants,valid_count,threshold,"
         "outcome,protocol_messages,coordination_messages,adversarial\n";
  for (const auto& e : r.auth_events)
    out << e.cluster << ',' << e.subject << ',' << e.request_id << ',' << e.mode << ',' << e.opened_at << ','
        << e.decided_at << ',' << e.latency() << ',' << e.participants << ',' << e.valid_count << ',' << e.threshold
        << ',' << wire::to_string(e.outcome) << ',' << e.protocol_messages << ',' << e.coordination_messages << ','
        << (e.adversarial ? 1 : 0) << '\n';
  return out.str();
}

inline std::string sync_events_csv(const MetricsReport& r) {
  std::ostringstream out;
  out << "cluster,attempt,sent_at_ms,received_at_ms,finished_at_ms,duration_ms,records,request_bytes,status,reason,"
         "committed,conflicts,tampered,offline_backlog\n";
  for (const auto& e : r.sync_events)
    out << e.cluster << ',' << e.attempt << ',' << e.sent_at << ',' << e.received_at << ',' << e.finished_at << ','
        << e.duration() << ',' << e.records << ',' << e.request_bytes << ',' << e.status << ',' << e.reason << ','
        << e.committed << ',' << e.conflicts << ',' << (e.tampered ? 1 : 0) << ',' << (e.offline_backlog ? 1 : 0)
        << '\n';
  return out.str();
}

/// report.json, auth_events.csv, sync_events.csv, trace.csv, ledger/ — each written atomically.
inline void write_outputs(const World& world, const MetricsReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_atomic(dir / "report.json", to_json(r).dump(2) + "\n");
  io::write_atomic(dir / "auth_events.csv", auth_events_csv(r));
  io::write_atomic(dir / "sync_events.csv", sync_events_csv(r));
  io::write_atomic(dir / "trace.csv", world.sim().trace_csv());
  world.write_ledgers(dir / "ledger");
}

}  // namespace sword::harness
