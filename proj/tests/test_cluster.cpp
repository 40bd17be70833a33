#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace sword;
using namespace sword::cluster;

namespace {

// Nodes [0, n) of `fleet` exchange beacons and announcements at `now`.
std::vector<NodeState> discover(const test::Fleet& fleet, std::size_t n, TimeMs now) {
  std::vector<NodeState> nodes;
  for (std::size_t i = 0; i < n; ++i) nodes.emplace_back(fleet.id(i), fleet.shared());
  for (auto& a : nodes)
    for (const auto& b : nodes) a.handle_beacon(b.emit_beacon(now), now);
  std::vector<CandidateAnnouncement> ann;
  for (std::size_t i = 0; i < n; ++i) ann.push_back(nodes[i].announce(fleet.keys(i), now));
  for (auto& a : nodes)
    for (const auto& x : ann)
      if (x.sender != a.self()) a.handle_announcement(x, now);
  return nodes;
}

Endorser endorser(const test::Fleet& fleet, const std::vector<NodeState>& nodes, TimeMs now) {
  return [&fleet, &nodes, now](const DeviceId& id, const FormationProposal& p) -> std::optional<Signature> {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].self() == id) return endorse_formation(nodes[i], p, fleet.keys(i), now);
    return std::nullopt;
  };
}

ClusterRoster roster_of(const test::Fleet& fleet, std::size_t n) {
  return ClusterRoster(hash("cluster"), 0, fleet.ids(0, n));
}

}  // namespace

TEST(Cluster, ThresholdExamples) {
  EXPECT_EQ(threshold_for(3), 2u);
  EXPECT_EQ(threshold_for(5), 3u);
  EXPECT_EQ(threshold_for(7), 5u);
  EXPECT_EQ(threshold_for(10), 6u);
}

// Ceiling of 0.6n and 2n/3 by the smallest integer satisfying the inequality.
TEST(ClusterProperty, ThresholdAndQuorumMatchSearchOracle) {
  for (std::size_t n = 1; n <= 1000; ++n) {
    std::size_t t = 0;
    while (5 * t < 3 * n) ++t;
    std::size_t q = 0;
    while (3 * q < 2 * n) ++q;
    ASSERT_EQ(threshold_for(n), t) << n;
    ASSERT_EQ(join_quorum(n), q) << n;
    if (n >= 3) {
      ASSERT_GT(2 * threshold_for(n), n) << n;
    }
  }
}

TEST(Cluster, CurrentThresholdRaisesDegradedBelowThree) {
  test::Fleet fleet(5);
  auto roster = roster_of(fleet, 5);
  EXPECT_EQ(current_threshold(roster), 3u);
  roster.mark_departed(fleet.id(0), 1);
  roster.mark_departed(fleet.id(1), 1);
  EXPECT_EQ(current_threshold(roster), 2u);
  EXPECT_EQ(roster.state(), ClusterState::Active);
  roster.mark_departed(fleet.id(2), 1);
  EXPECT_EQ(roster.state(), ClusterState::Degraded);
  try {
    current_threshold(roster);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegradedMode);
  }
}

TEST(Cluster, BeaconsCarryBlockHashAndClock) {
  test::Fleet fleet(2);
  NodeState a(fleet.id(0), fleet.shared()), b(fleet.id(1), fleet.shared());
  EXPECT_EQ(a.emit_beacon(5).block_state_hash, b.emit_beacon(5).block_state_hash);
  EXPECT_EQ(a.emit_beacon(1234).sent_at, 1234u);
  const auto bc = a.emit_beacon(7);
  EXPECT_EQ(Beacon::decode(bc.encode()).sender, bc.sender);
  EXPECT_EQ(Beacon::decode(bc.encode()).block_state_hash, bc.block_state_hash);

  // A node holding an older block advertises that older hash.
  Rng rng(std::uint64_t{1});
  auto newer = register_device(fleet.block, "did:late", 1'000'000, rng).block;
  NodeState c(fleet.id(0), std::make_shared<const CredentialBlock>(newer));
  EXPECT_NE(c.emit_beacon(0).block_state_hash, a.emit_beacon(0).block_state_hash);
}

TEST(Cluster, BeaconAcceptanceRules) {
  test::Fleet fleet(3);
  NodeState a(fleet.id(0), fleet.shared());
  EXPECT_TRUE(a.handle_beacon(NodeState(fleet.id(1), fleet.shared()).emit_beacon(0), 0));
  EXPECT_FALSE(a.handle_beacon(a.emit_beacon(0), 0));

  // Unregistered sender.
  Beacon stranger{DeviceId::from_did("did:stranger"), fleet.block.state_hash(), fleet.block.version(), 0};
  EXPECT_FALSE(a.handle_beacon(stranger, 0));

  // Asymmetric: a device registered only in one copy of the block.
  Rng rng(std::uint64_t{2});
  auto reg = register_device(fleet.block, "did:extra", 1'000'000, rng);
  NodeState extra(reg.credential.did, std::make_shared<const CredentialBlock>(reg.block));
  NodeState updated(fleet.id(2), std::make_shared<const CredentialBlock>(reg.block));
  EXPECT_FALSE(a.handle_beacon(extra.emit_beacon(0), 0));      // unknown to a, and hash differs
  EXPECT_FALSE(a.handle_beacon(updated.emit_beacon(0), 0));    // registered, but divergent hash
  EXPECT_TRUE(updated.handle_beacon(extra.emit_beacon(0), 0));  // same newer block
  EXPECT_FALSE(extra.handle_beacon(a.emit_beacon(0), 0));      // older hash rejected
  EXPECT_EQ(a.candidates().size(), 1u);
}

TEST(Cluster, CandidatesExpireAfterFreshnessWindow) {
  test::Fleet fleet(2);
  NodeState a(fleet.id(0), fleet.shared());
  a.handle_beacon(NodeState(fleet.id(1), fleet.shared()).emit_beacon(0), 1'000);
  EXPECT_TRUE(a.is_fresh_candidate(fleet.id(1), 1'000 + kBeaconFreshness));
  EXPECT_FALSE(a.is_fresh_candidate(fleet.id(1), 1'001 + kBeaconFreshness));
}

TEST(Cluster, ThreeNodesFormWithThresholdTwo) {
  test::Fleet fleet(3);
  auto nodes = discover(fleet, 3, 100);
  auto f = try_form_cluster(nodes[0], 100, endorser(fleet, nodes, 100));
  EXPECT_EQ(f.roster.active_count(), 3u);
  EXPECT_EQ(current_threshold(f.roster), 2u);
  EXPECT_TRUE(verify_certificate(f.certificate, fleet.block));
  EXPECT_EQ(f.certificate.signatures.size(), 3u);
  EXPECT_EQ(f.roster.cluster_id(), derive_cluster_id(fleet.ids(0, 3), 100));
  Tal tal(f.roster.cluster_id());
  record_formation(tal, f.roster);
  EXPECT_EQ(tal.total_count(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(tal.record(i).type, RecordType::Membership);
}

TEST(Cluster, TwoNodesAreInsufficient) {
  test::Fleet fleet(2);
  auto nodes = discover(fleet, 2, 0);
  try {
    try_form_cluster(nodes[0], 0, endorser(fleet, nodes, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientPeers);
  }
}

TEST(Cluster, ExpiredFounderExcluded) {
  // Node 4's credential expires before the others are even issued.
  Rng rng(std::uint64_t{3});
  test::Fleet fleet(4, 3, 1'000'000, 0);
  auto late = register_device(fleet.block, "did:test:4", 10, rng, 0);
  fleet.block = late.block;
  fleet.regs.push_back(late);
  auto nodes = discover(fleet, 5, 500);
  auto f = try_form_cluster(nodes[0], 500, endorser(fleet, nodes, 500));
  EXPECT_EQ(f.roster.active_count(), 4u);
  EXPECT_FALSE(f.roster.is_active(fleet.id(4)));
}

TEST(Cluster, PartialViewsShrinkMutualSet) {
  test::Fleet fleet(4);
  auto nodes = discover(fleet, 4, 0);
  // Node 3 never heard from node 2; the set drops one of the pair.
  NodeState blind(fleet.id(3), fleet.shared());
  for (std::size_t i : {0u, 1u}) blind.handle_beacon(nodes[i].emit_beacon(0), 0);
  nodes[0].handle_announcement(blind.announce(fleet.keys(3), 0), 0);
  const auto set = nodes[0].mutual_set(0);
  EXPECT_EQ(set.size(), 3u);
  EXPECT_TRUE(std::find(set.begin(), set.end(), fleet.id(0)) != set.end());
}

TEST(Cluster, EndorsementRefusedForUnknownFounder) {
  test::Fleet fleet(4);
  auto nodes = discover(fleet, 3, 0);
  auto p = FormationProposal::make(fleet.ids(0, 4), 0);
  EXPECT_FALSE(endorse_formation(nodes[0], p, fleet.keys(0), 0));
  auto own = FormationProposal::make(fleet.ids(1, 4), 0);
  EXPECT_FALSE(endorse_formation(nodes[0], own, fleet.keys(0), 0));
  auto ok = FormationProposal::make(fleet.ids(0, 3), 0);
  EXPECT_TRUE(endorse_formation(nodes[0], ok, fleet.keys(0), 0));
  EXPECT_EQ(FormationProposal::decode(ok.encode()).cluster_id, ok.cluster_id);
}

TEST(Cluster, SpoofedAnnouncementIgnored) {
  test::Fleet fleet(3);
  auto nodes = discover(fleet, 3, 0);
  NodeState a(fleet.id(0), fleet.shared());
  a.handle_beacon(nodes[1].emit_beacon(0), 0);
  auto forged = nodes[1].announce(fleet.keys(2), 0);  // signed with the wrong key
  EXPECT_FALSE(a.handle_announcement(forged, 0));
  EXPECT_TRUE(a.handle_announcement(nodes[1].announce(fleet.keys(1), 0), 0));
}

TEST(Cluster, JoinVoteArithmetic) {
  test::Fleet fleet(8, 4, 1'000'000);
  auto vote_on = [&](std::size_t n, std::size_t approve) {
    auto roster = roster_of(fleet, n);
    auto ballot = propose_join(roster, fleet.id(7), 10);
    for (std::size_t i = 0; i < n; ++i) cast_vote(ballot, fleet.block, make_vote(fleet.id(i), fleet.keys(i), fleet.block, ballot, i < approve, 20));
    return tally_join(ballot, fleet.block, 20);
  };
  EXPECT_TRUE(vote_on(3, 2));
  EXPECT_FALSE(vote_on(3, 1));
  EXPECT_FALSE(vote_on(6, 3));
  EXPECT_TRUE(vote_on(6, 4));
}

TEST(Cluster, ExpiredApplicantRejectedDespiteUnanimity) {
  test::Fleet fleet(6, 5, 1'000'000);
  Rng rng(std::uint64_t{5});
  auto app = register_device(fleet.block, "did:applicant", 100, rng, 0);
  const auto& block = app.block;
  auto roster = roster_of(fleet, 6);
  auto ballot = propose_join(roster, app.credential.did, 50);
  for (std::size_t i = 0; i < 6; ++i) {
    Vote v{fleet.id(i), true, 60, sign(fleet.keys(i).secret_key, ballot.vote_bytes(true))};
    cast_vote(ballot, block, v);
  }
  EXPECT_EQ(ballot.approvals(), 6u);
  EXPECT_TRUE(tally_join(ballot, block, 99));
  EXPECT_FALSE(tally_join(ballot, block, 200));
  // Honest voters check the credential themselves.
  EXPECT_FALSE(make_vote(fleet.id(0), fleet.keys(0), block, ballot, true, 200).approve);
}

TEST(Cluster, VoteSoundness) {
  test::Fleet fleet(6, 6, 1'000'000);
  auto roster = roster_of(fleet, 4);
  EXPECT_THROW(propose_join(roster, fleet.id(0), 0), Error);
  auto ballot = propose_join(roster, fleet.id(5), 0);
  const auto v0 = make_vote(fleet.id(0), fleet.keys(0), fleet.block, ballot, true, 1);
  EXPECT_TRUE(cast_vote(ballot, fleet.block, v0));
  EXPECT_FALSE(cast_vote(ballot, fleet.block, v0));
  try {
    cast_vote(ballot, fleet.block, make_vote(fleet.id(4), fleet.keys(4), fleet.block, ballot, true, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownVoter);
  }
  auto flipped = make_vote(fleet.id(1), fleet.keys(1), fleet.block, ballot, false, 1);
  flipped.approve = true;
  EXPECT_FALSE(cast_vote(ballot, fleet.block, flipped));
  EXPECT_FALSE(cast_vote(ballot, fleet.block, make_vote(fleet.id(2), fleet.keys(2), fleet.block, ballot, true,
                                                          ballot.deadline + 1)));
  EXPECT_EQ(ballot.approvals(), 1u);
}

TEST(Cluster, AdmissionLogsJoinAndBuildsCertificate) {
  test::Fleet fleet(4, 7, 1'000'000);
  auto roster = roster_of(fleet, 3);
  Tal tal(roster.cluster_id());
  auto ballot = propose_join(roster, fleet.id(3), 5);
  for (std::size_t i = 0; i < 3; ++i) cast_vote(ballot, fleet.block, make_vote(fleet.id(i), fleet.keys(i), fleet.block, ballot, true, 6));
  ASSERT_TRUE(tally_join(ballot, fleet.block, 6));
  auto cert = admit_member(roster, tal, ballot, 7);
  EXPECT_EQ(roster.active_count(), 4u);
  EXPECT_TRUE(verify_certificate(cert, fleet.block));
  EXPECT_EQ(cert.roster_snapshot_hash, roster.snapshot_hash());
  ASSERT_EQ(tal.total_count(), 1u);
  EXPECT_EQ(tal.record(0).outcome, static_cast<std::uint8_t>(MembershipKind::Join));
}

TEST(Cluster, HeartbeatDepartureBoundary) {
  test::Fleet fleet(3);
  auto sweep_after = [&](TimeMs elapsed) {
    auto roster = roster_of(fleet, 3);
    HeartbeatTracker hb;
    Tal tal(roster.cluster_id());
    for (std::size_t i = 0; i < 3; ++i) hb.process_heartbeat(fleet.id(i), 1'000);
    hb.process_heartbeat(fleet.id(0), 1'000 + elapsed);
    hb.process_heartbeat(fleet.id(1), 1'000 + elapsed);
    auto gone = sweep_departures(roster, hb, tal, 1'000 + elapsed);
    return std::make_tuple(gone, roster, tal, hb.missed_count(fleet.id(2), 1'000 + elapsed));
  };
  auto [g1, r1, t1, m1] = sweep_after(60'001);
  EXPECT_TRUE(g1.empty());
  EXPECT_EQ(m1, 2u);
  auto [g2, r2, t2, m2] = sweep_after(89'999);
  EXPECT_TRUE(g2.empty());
  auto [g3, r3, t3, m3] = sweep_after(90'000);
  ASSERT_EQ(g3.size(), 1u);
  auto [g4, r4, t4, m4] = sweep_after(95'000);
  ASSERT_EQ(g4.size(), 1u);
  EXPECT_EQ(g4[0], fleet.id(2));
  EXPECT_EQ(r4.state(), ClusterState::Degraded);
  EXPECT_EQ(r4.departed_at(fleet.id(2)), 96'000u);
  ASSERT_EQ(t4.total_count(), 1u);
  EXPECT_EQ(t4.record(0).outcome, static_cast<std::uint8_t>(MembershipKind::Departed));
  EXPECT_TRUE(t4.record(0).degraded());
}

TEST(Cluster, DepartureLeavesEarlierRecordsValid) {
  test::Fleet fleet(5);
  auto roster = roster_of(fleet, 5);
  Tal tal(roster.cluster_id());
  const auto active = roster.active_members();
  tal.append_auth_record(fleet.id(0), 10, true, 4, 3, hash("c"), active);
  const auto before = tal.active();
  const auto root = tal.commit_root();
  HeartbeatTracker hb;
  for (std::size_t i = 0; i < 5; ++i) hb.process_heartbeat(fleet.id(i), i == 4 ? 0 : 100'000);
  sweep_departures(roster, hb, tal, 100'000);
  EXPECT_FALSE(roster.is_active(fleet.id(4)));
  EXPECT_EQ(tal.active().front(), before.front());
  EXPECT_TRUE(merkle::verify_root(root, std::span(tal.active()).first(1)));
  EXPECT_FALSE(tal.verify_chain());
}
