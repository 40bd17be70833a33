#include <gtest/gtest.h>

#include <tuple>

#include "test_util.hpp"

using namespace sword;
using namespace sword::sync;

namespace {

struct World {
  test::Fleet fleet{12, 21, 10'000'000};
  std::shared_ptr<const CredentialBlock> block = fleet.shared();

  // Cluster over fleet members [from, from+3) with founder joins logged at t=0.
  Tal cluster(std::size_t from, const std::string& name) const {
    Tal tal(hash(name));
    const auto roster = fleet.ids(from, from + 3);
    for (const auto& id : roster) tal.append_membership_event(id, 0, MembershipKind::Join, roster);
    return tal;
  }

  void auth(Tal& tal, std::size_t device, TimeMs ts, bool ok = true) const {
    std::vector<DeviceId> roster{fleet.id(0), fleet.id(1), fleet.id(2)};
    tal.append_auth_record(fleet.id(device), ts, ok, ok ? 3 : 1, 2, hash(std::to_string(ts)), roster);
  }
};

// Tuple-keyed sort and pairwise supersede, independent of order_less.
std::vector<Frame> oracle(std::vector<Frame> all, TimeMs window) {
  auto key = [](const Frame& f) {
    const auto r = AuthRecord::decode(f);
    return std::make_tuple(r.timestamp_ms, r.device.raw, r.cluster_id, f);
  };
  std::sort(all.begin(), all.end(), [&](const Frame& a, const Frame& b) { return key(a) < key(b); });
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<bool> loser(all.size(), false);
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      const auto a = AuthRecord::decode(all[i]), b = AuthRecord::decode(all[j]);
      const bool both = a.type == RecordType::Authentication && a.outcome == 1 && b.type == RecordType::Authentication &&
                        b.outcome == 1;
      if (both && a.device == b.device && a.cluster_id != b.cluster_id && b.timestamp_ms - a.timestamp_ms < window)
        loser[j] = true;
    }
  for (std::size_t i = 0; i < all.size(); ++i)
    if (loser[i]) all[i][3] |= 0x02;
  return all;
}

}  // namespace

TEST(Sync, WireFormatIsBitExact) {
  World w;
  auto tal = w.cluster(0, "a");
  for (TimeMs t = 1; t <= 97; ++t) w.auth(tal, 3, t * 10);
  auto req = prepare_sync(tal, 2);
  ASSERT_EQ(req.records.size(), 100u);
  const auto bytes = req.encode();
  EXPECT_EQ(bytes.size(), 25'670u);
  EXPECT_EQ(SyncRequest::wire_size(100), 25'670u);
  EXPECT_TRUE(std::equal(tal.cluster_id().begin(), tal.cluster_id().end(), bytes.begin()));
  EXPECT_TRUE(std::equal(req.merkle_root.digest.begin(), req.merkle_root.digest.end(), bytes.begin() + 32));
  EXPECT_EQ(bytes[64], 0);
  EXPECT_EQ(bytes[65], 2);
  EXPECT_EQ((bytes[66] << 24) | (bytes[67] << 16) | (bytes[68] << 8) | bytes[69], 100);
  EXPECT_TRUE(std::equal(req.records[0].begin(), req.records[0].end(), bytes.begin() + 70));
  auto back = SyncRequest::decode(bytes);
  EXPECT_EQ(back.records, req.records);
  EXPECT_EQ(back.merkle_root, req.merkle_root);
  EXPECT_EQ(back.attempt, 2);
  auto short_bytes = bytes;
  short_bytes.pop_back();
  EXPECT_THROW(SyncRequest::decode(short_bytes), Error);

  SyncResult r{SyncStatus::Rejected, 7, RejectReason::RootMismatch, 1, 2, 3};
  auto rb = SyncResult::decode(r.encode());
  EXPECT_EQ(rb.watermark, 7u);
  EXPECT_EQ(rb.reason, RejectReason::RootMismatch);
  EXPECT_EQ(rb.attempt, 3);
}

TEST(Sync, PrepareCoversUnconfirmedSuffix) {
  World w;
  auto tal = w.cluster(0, "a");
  for (TimeMs t = 1; t <= 10; ++t) w.auth(tal, 3, t);
  tal.prune_confirmed(3);
  auto req = prepare_sync(tal);
  EXPECT_EQ(req.records.size(), 10u);
  std::vector<Digest> leaves;
  for (const auto& f : tal.active()) leaves.push_back(merkle::leaf_hash(f));
  EXPECT_EQ(req.merkle_root, merkle::build_tree(leaves).root());
  tal.prune_confirmed(13);
  try {
    prepare_sync(tal);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NothingToSync);
  }
}

TEST(Sync, HonestSyncConfirmsAndIsIdempotent) {
  World w;
  MainLedger main(w.block);
  auto tal = w.cluster(0, "a");
  for (TimeMs t = 1; t <= 7; ++t) w.auth(tal, 3 + t % 2, t * 100);
  auto req = prepare_sync(tal);
  EXPECT_TRUE(verify_sync(main, req));
  auto r = apply_sync(main, req);
  EXPECT_TRUE(r.confirmed());
  EXPECT_EQ(r.committed, 10u);
  EXPECT_EQ(r.watermark, 10u);
  EXPECT_EQ(main.size(), 10u);
  auto again = apply_sync(main, req);
  EXPECT_TRUE(again.confirmed());
  EXPECT_EQ(again.committed, 0u);
  EXPECT_EQ(again.watermark, 10u);
  EXPECT_EQ(main.size(), 10u);
  EXPECT_TRUE(main.anomalies().empty());
  for (const auto& f : tal.active()) EXPECT_TRUE(main.contains(f));
}

TEST(Sync, TamperRejectedThenRetransmissionConfirmed) {
  World w;
  MainLedger main(w.block);
  auto tal = w.cluster(0, "a");
  for (TimeMs t = 1; t <= 5; ++t) w.auth(tal, 3, t * 100);
  auto req = prepare_sync(tal);
  auto bad = req;
  bad.records[4][20] ^= 0x40;  // device id byte
  EXPECT_FALSE(verify_sync(main, bad));
  auto r = apply_sync(main, bad);
  EXPECT_FALSE(r.confirmed());
  EXPECT_EQ(r.reason, RejectReason::RootMismatch);
  EXPECT_EQ(main.size(), 0u);
  req.attempt = 1;
  EXPECT_TRUE(apply_sync(main, req).confirmed());
  EXPECT_EQ(main.size(), 8u);
  EXPECT_FALSE(main.flagged(tal.cluster_id()));
}

TEST(Sync, ReorderedFramesRejected) {
  World w;
  MainLedger main(w.block);
  auto tal = w.cluster(0, "a");
  for (TimeMs t = 1; t <= 5; ++t) w.auth(tal, 3, t * 100);
  auto req = prepare_sync(tal);
  std::swap(req.records[2], req.records[5]);
  EXPECT_FALSE(verify_sync(main, req));
  // Re-rooting the reordered list still fails on chain continuity.
  req.merkle_root = merkle::root_of_records(req.records);
  EXPECT_FALSE(verify_sync(main, req));
  EXPECT_EQ(apply_sync(main, req).reason, RejectReason::MalformedFrame);
}

TEST(Sync, DuplicatedTailFrameRejected) {
  World w;
  MainLedger main(w.block);
  auto tal = w.cluster(0, "a");
  w.auth(tal, 3, 100);
  w.auth(tal, 4, 200);  // five frames; duplicating the odd tail aliases the root
  auto req = prepare_sync(tal);
  req.records.push_back(req.records.back());
  EXPECT_TRUE(merkle::verify_root(req.merkle_root, req.records));
  EXPECT_FALSE(verify_sync(main, req));
}

TEST(Sync, ForeignClusterFrameRejected) {
  World w;
  MainLedger main(w.block);
  auto a = w.cluster(0, "a");
  auto b = w.cluster(3, "b");
  auto req = prepare_sync(a);
  req.records.push_back(b.active().front());
  req.merkle_root = merkle::root_of_records(req.records);
  EXPECT_FALSE(verify_sync(main, req));
}

TEST(Sync, PersistentTamperFlagsAtThirdRetransmission) {
  World w;
  MainLedger main(w.block);
  auto tal = w.cluster(0, "a");
  auto req = prepare_sync(tal);
  req.records[0][50] ^= 1;
  for (std::uint16_t attempt = 0; attempt <= kMaxRetransmissions; ++attempt) {
    req.attempt = attempt;
    auto r = apply_sync(main, req);
    EXPECT_FALSE(r.confirmed());
    if (attempt < kMaxRetransmissions) {
      EXPECT_EQ(r.reason, RejectReason::RootMismatch);
      EXPECT_FALSE(main.flagged(tal.cluster_id()));
    } else {
      EXPECT_EQ(r.reason, RejectReason::TooManyAttempts);
      EXPECT_TRUE(main.flagged(tal.cluster_id()));
    }
  }
  EXPECT_EQ(main.size(), 0u);
  EXPECT_EQ(main.audits().at(tal.cluster_id()).rejected_attempts, 4u);
}

TEST(Sync, CrossClusterConflictEarlierWins) {
  World w;
  MainLedger main(w.block);
  auto a = w.cluster(0, "a");
  auto b = w.cluster(3, "b");
  w.auth(a, 9, 5'000);
  w.auth(b, 10, 5'000);  // different device at the same time: no conflict
  w.auth(b, 9, 5'400);
  apply_sync(main, prepare_sync(b));
  auto r = apply_sync(main, prepare_sync(a));
  EXPECT_EQ(r.conflicts_resolved, 1u);
  std::size_t superseded = 0;
  for (const auto& e : main.committed()) {
    const auto rec = AuthRecord::decode(e.frame);
    if (e.superseded) {
      ++superseded;
      EXPECT_EQ(rec.cluster_id, b.cluster_id());
      EXPECT_EQ(rec.timestamp_ms, 5'400u);
    }
  }
  EXPECT_EQ(superseded, 1u);
  EXPECT_EQ(main.size(), 9u);
}

TEST(Sync, EqualTimestampsBreakTiesByDeviceThenCluster) {
  World w;
  auto a = w.cluster(0, "a"), b = w.cluster(3, "b");
  w.auth(a, 9, 7'000);
  w.auth(b, 9, 7'000);
  const auto fa = a.active().back(), fb = b.active().back();
  const bool a_first = std::lexicographical_compare(a.cluster_id().begin(), a.cluster_id().end(),
                                                    b.cluster_id().begin(), b.cluster_id().end());
  EXPECT_EQ(order_less(fa, fb), a_first);
  MainLedger main(w.block);
  auto plan = resolve_conflicts(main, {fa, fb});
  ASSERT_EQ(plan.conflicts.size(), 1u);
  EXPECT_EQ(plan.conflicts[0].authoritative, a_first ? fa : fb);

  w.auth(a, 10, 8'000);
  w.auth(a, 11, 8'000);
  const auto d10 = a.active()[a.active().size() - 2], d11 = a.active().back();
  EXPECT_EQ(order_less(d10, d11), w.fleet.id(10) < w.fleet.id(11));
}

TEST(Sync, ConflictWindowBoundary) {
  World w;
  auto a = w.cluster(0, "a"), b = w.cluster(3, "b");
  w.auth(a, 9, 1'000);
  w.auth(b, 9, 1'999);
  w.auth(b, 9, 2'000);
  MainLedger main(w.block);
  auto plan = resolve_conflicts(main, {a.active().back(), b.active()[3], b.active()[4]});
  EXPECT_EQ(plan.conflicts.size(), 1u);
  MainLedger wide(w.block, 1'001);
  EXPECT_EQ(resolve_conflicts(wide, {a.active().back(), b.active()[3], b.active()[4]}).conflicts.size(), 2u);
}

TEST(Sync, FailuresNeverConflict) {
  World w;
  auto a = w.cluster(0, "a"), b = w.cluster(3, "b");
  w.auth(a, 9, 1'000, false);
  w.auth(b, 9, 1'001);
  MainLedger main(w.block);
  EXPECT_TRUE(resolve_conflicts(main, {a.active().back(), b.active().back()}).conflicts.empty());
}

TEST(Sync, MembershipAnomalies) {
  World w;
  MainLedger main(w.block);
  auto clean = w.cluster(0, "a");
  w.auth(clean, 5, 10);
  EXPECT_TRUE(validate_membership_changes(main, prepare_sync(clean)).empty());

  Tal rogue(hash("rogue"));
  std::vector<DeviceId> roster = w.fleet.ids(0, 3);
  roster.push_back(DeviceId::from_did("did:unregistered"));
  for (const auto& id : roster) rogue.append_membership_event(id, 0, MembershipKind::Join, roster);
  rogue.append_auth_record(w.fleet.id(5), 10, true, 6, 3, hash("x"), roster);
  auto anomalies = validate_membership_changes(main, prepare_sync(rogue));
  ASSERT_EQ(anomalies.size(), 2u);
  EXPECT_EQ(anomalies[0].kind, Anomaly::Kind::UnregisteredJoin);
  EXPECT_EQ(anomalies[1].kind, Anomaly::Kind::TallyExceedsRoster);
  EXPECT_EQ(main.anomalies().size(), 0u);
  // Still committed, but reported.
  EXPECT_TRUE(apply_sync(main, prepare_sync(rogue)).confirmed());
  EXPECT_EQ(main.anomalies().size(), 2u);
}

TEST(Sync, NonDegradedAuthBelowThreeReported) {
  World w;
  MainLedger main(w.block);
  auto tal = w.cluster(0, "a");
  const auto roster = w.fleet.ids(0, 3);
  tal.append_membership_event(w.fleet.id(0), 5, MembershipKind::Departed, w.fleet.ids(1, 3));
  tal.append_auth_record(w.fleet.id(5), 10, false, 0, 2, hash("y"), w.fleet.ids(1, 3));
  tal.append_auth_record(w.fleet.id(5), 11, false, 0, 0, hash("z"), w.fleet.ids(1, 3), true);
  auto anomalies = validate_membership_changes(main, prepare_sync(tal));
  ASSERT_EQ(anomalies.size(), 1u);
  EXPECT_EQ(anomalies[0].kind, Anomaly::Kind::DegradedAuthentication);
  EXPECT_EQ(anomalies[0].timestamp_ms, 10u);
}

TEST(Sync, MainLedgerImageRoundTrip) {
  World w;
  MainLedger main(w.block);
  auto a = w.cluster(0, "a"), b = w.cluster(3, "b");
  w.auth(a, 9, 5'000);
  w.auth(b, 9, 5'400);
  apply_sync(main, prepare_sync(a));
  apply_sync(main, prepare_sync(b));
  const auto dir = std::filesystem::temp_directory_path() / "sword-test-sync";
  std::filesystem::create_directories(dir);
  write_main_ledger(main, dir / "main.swml");
  auto img = read_main_ledger(dir / "main.swml");
  EXPECT_FALSE(img.corrupt);
  EXPECT_EQ(img.frames, main.committed_frames());
  EXPECT_EQ(std::filesystem::file_size(dir / "main.swml"), 4 + 256 * main.size());
  std::filesystem::remove_all(dir);
}

// Random batch boundaries and interleavings always reach the oracle's list.
TEST(SyncProperty, ConvergenceAcrossInterleavings) {
  World w;
  Rng rng(std::uint64_t{77});
  for (int run = 0; run < 40; ++run) {
    std::vector<Tal> tals{w.cluster(0, "a" + std::to_string(run)), w.cluster(3, "b" + std::to_string(run)),
                          w.cluster(6, "c" + std::to_string(run))};
    for (auto& t : tals) {
      TimeMs ts = 0;
      while (t.total_count() < 50) {
        ts += rng.uniform(0, 400);
        w.auth(t, 9 + rng.uniform(0, 2), ts, rng.bernoulli(0.8));
      }
    }
    std::vector<Frame> all;
    for (const auto& t : tals) all.insert(all.end(), t.active().begin(), t.active().end());
    const auto expected = oracle(all, kDefaultConflictWindow);

    MainLedger main(w.block);
    std::vector<std::size_t> sent(3, 0);
    std::uint64_t last_wm[3] = {0, 0, 0};
    while (sent[0] < 50 || sent[1] < 50 || sent[2] < 50) {
      const auto c = rng.uniform(0, 2);
      if (sent[c] == 50) continue;
      const auto upto = rng.uniform(sent[c] + 1, 50);
      auto view = Tal::restore(tals[c].cluster_id(),
                               std::vector<Frame>(tals[c].active().begin(), tals[c].active().begin() + upto), sent[c]);
      auto req = prepare_sync(view);
      auto r = apply_sync(main, req);
      ASSERT_TRUE(r.confirmed());
      ASSERT_GE(r.watermark, last_wm[c]);
      last_wm[c] = r.watermark;
      if (rng.bernoulli(0.3)) {
        ASSERT_TRUE(apply_sync(main, req).confirmed());  // duplicate delivery
      }
      sent[c] = upto;
    }
    ASSERT_EQ(main.committed_frames(), expected) << run;
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(main.watermark(tals[c].cluster_id()), 50u);
  }
}

TEST(SyncProperty, IntegrityGate) {
  World w;
  Rng rng(std::uint64_t{78});
  for (int trial = 0; trial < 200; ++trial) {
    auto tal = w.cluster(0, "g" + std::to_string(trial));
    for (std::uint64_t i = 0; i < rng.uniform(0, 20); ++i) w.auth(tal, 9, 10 + i);
    auto req = prepare_sync(tal);
    req.records[rng.uniform(0, req.records.size() - 1)][rng.uniform(0, 255)] ^=
        static_cast<std::uint8_t>(rng.uniform(1, 255));
    MainLedger main(w.block);
    ASSERT_FALSE(apply_sync(main, req).confirmed());
    ASSERT_EQ(main.size(), 0u);
  }
}

TEST(SyncProperty, ConflictResolutionIgnoresArrivalOrder) {
  World w;
  Rng rng(std::uint64_t{79});
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Frame> frames;
    for (std::size_t c = 0; c < 3; ++c) {
      auto t = w.cluster(c * 3, "p" + std::to_string(trial) + std::to_string(c));
      for (int i = 0; i < 10; ++i) w.auth(t, 9 + rng.uniform(0, 1), 1'000 + i * 3'000 + rng.uniform(0, 2'999));
      frames.insert(frames.end(), t.active().begin(), t.active().end());
    }
    MainLedger main(w.block);
    const auto base = resolve_conflicts(main, frames);
    for (int p = 0; p < 5; ++p) {
      auto shuffled = frames;
      for (std::size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.uniform(0, i)]);
      const auto plan = resolve_conflicts(main, shuffled);
      ASSERT_EQ(plan.ordered, base.ordered);
      std::set<std::pair<Frame, Frame>> x, y;
      for (const auto& c : base.conflicts) x.emplace(c.authoritative, c.superseded);
      for (const auto& c : plan.conflicts) y.emplace(c.authoritative, c.superseded);
      ASSERT_EQ(x, y);
    }
  }
}
