#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace sword;
using namespace sword::sim;

namespace {

DeviceId node(int i) { return DeviceId::from_did("did:sim:" + std::to_string(i)); }

struct Net {
  Simulator sim;
  std::vector<std::pair<TimeMs, std::uint64_t>> seen;  // (time, seq) per delivery

  explicit Net(LinkModel link = {}, std::uint64_t seed = 1) : sim(link, Rng(seed)) {
    for (int i = 0; i < 6; ++i)
      sim.attach(node(i), [this](const Envelope& e) { seen.emplace_back(sim.now(), e.seq); }, "n" + std::to_string(i));
  }
};

// Random traffic with partitions, isolation and heals mixed in.
std::string random_trace(std::uint64_t seed) {
  Net net(LinkModel{1, 50, 0.1}, seed);
  Rng rng(seed + 1000);
  for (TimeMs t = 0; t < 5'000; t += 10) {
    net.sim.run_until(t);
    const auto n = rng.uniform(0, 3);
    for (std::uint64_t k = 0; k < n; ++k)
      net.sim.send(node(static_cast<int>(rng.uniform(0, 5))), node(static_cast<int>(rng.uniform(0, 5))),
                   static_cast<Kind>(rng.uniform(0, 4)), Bytes(rng.uniform(0, 64)));
    if (rng.bernoulli(0.01)) net.sim.partition({{node(0), node(1)}, {node(2)}});
    if (rng.bernoulli(0.01)) net.sim.heal();
  }
  net.sim.run_until(10'000);
  return net.sim.trace_csv();
}

}  // namespace

TEST(Simnet, EqualDeliveryTimesFireInSeqOrder) {
  Net net(LinkModel{10, 10, 0.0});
  std::vector<std::uint64_t> seqs;
  for (int i = 0; i < 20; ++i) seqs.push_back(net.sim.send(node(0), node(1 + i % 5), Kind::Heartbeat, {}));
  net.sim.run_until(100);
  ASSERT_EQ(net.seen.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(net.seen[i].first, 10u);
    EXPECT_EQ(net.seen[i].second, seqs[i]);
  }
}

TEST(Simnet, ActionsAndEnvelopesShareOneQueue) {
  Net net(LinkModel{5, 5, 0.0});
  std::vector<std::string> order;
  net.sim.at(5, [&] { order.push_back("a"); });
  net.sim.send(node(0), node(1), Kind::Beacon, {});
  net.sim.attach(node(1), [&](const Envelope&) { order.push_back("msg"); });
  net.sim.at(5, [&] { order.push_back("b"); });
  net.sim.run_until(5);
  EXPECT_EQ(order, (std::vector<std::string>{"a", "msg", "b"}));
  EXPECT_EQ(net.sim.now(), 5u);
  EXPECT_THROW(net.sim.run_until(4), Error);
}

TEST(Simnet, SameSeedSameTrace) {
  EXPECT_EQ(random_trace(3), random_trace(3));
  EXPECT_NE(random_trace(3), random_trace(4));
}

TEST(Simnet, TraceCsvFormat) {
  Net net(LinkModel{7, 7, 0.0});
  net.sim.send(node(0), node(1), Kind::Challenge, Bytes(112));
  net.sim.run_until(10);
  EXPECT_EQ(net.sim.trace_csv(), "time_ms,seq,src,dst,kind,size_bytes,dropped_flag\n7,0,n0,n1,challenge,112,0\n");
}

TEST(Simnet, PartitionedMessagesAbsentFromTrace) {
  Net net;
  net.sim.partition({{node(0), node(1)}, {node(2), node(3)}});
  net.sim.send(node(0), node(2), Kind::Vote, {});
  net.sim.send(node(0), kMainNetwork, Kind::SyncRequest, {});
  net.sim.send(node(4), kMainNetwork, Kind::SyncRequest, {});  // both unlisted: same group
  net.sim.send(node(0), node(1), Kind::Vote, {});
  net.sim.run_until(1'000);
  EXPECT_EQ(net.sim.trace().size(), 2u);
  for (const auto& e : net.sim.trace()) EXPECT_NE(e.dst, node(2));
  EXPECT_EQ(net.sim.stats().dropped_partition, 2u);
  EXPECT_FALSE(net.sim.reachable(node(1), node(3)));
  net.sim.heal();
  EXPECT_TRUE(net.sim.reachable(node(1), node(3)));
}

TEST(Simnet, OverlappingGroupsRejected) {
  Net net;
  try {
    net.sim.partition({{node(0), node(1)}, {node(1), node(2)}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OverlappingGroups);
  }
  EXPECT_FALSE(net.sim.partitioned());
}

TEST(Simnet, IsolationCutsEveryLink) {
  Net net;
  net.sim.set_isolated(node(2), true);
  EXPECT_FALSE(net.sim.reachable(node(2), node(0)));
  EXPECT_FALSE(net.sim.reachable(node(0), node(2)));
  EXPECT_TRUE(net.sim.reachable(node(2), node(2)));
  net.sim.set_isolated(node(2), false);
  EXPECT_TRUE(net.sim.reachable(node(2), node(0)));
}

TEST(Simnet, HealListenersRun) {
  Net net;
  int healed = 0;
  net.sim.on_heal([&] { ++healed; });
  net.sim.partition({{node(0)}});
  net.sim.heal();
  EXPECT_EQ(healed, 1);
}

namespace {

class DropVotes : public Adversary {
 public:
  std::string_view name() const override { return "drop-votes"; }
  bool intercept(Envelope& env, Simulator&) override { return env.kind != Kind::Vote; }
};

}  // namespace

TEST(Simnet, AdversaryConsumptionIsTracedAsDropped) {
  Net net(LinkModel{1, 1, 0.0});
  net.sim.inject_adversary(std::make_shared<DropVotes>());
  net.sim.send(node(0), node(1), Kind::Vote, {});
  net.sim.send(node(0), node(1), Kind::Beacon, {});
  net.sim.inject(node(5), node(1), Kind::Vote, {});  // injected traffic bypasses interceptors
  net.sim.run_until(10);
  EXPECT_EQ(net.sim.stats().consumed, 1u);
  EXPECT_EQ(net.sim.stats().delivered, 2u);
  EXPECT_EQ(net.sim.stats().injected, 1u);
  ASSERT_EQ(net.sim.trace().size(), 3u);
  EXPECT_TRUE(net.sim.trace()[0].dropped);
}

TEST(Simnet, TamperAdversaryOnlyTouchesFramesOfEarlyAttempts) {
  Net net(LinkModel{1, 1, 0.0});
  auto tamper = std::make_shared<TamperAdversary>(Rng(std::uint64_t{5}), 1.0, 0);
  net.sim.inject_adversary(tamper);
  Bytes captured;
  net.sim.attach(kMainNetwork, [&](const Envelope& e) { captured = e.payload; });
  Rng rng(std::uint64_t{6});
  auto tal = test::random_tal(rng, 3);
  auto req = sync::prepare_sync(tal, 0);
  const auto clean = req.encode();
  net.sim.send(node(0), kMainNetwork, Kind::SyncRequest, clean);
  net.sim.run_until(5);
  ASSERT_EQ(captured.size(), clean.size());
  std::size_t diffs = 0;
  for (std::size_t i = 0; i < clean.size(); ++i)
    if (captured[i] != clean[i]) {
      ++diffs;
      EXPECT_GE(i, 70u);
    }
  EXPECT_EQ(diffs, 1u);
  EXPECT_FALSE(sync::verify_sync(sync::MainLedger{}, sync::SyncRequest::decode(captured)));

  req.attempt = 1;
  net.sim.send(node(0), kMainNetwork, Kind::SyncRequest, req.encode());
  net.sim.run_until(10);
  EXPECT_EQ(captured, req.encode());
  EXPECT_EQ(tamper->tampered(), 1u);
  EXPECT_EQ(net.sim.stats().tampered, 1u);
}

TEST(Simnet, LossRateMatchesModel) {
  Net net(LinkModel{1, 5, 0.2}, 9);
  for (int i = 0; i < 20'000; ++i) net.sim.send(node(0), node(1), Kind::Heartbeat, {});
  net.sim.run_until(100);
  const double rate = static_cast<double>(net.sim.stats().dropped_loss) / 20'000.0;
  EXPECT_NEAR(rate, 0.2, 0.015);
  for (const auto& [t, seq] : net.seen) {
    EXPECT_GE(t, 1u);
    EXPECT_LE(t, 5u);
  }
}

// Every envelope settles exactly once and delivery times never decrease.
TEST(SimnetProperty, ConservationAndMonotoneClock) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Net net(LinkModel{1, 80, 0.05}, seed);
    net.sim.inject_adversary(std::make_shared<DropVotes>());
    Rng rng(seed * 7);
    std::uint64_t sends = 0;
    for (TimeMs t = 0; t < 3'000; t += 5) {
      net.sim.run_until(t);
      for (std::uint64_t k = 0; k < rng.uniform(0, 4); ++k) {
        net.sim.send(node(static_cast<int>(rng.uniform(0, 5))), node(static_cast<int>(rng.uniform(0, 5))),
                     static_cast<Kind>(rng.uniform(0, 4)), {});
        ++sends;
      }
      if (rng.bernoulli(0.02)) net.sim.partition({{node(0), node(1), node(2)}});
      if (rng.bernoulli(0.02)) net.sim.heal();
    }
    net.sim.run_until(10'000);
    const auto& s = net.sim.stats();
    ASSERT_EQ(s.sent, sends);
    ASSERT_EQ(s.settled(), sends);
    ASSERT_EQ(net.sim.pending_envelopes(), 0u);
    ASSERT_EQ(net.seen.size(), s.delivered);
    std::set<std::uint64_t> unique;
    TimeMs last = 0;
    for (const auto& [t, seq] : net.seen) {
      ASSERT_GE(t, last);
      last = t;
      ASSERT_TRUE(unique.insert(seq).second);
    }
  }
}
