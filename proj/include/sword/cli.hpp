#pragma once

#include <atomic>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "sword/harness.hpp"

namespace sword::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitViolation = 2;

struct CliConfig {
  std::string subcommand;
  std::vector<std::string> scenarios;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "sword-out";
  int verbosity = 0;
  unsigned parallel = 1;
  unsigned runs = 1;
  std::filesystem::path ledger_dir;
};

namespace detail {

inline harness::Scenario load(const std::string& path, const CliConfig& cfg) {
  auto s = harness::load_scenario(path);
  if (cfg.seed) s.seed = *cfg.seed;
  return s;
}

struct Job {
  harness::Scenario scenario;
  std::filesystem::path out;
};

struct JobResult {
  harness::MetricsReport report;
  std::string error;
};

/// Runs jobs on up to `parallel` threads; each simulation is independent.
inline std::vector<JobResult> run_jobs(const std::vector<Job>& jobs, const CliConfig& cfg, std::ostream& log) {
  std::vector<JobResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (auto i = next++; i < jobs.size(); i = next++) {
      std::ostringstream local;
      harness::RunOptions opts{cfg.verbosity > 0 ? &local : nullptr, cfg.verbosity};
      try {
        harness::World world(jobs[i].scenario, opts);
        world.run();
        results[i].report = world.report();
        harness::write_outputs(world, results[i].report, jobs[i].out);
      } catch (const std::exception& e) {
        results[i].error = e.what();
      }
      std::lock_guard lock(log_mutex);
      log << local.str();
    }
  };
  const auto n = std::max(1u, std::min<unsigned>(cfg.parallel, static_cast<unsigned>(jobs.size())));
  std::vector<std::thread> threads;
  for (unsigned t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  return results;
}

inline void summarize(std::ostream& out, const Job& job, const harness::MetricsReport& r) {
  out << job.scenario.name << " (seed " << job.scenario.seed << "): " << r.decided << " decided, success rate "
      << r.success_rate << ", p50 " << r.p50_latency_ms << " ms, p95 " << r.p95_latency_ms << " ms, "
      << r.sync_events.size() << " sync attempts, " << r.main_records << " main ledger records -> "
      << job.out.string() << '\n';
  for (const auto& v : r.audit.violations) out << "  violation: " << v << '\n';
}

}  // namespace detail

inline int cmd_run(const CliConfig& cfg, std::ostream& out, std::ostream& err) {
  std::vector<detail::Job> jobs;
  try {
    for (const auto& path : cfg.scenarios) {
      auto s = detail::load(path, cfg);
      auto dir = cfg.scenarios.size() == 1 ? cfg.out : cfg.out / std::filesystem::path(path).stem();
      jobs.push_back({std::move(s), std::move(dir)});
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
  const auto results = detail::run_jobs(jobs, cfg, err);
  int code = kExitOk;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!results[i].error.empty()) {
      err << "error: " << jobs[i].scenario.name << ": " << results[i].error << '\n';
      code = std::max(code, kExitInvalid);
      continue;
    }
    detail::summarize(out, jobs[i], results[i].report);
    if (!results[i].report.audit.violations.empty()) code = kExitViolation;
  }
  return code;
}

/// Fails on any fraudulent success, any tampered sync that was not rejected,
/// or any rejected tamper without a confirmed clean retransmission.
inline int cmd_attack_suite(const CliConfig& cfg, std::ostream& out, std::ostream& err) {
  harness::Scenario base;
  try {
    base = detail::load(cfg.scenarios.at(0), cfg);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
  auto& adv = base.adversary;
  adv.replay = adv.spoof = adv.impersonation = adv.tamper = true;
  std::vector<detail::Job> jobs;
  for (unsigned i = 0; i < cfg.runs; ++i) {
    auto s = base;
    s.seed = base.seed + i;
    jobs.push_back({s, cfg.runs == 1 ? cfg.out : cfg.out / ("run-" + std::to_string(i))});
  }
  const auto results = detail::run_jobs(jobs, cfg, err);
  int code = kExitOk;
  std::size_t fraud = 0, tampered = 0, detected = 0, recovered = 0, forged = 0, replayed = 0, spoofed = 0;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!results[i].error.empty()) {
      err << "error: " << results[i].error << '\n';
      code = std::max(code, kExitInvalid);
      continue;
    }
    const auto& a = results[i].report.attacks;
    fraud += a.fraudulent_successes + a.fraudulent_response_accepts + a.spoof_candidate_admissions;
    tampered += a.tampered_syncs;
    detected += a.tamper_detected;
    recovered += a.tamper_recovered;
    forged += a.forged_responses;
    replayed += a.replayed_responses;
    spoofed += a.spoof_beacons;
    if (!results[i].report.audit.violations.empty()) {
      detail::summarize(out, jobs[i], results[i].report);
      code = kExitViolation;
    }
  }
  out << "runs: " << jobs.size() << "\nforged responses: " << forged << "\nreplayed responses: " << replayed
      << "\nspoof beacons: " << spoofed << "\nfraudulent successes: " << fraud << "\ntampered syncs: " << tampered
      << "\ntamper detected: " << detected << "\ntamper recovered: " << recovered << '\n';
  if (fraud > 0 || detected != tampered || recovered != detected) code = kExitViolation;
  out << (code == kExitOk ? "attack suite: PASS" : "attack suite: FAIL") << '\n';
  return code;
}

namespace detail {

inline std::string frame_line(std::size_t i, const Frame& f) {
  const auto r = AuthRecord::decode(f);
  std::ostringstream s;
  s << "  [" << i << "] ts=" << r.timestamp_ms << " device=" << r.device.short_hex() << ' ';
  if (r.type == RecordType::Membership) {
    switch (static_cast<MembershipKind>(r.outcome)) {
      case MembershipKind::Join: s << "join"; break;
      case MembershipKind::Leave: s << "leave"; break;
      case MembershipKind::Departed: s << "departed"; break;
    }
  } else {
    s << (r.is_success() ? "auth-success" : "auth-failure") << " valid=" << r.valid_count << '/' << r.threshold;
  }
  if (r.degraded()) s << " degraded";
  if (f[record_layout::kFlags] & record_flags::kSuperseded) s << " superseded";
  return s.str();
}

inline Frame without_superseded(Frame f) {
  f[record_layout::kFlags] &= static_cast<std::uint8_t>(~record_flags::kSuperseded);
  return f;
}

}  // namespace detail

/**
 * Dumps and verifies every ledger file in `dir` (or `dir/ledger`). Confirmed
 * TAL frames are also checked against the main ledger image when present.
 */
inline int cmd_inspect_ledger(const CliConfig& cfg, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  auto dir = cfg.ledger_dir;
  if (fs::is_directory(dir / "ledger")) dir /= "ledger";
  if (!fs::is_directory(dir)) {
    err << "error: " << dir.string() << " is not a directory\n";
    return kExitInvalid;
  }
  std::vector<fs::path> tals;
  std::optional<fs::path> main_path;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".swtl") tals.push_back(e.path());
    if (e.path().extension() == ".swml") main_path = e.path();
  }
  std::sort(tals.begin(), tals.end());
  if (tals.empty() && !main_path) {
    err << "error: no ledger files in " << dir.string() << '\n';
    return kExitInvalid;
  }
  int code = kExitOk;
  const bool dump = cfg.verbosity > 0;

  std::set<Frame> main_frames;
  if (main_path) {
    try {
      const auto img = sync::read_main_ledger(*main_path);
      out << main_path->filename().string() << ": " << img.frames.size() << " committed records\n";
      for (std::size_t i = 0; i < img.frames.size(); ++i) {
        if (dump) out << detail::frame_line(i, img.frames[i]) << '\n';
        main_frames.insert(detail::without_superseded(img.frames[i]));
      }
      if (img.corrupt) {
        out << "  CORRUPT frame " << img.corrupt->frame_index << ": " << img.corrupt->reason << '\n';
        code = kExitViolation;
      }
    } catch (const Error& e) {
      err << "error: " << main_path->string() << ": " << e.what() << '\n';
      return kExitInvalid;
    }
  }

  for (const auto& path : tals) {
    TalLoadResult loaded;
    try {
      loaded = load_file(path);
    } catch (const Error& e) {
      err << "error: " << path.string() << ": " << e.what() << '\n';
      code = std::max(code, kExitInvalid);
      continue;
    }
    const auto& tal = loaded.tal;
    const auto frames = [&] {
      std::vector<Frame> all(tal.archive().begin(), tal.archive().end());
      all.insert(all.end(), tal.active().begin(), tal.active().end());
      return all;
    }();
    out << path.filename().string() << ": cluster " << to_hex(tal.cluster_id()).substr(0, 16) << ", " << frames.size()
        << " frames (" << tal.archive().size() << " confirmed, " << tal.active_count() << " active), root "
        << to_hex(tal.commit_root().digest) << '\n';
    for (std::size_t i = 0; i < frames.size() && dump; ++i) out << detail::frame_line(i, frames[i]) << '\n';
    if (loaded.corrupt) {
      out << "  CORRUPT frame " << loaded.corrupt->frame_index << ": " << loaded.corrupt->reason << '\n';
      code = kExitViolation;
      continue;
    }
    if (main_path) {
      for (std::size_t i = 0; i < tal.archive().size(); ++i)
        if (!main_frames.contains(frames[i])) {
          out << "  CORRUPT frame " << i << ": confirmed record missing from main ledger\n";
          code = kExitViolation;
          break;
        }
    }
  }
  out << (code == kExitOk ? "ledger check: OK" : "ledger check: FAILED") << '\n';
  return code;
}

/// Exhaustive small-case checks: credential subsets, threshold sweep, Merkle mutations.
inline int cmd_selftest(const CliConfig&, std::ostream& out, std::ostream&) {
  std::size_t failures = 0;

  {
    std::size_t mismatches = 0, cases = 0;
    constexpr std::size_t kDevices = 8;
    constexpr TimeMs kValidity = 1'000;
    std::vector<DeviceId> ids;
    for (std::size_t i = 0; i < kDevices; ++i) ids.push_back(DeviceId::from_did("did:selftest:" + std::to_string(i)));
    for (unsigned mask = 0; mask < (1u << kDevices); ++mask) {
      CredentialBlock block;
      Rng rng(std::uint64_t{mask});
      for (std::size_t i = 0; i < kDevices; ++i)
        if (mask & (1u << i)) block = register_device(block, "did:selftest:" + std::to_string(i), kValidity, rng, 0).block;
      for (TimeMs now : {kValidity - 1, kValidity, kValidity + 1})
        for (std::size_t i = 0; i < kDevices; ++i, ++cases)
          if (validate_credential(block, ids[i], now) != (((mask >> i) & 1u) && now < kValidity)) ++mismatches;
    }
    out << "credential subsets: " << cases << " cases, " << mismatches << " mismatches\n";
    failures += mismatches;
  }

  {
    std::size_t violations = 0, cases = 0;
    for (std::size_t n = 3; n <= 12; ++n) {
      const auto t = cluster::threshold_for(n);
      for (std::size_t k = 0; k <= n; ++k, ++cases) {
        Tal tal(Digest{});
        auth::AuthSession s;
        s.threshold = t;
        s.valid_count = k;
        const bool ok = auth::decide(s, tal, 1) == auth::AuthResult::Success;
        if (ok != (10 * k >= 6 * n)) ++violations;
      }
    }
    for (std::size_t n = 3; n <= 100; ++n)
      if (2 * cluster::threshold_for(n) <= n) ++violations;
    out << "threshold sweep: " << cases << " cases, " << violations << " violations\n";
    failures += violations;
  }

  {
    Rng rng(std::uint64_t{0x5e1f});
    std::size_t undetected = 0, trials = 0;
    for (std::size_t len = 1; len <= 16; ++len) {
      std::vector<Frame> frames(len);
      for (auto& f : frames) rng.fill(f);
      const auto root = merkle::root_of_records(frames);
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t byte = 0; byte < kRecordSize; byte += 17, ++trials) {
          auto copy = frames;
          copy[i][byte] ^= static_cast<std::uint8_t>(rng.uniform(1, 255));
          if (merkle::verify_root(root, copy)) ++undetected;
        }
      if (len > 1) {
        auto swapped = frames;
        std::swap(swapped[0], swapped[len - 1]);
        ++trials;
        if (merkle::verify_root(root, swapped)) ++undetected;
        auto truncated = frames;
        truncated.pop_back();
        ++trials;
        if (merkle::verify_root(root, truncated)) ++undetected;
      }
    }
    out << "merkle mutations: " << trials << " trials, " << undetected << " undetected\n";
    failures += undetected;
  }

  out << (failures == 0 ? "selftest: PASS" : "selftest: FAIL") << '\n';
  return failures == 0 ? kExitOk : kExitViolation;
}

inline int main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"sword: offline cluster authentication simulator"};
  app.require_subcommand(1);
  CliConfig cfg;
  std::uint64_t seed = 0;
  std::string out_dir = cfg.out.string();

  // CLI11 writes a flag's variable even for subcommands that were not invoked.
  int run_v = 0, attack_v = 0, inspect_v = 0;
  auto common = [&](CLI::App* sub, int& verbosity) {
    sub->add_option("--seed", seed, "Override the scenario seed");
    sub->add_option("--out", out_dir, "Output directory")->capture_default_str();
    sub->add_flag("-v", verbosity, "Verbose logging (repeat for more)");
    sub->add_option("--parallel", cfg.parallel, "Scenarios run concurrently")->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "Execute scenarios and write report, trace, and ledgers");
  run->add_option("scenario", cfg.scenarios, "Scenario JSON files")->required()->check(CLI::ExistingFile);
  common(run, run_v);

  auto* attack = app.add_subcommand("attack-suite", "Run a scenario with every adversary enabled");
  attack->add_option("scenario", cfg.scenarios, "Scenario JSON file")->required()->expected(1)->check(
      CLI::ExistingFile);
  attack->add_option("--runs", cfg.runs, "Seeded runs (seed, seed+1, ...)")->check(CLI::PositiveNumber);
  common(attack, attack_v);

  auto* inspect = app.add_subcommand("inspect-ledger", "Dump and verify persisted ledgers");
  std::string ledger_dir;
  inspect->add_option("dir", ledger_dir, "Output or ledger directory")->required();
  inspect->add_flag("-v", inspect_v, "Print every frame");

  auto* self = app.add_subcommand("selftest", "Exhaustive small-case checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitInvalid;
  }
  if (seed != 0 || std::any_of(argv, argv + argc, [](const char* a) { return std::string_view(a) == "--seed"; }))
    cfg.seed = seed;
  cfg.out = out_dir;
  cfg.verbosity = run_v + attack_v + inspect_v;
  cfg.ledger_dir = ledger_dir;

  if (run->parsed()) return cmd_run(cfg, out, err);
  if (attack->parsed()) return cmd_attack_suite(cfg, out, err);
  if (inspect->parsed()) return cmd_inspect_ledger(cfg, out, err);
  if (self->parsed()) return cmd_selftest(cfg, out, err);
  return kExitInvalid;
}

}  // namespace sword::cli
