#pragma once

#include <string>
#include <vector>

#include "sword/sword.hpp"

namespace sword::test {

/// A block with `n` registered devices "did:test:<i>" and their key material.
struct Fleet {
  CredentialBlock block;
  std::vector<Registration> regs;

  explicit Fleet(std::size_t n, std::uint64_t seed = 1, TimeMs validity = 3'600'000, TimeMs now = 0) {
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
      regs.push_back(register_device(block, "did:test:" + std::to_string(i), validity, rng, now));
      block = regs.back().block;
    }
  }

  const DeviceId& id(std::size_t i) const { return regs.at(i).credential.did; }
  const KeyPair& keys(std::size_t i) const { return regs.at(i).keys; }
  const Credential& cred(std::size_t i) const { return regs.at(i).credential; }
  std::shared_ptr<const CredentialBlock> shared() const { return std::make_shared<const CredentialBlock>(block); }

  std::vector<DeviceId> ids(std::size_t from, std::size_t to) const {
    std::vector<DeviceId> out;
    for (auto i = from; i < to; ++i) out.push_back(id(i));
    return out;
  }
};

inline std::string hex(const Digest& d) { return to_hex(d); }

/// Tal with `n` authentication records at strictly increasing timestamps.
inline Tal random_tal(Rng& rng, std::size_t n, TimeMs start = 1) {
  Tal tal(rng.digest());
  std::vector<DeviceId> roster{DeviceId{rng.digest()}, DeviceId{rng.digest()}, DeviceId{rng.digest()}};
  TimeMs ts = start;
  for (std::size_t i = 0; i < n; ++i) {
    ts += rng.uniform(1, 100);
    const bool ok = rng.bernoulli(0.7);
    tal.append_auth_record(DeviceId{rng.digest()}, ts, ok, ok ? 3 : static_cast<std::uint16_t>(rng.uniform(0, 2)), 3,
                           rng.digest(), roster);
  }
  return tal;
}

}  // namespace sword::test
