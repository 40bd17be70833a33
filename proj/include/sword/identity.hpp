#pragma once

#include <sodium.h>

#include <array>
#include <compare>
#include <map>
#include <optional>
#include <string_view>

#include "sword/bytes.hpp"
#include "sword/crypto.hpp"
#include "sword/error.hpp"

namespace sword {

/// Fixed-width device identifier: the digest of the DID text.
struct DeviceId {
  Digest raw{};

  static DeviceId from_did(std::string_view did) { return DeviceId{hash(did)}; }

  std::string short_hex() const { return to_hex(ByteView{raw}.first(8)); }

  auto operator<=>(const DeviceId&) const = default;
};

struct PublicKey {
  Bytes bytes;
  bool operator==(const PublicKey&) const = default;
};

struct SecretKey {
  Bytes bytes;
};

struct Signature {
  std::array<std::uint8_t, crypto_sign_BYTES> bytes{};
  bool operator==(const Signature&) const = default;
};

struct KeyPair {
  PublicKey public_key;
  SecretKey secret_key;

  /// Ed25519 keypair derived from 32 bytes of the given stream.
  static KeyPair generate(Rng& rng) {
    detail::ensure_sodium();
    std::array<std::uint8_t, crypto_sign_SEEDBYTES> seed;
    rng.fill(seed);
    KeyPair kp;
    kp.public_key.bytes.resize(crypto_sign_PUBLICKEYBYTES);
    kp.secret_key.bytes.resize(crypto_sign_SECRETKEYBYTES);
    crypto_sign_seed_keypair(kp.public_key.bytes.data(), kp.secret_key.bytes.data(), seed.data());
    sodium_memzero(seed.data(), seed.size());
    return kp;
  }
};

inline Signature sign(const SecretKey& sk, ByteView message) {
  detail::ensure_sodium();
  if (sk.bytes.size() != crypto_sign_SECRETKEYBYTES)
    throw Error(ErrorCode::MalformedKey, "secret key must be 64 bytes");
  Signature sig;
  crypto_sign_detached(sig.bytes.data(), nullptr, message.data(), message.size(), sk.bytes.data());
  return sig;
}

inline bool verify(const PublicKey& pk, ByteView message, const Signature& sig) {
  detail::ensure_sodium();
  if (pk.bytes.size() != crypto_sign_PUBLICKEYBYTES)
    throw Error(ErrorCode::MalformedKey, "public key must be 32 bytes");
  return crypto_sign_verify_detached(sig.bytes.data(), message.data(), message.size(), pk.bytes.data()) == 0;
}

/// Time-bound session credential for one registered device.
struct Credential {
  DeviceId did;
  PublicKey public_key;
  Digest mfa_secret{};
  TimeMs issued_at = 0;
  TimeMs expiry = 0;

  bool operator==(const Credential&) const = default;
};

inline void append_canonical(ByteWriter& w, const Credential& c) {
  w.raw(c.did.raw).blob16(c.public_key.bytes).raw(c.mfa_secret).u64(c.issued_at).u64(c.expiry);
}

/**
 * The synchronized set of credentials every node carries for offline
 * validation. Immutable: registration yields a new block.
 */
class CredentialBlock {
 public:
  using Entries = std::map<DeviceId, Credential>;

  CredentialBlock() : state_hash_(compute_state_hash(entries_)) {}
  CredentialBlock(Entries entries, std::uint64_t version)
      : entries_(std::move(entries)), state_hash_(compute_state_hash(entries_)), version_(version) {}

  const Entries& entries() const { return entries_; }
  const Digest& state_hash() const { return state_hash_; }
  std::uint64_t version() const { return version_; }
  std::size_t size() const { return entries_.size(); }

  const Credential* find(const DeviceId& id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : &it->second;
  }

  /// Entries in DeviceId byte order, each did ‖ pk(u16 len) ‖ mfa ‖ issued_at ‖ expiry.
  static Bytes canonical_bytes(const Entries& entries) {
    ByteWriter w;
    for (const auto& [id, cred] : entries) append_canonical(w, cred);
    return std::move(w).take();
  }

  static Digest compute_state_hash(const Entries& entries) { return hash(canonical_bytes(entries)); }

 private:
  Entries entries_;
  Digest state_hash_;
  std::uint64_t version_ = 0;
};

struct Registration {
  CredentialBlock block;
  Credential credential;
  KeyPair keys;
};

inline Registration register_device(const CredentialBlock& block, std::string_view did_string,
                                    TimeMs validity_ms, Rng& rng, TimeMs now = 0) {
  if (did_string.empty()) throw Error(ErrorCode::MalformedInput, "empty DID string");
  if (validity_ms == 0) throw Error(ErrorCode::MalformedInput, "validity must be positive");
  const auto id = DeviceId::from_did(did_string);
  if (block.find(id)) throw Error(ErrorCode::DuplicateDid, std::string(did_string));

  Registration r;
  r.keys = KeyPair::generate(rng);
  r.credential.did = id;
  r.credential.public_key = r.keys.public_key;
  r.credential.mfa_secret = rng.digest();
  r.credential.issued_at = now;
  r.credential.expiry = now + validity_ms;

  auto entries = block.entries();
  entries.emplace(id, r.credential);
  r.block = CredentialBlock(std::move(entries), block.version() + 1);
  return r;
}

/// True iff the device holds an entry in the block that has not yet expired.
inline bool validate_credential(const CredentialBlock& block, const DeviceId& did, TimeMs now) {
  const auto* cred = block.find(did);
  return cred != nullptr && cred->expiry > now;
}

}  // namespace sword
