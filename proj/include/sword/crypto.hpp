#pragma once

#include <sodium.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <string_view>

#include "sword/bytes.hpp"
#include "sword/error.hpp"

namespace sword {

namespace detail {

inline void ensure_sodium() {
  static const bool ready = [] {
    if (sodium_init() < 0) throw std::runtime_error("libsodium initialisation failed");
    return true;
  }();
  (void)ready;
}

}  // namespace detail

// The protocol uses a single 256-bit hash everywhere. SHA-256 by default;
// define SWORD_HASH_BLAKE2B to switch every digest to BLAKE2b-256.
class Hasher {
 public:
  Hasher() {
    detail::ensure_sodium();
#ifdef SWORD_HASH_BLAKE2B
    crypto_generichash_init(&state_, nullptr, 0, 32);
#else
    crypto_hash_sha256_init(&state_);
#endif
  }

  Hasher& update(ByteView bytes) {
#ifdef SWORD_HASH_BLAKE2B
    crypto_generichash_update(&state_, bytes.data(), bytes.size());
#else
    crypto_hash_sha256_update(&state_, bytes.data(), bytes.size());
#endif
    return *this;
  }
  Hasher& update(const Digest& d) { return update(ByteView{d}); }
  Hasher& update(std::string_view s) {
    return update(ByteView{reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  Hasher& update_u8(std::uint8_t b) { return update(ByteView{&b, 1}); }

  Digest finish() {
    Digest out;
#ifdef SWORD_HASH_BLAKE2B
    crypto_generichash_final(&state_, out.data(), out.size());
#else
    crypto_hash_sha256_final(&state_, out.data());
#endif
    return out;
  }

 private:
#ifdef SWORD_HASH_BLAKE2B
  crypto_generichash_state state_;
#else
  crypto_hash_sha256_state state_;
#endif
};

inline Digest hash(ByteView bytes) { return Hasher().update(bytes).finish(); }
inline Digest hash(std::string_view s) { return Hasher().update(s).finish(); }

/// HMAC-SHA256 truncated to the first eight bytes.
using Mac8 = std::array<std::uint8_t, 8>;

inline Mac8 mac8(const Digest& key, ByteView message) {
  detail::ensure_sodium();
  std::array<std::uint8_t, crypto_auth_hmacsha256_BYTES> full;
  crypto_auth_hmacsha256_state st;
  crypto_auth_hmacsha256_init(&st, key.data(), key.size());
  crypto_auth_hmacsha256_update(&st, message.data(), message.size());
  crypto_auth_hmacsha256_final(&st, full.data());
  Mac8 out;
  std::memcpy(out.data(), full.data(), out.size());
  return out;
}

/// Seeded deterministic byte stream (ChaCha20 keyed by a digest of seed and
/// block counter). Identical seeds give identical streams on every platform.
class Rng {
 public:
  explicit Rng(const Digest& seed) : seed_(seed) { detail::ensure_sodium(); }

  explicit Rng(std::uint64_t seed) : Rng(seed_digest(seed)) {}

  /// Independent child stream; the parent stream is not advanced.
  Rng fork(std::string_view label) const { return Rng(Hasher().update(seed_).update(label).finish()); }

  Rng fork(std::string_view label, std::uint64_t index) const {
    return Rng(Hasher().update(seed_).update(label).update(ByteWriter().u64(index).bytes()).finish());
  }

  void fill(std::span<std::uint8_t> out) {
    for (auto& b : out) {
      if (pos_ == buf_.size()) refill();
      b = buf_[pos_++];
    }
  }

  Digest digest() {
    Digest d;
    fill(d);
    return d;
  }

  std::uint64_t next_u64() {
    std::array<std::uint8_t, 8> b;
    fill(b);
    std::uint64_t v = 0;
    for (auto x : b) v = (v << 8) | x;
    return v;
  }

  /// Uniform integer in [lo, hi], unbiased.
  std::uint64_t uniform(std::uint64_t lo, std::uint64_t hi) {
    if (hi <= lo) return lo;
    const std::uint64_t span = hi - lo;
    if (span == std::numeric_limits<std::uint64_t>::max()) return next_u64();
    const std::uint64_t range = span + 1;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % range;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + v % range;
  }

  /// Uniform double in [0, 1).
  double unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return unit() < p;
  }

  double exponential(double mean) { return -mean * std::log1p(-unit()); }

  static Digest seed_digest(std::uint64_t seed) {
    return Hasher().update("sword-rng").update(ByteWriter().u64(seed).bytes()).finish();
  }

 private:
  void refill() {
    auto block_seed = Hasher().update(seed_).update(ByteWriter().u64(counter_++).bytes()).finish();
    static_assert(randombytes_SEEDBYTES == 32);
    randombytes_buf_deterministic(buf_.data(), buf_.size(), block_seed.data());
    pos_ = 0;
  }

  Digest seed_;
  std::uint64_t counter_ = 0;
  std::array<std::uint8_t, 512> buf_{};
  std::size_t pos_ = buf_.size();
};

}  // namespace sword
