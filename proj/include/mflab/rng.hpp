#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace mflab {

// Philox-4x32-10 counter-based generator. Every draw is a pure function of
// (seed, stream, counter triple), so results do not depend on evaluation
// order or worker count.
namespace philox {

inline void round_once(std::array<uint32_t, 4>& ctr, std::array<uint32_t, 2>& key) {
  constexpr uint64_t kMul0 = 0xD2511F53ull;
  constexpr uint64_t kMul1 = 0xCD9E8D57ull;
  const uint64_t p0 = kMul0 * ctr[0];
  const uint64_t p1 = kMul1 * ctr[2];
  const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32), lo0 = static_cast<uint32_t>(p0);
  const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32), lo1 = static_cast<uint32_t>(p1);
  ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  key[0] += 0x9E3779B9u;
  key[1] += 0xBB67AE85u;
}

inline std::array<uint32_t, 4> hash(uint64_t seed, std::array<uint32_t, 4> ctr) {
  std::array<uint32_t, 2> key = {static_cast<uint32_t>(seed),
                                 static_cast<uint32_t>(seed >> 32)};
  for (int r = 0; r < 10; ++r) round_once(ctr, key);
  return ctr;
}

}  // namespace philox

enum class Stream : uint32_t {
  kBrownian = 0x10,
  kField = 0x20,
  kProbe = 0x30,
  kResample = 0x40,
};

class CounterRng {
public:
  explicit CounterRng(uint64_t seed) : seed_(seed) {}

  uint64_t seed() const { return seed_; }

  // uniform in (0,1), never exactly 0 or 1
  double uniform(Stream s, uint64_t a, uint64_t b, uint64_t c) const {
    const auto r = words(s, a, b, c, 0);
    const uint64_t bits = (static_cast<uint64_t>(r[0]) << 32) | r[1];
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
  }

  // standard normal via Box-Muller on two independent uniforms
  double normal(Stream s, uint64_t a, uint64_t b, uint64_t c) const {
    const auto r = words(s, a, b, c, 0);
    const uint64_t u1b = (static_cast<uint64_t>(r[0]) << 32) | r[1];
    const uint64_t u2b = (static_cast<uint64_t>(r[2]) << 32) | r[3];
    const double u1 = (static_cast<double>(u1b >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = (static_cast<double>(u2b >> 11) + 0.5) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

private:
  std::array<uint32_t, 4> words(Stream s, uint64_t a, uint64_t b, uint64_t c,
                                uint32_t lane) const {
    // fold the three 64-bit indices plus stream tag into the 128-bit counter
    std::array<uint32_t, 4> ctr = {
        static_cast<uint32_t>(a) ^ static_cast<uint32_t>(static_cast<uint32_t>(s) << 24),
        static_cast<uint32_t>(a >> 32) ^ static_cast<uint32_t>(b),
        static_cast<uint32_t>(b >> 32) ^ static_cast<uint32_t>(c),
        static_cast<uint32_t>(c >> 32) ^ lane};
    return philox::hash(seed_ ^ (static_cast<uint64_t>(static_cast<uint32_t>(s)) << 56), ctr);
  }

  uint64_t seed_;
};

}  // namespace mflab
