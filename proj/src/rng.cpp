#include "dbp/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace dbp::rng {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

Counter block(const StreamKey& key, std::uint64_t element) {
  Counter ctr{static_cast<std::uint32_t>(element), static_cast<std::uint32_t>(element >> 32),
              static_cast<std::uint32_t>(key.stream), key.index};
  Key k{static_cast<std::uint32_t>(key.seed), static_cast<std::uint32_t>(key.seed >> 32)};
  return philox4x32(ctr, k);
}

inline std::uint64_t join(std::uint32_t lo, std::uint32_t hi) {
  return static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32);
}

constexpr double kTwoPow53Inv = 1.0 / 9007199254740992.0;

}  // namespace

Counter philox4x32(Counter ctr, Key key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

void fill_normal(const StreamKey& key, std::span<double> out) {
  const std::size_t n = out.size();
  for (std::size_t j = 0; 2 * j < n; ++j) {
    const Counter c = block(key, j);
    // u1 in (0, 1] keeps the log finite.
    const double u1 = static_cast<double>((join(c[0], c[1]) >> 11) + 1) * kTwoPow53Inv;
    const double u2 = static_cast<double>(join(c[2], c[3]) >> 11) * kTwoPow53Inv;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    out[2 * j] = r * std::cos(angle);
    if (2 * j + 1 < n) out[2 * j + 1] = r * std::sin(angle);
  }
}

std::vector<double> normal(const StreamKey& key, std::size_t n) {
  std::vector<double> out(n);
  fill_normal(key, out);
  return out;
}

void fill_uniform(const StreamKey& key, std::span<double> out) {
  const std::size_t n = out.size();
  for (std::size_t j = 0; 2 * j < n; ++j) {
    const Counter c = block(key, j);
    out[2 * j] = static_cast<double>(join(c[0], c[1]) >> 11) * kTwoPow53Inv;
    if (2 * j + 1 < n) out[2 * j + 1] = static_cast<double>(join(c[2], c[3]) >> 11) * kTwoPow53Inv;
  }
}

std::uint64_t uniform_index(const StreamKey& key, std::uint64_t element, std::uint64_t bound) {
  const Counter c = block(key, element);
  const unsigned __int128 wide = static_cast<unsigned __int128>(join(c[0], c[1])) * bound;
  return static_cast<std::uint64_t>(wide >> 64);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::vector<std::size_t> permutation(const StreamKey& key, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(key, i, i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace dbp::rng
