#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

// Counter-based random numbers. A draw is a pure function of
// (seed, stream, index, element), so any subset of draws can be regenerated
// in any order on any thread.
namespace dbp::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

// Philox4x32 with 10 rounds.
Counter philox4x32(Counter ctr, Key key);

// Roles keep independent consumers from sharing draws.
enum class Stream : std::uint32_t {
  ForwardNoise = 1,
  ReverseNoise = 2,
  FreshNoise = 3,
  SemiSet = 4,
  WeightInit = 5,
  DatasetLayout = 6,
  DatasetPixels = 7,
  TrainNoise = 8,
  TrainTime = 9,
  TrainShuffle = 10,
  Perturbation = 11,
  AttackStart = 12,
  VictimChoice = 13,
};

struct StreamKey {
  std::uint64_t seed = 0;
  Stream stream = Stream::FreshNoise;
  std::uint32_t index = 0;
};

// Standard normals via Box-Muller; element pair (2j, 2j+1) comes from one
// Philox block at counter j.
void fill_normal(const StreamKey& key, std::span<double> out);
std::vector<double> normal(const StreamKey& key, std::size_t n);

// Uniform doubles in [0, 1) with 53-bit resolution.
void fill_uniform(const StreamKey& key, std::span<double> out);

// Uniform integer in [0, bound) for element `element` of the keyed stream.
std::uint64_t uniform_index(const StreamKey& key, std::uint64_t element, std::uint64_t bound);

// Mixes a parent seed with a tag into a child seed (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

// Deterministic Fisher-Yates permutation of [0, n).
std::vector<std::size_t> permutation(const StreamKey& key, std::size_t n);

}  // namespace dbp::rng
