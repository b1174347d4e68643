#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dbp/tensor.hpp"

namespace dbp {

// Every Gaussian draw consumed by one purification run: the forward noise
// and one draw per stochastic reverse step.
struct NoiseTape {
  std::uint64_t seed = 0;
  Tensor forward_noise;
  std::vector<Tensor> reverse_noises;

  const Shape& image_shape() const { return forward_noise.shape(); }
};

NoiseTape record_tape(std::uint64_t seed, const Shape& image_shape,
                      std::size_t reverse_step_count);

bool tapes_equal(const NoiseTape& a, const NoiseTape& b);
// FNV-1a over the raw bytes of every entry.
std::uint64_t tape_hash(const NoiseTape& tape);

// Concatenates per-sample tapes (each with a leading batch axis) into one
// batch tape. All tapes must have the same reverse length.
NoiseTape stack_tapes(std::span<const NoiseTape> tapes);

enum class Knowledge { WhiteBox, DWFwd, DWRev, DWBoth, DWSemi };

struct KnowledgeSetting {
  Knowledge kind = Knowledge::WhiteBox;
  int semi_k = 0;  // only for DWSemi

  static KnowledgeSetting white_box() { return {Knowledge::WhiteBox, 0}; }
  static KnowledgeSetting dw_fwd() { return {Knowledge::DWFwd, 0}; }
  static KnowledgeSetting dw_rev() { return {Knowledge::DWRev, 0}; }
  static KnowledgeSetting dw_both() { return {Knowledge::DWBoth, 0}; }
  static KnowledgeSetting dw_semi(int k) { return {Knowledge::DWSemi, k}; }

  void validate() const;
  std::string name() const;
  static KnowledgeSetting parse(const std::string& name);
  bool knows_forward() const;
  bool knows_reverse() const;
};

// The attacker's copy of a tape: known entries hold the victim's values,
// unknown ones (nullopt) are drawn fresh whenever a realization is needed.
struct AttackerTape {
  Shape image_shape;
  std::optional<Tensor> forward;
  std::vector<std::optional<Tensor>> reverse;

  bool fully_known() const;
  std::size_t known_entries() const;
  std::size_t total_entries() const { return 1 + reverse.size(); }
  // Bitmask over entries: bit 0 forward, bit i+1 reverse step i.
  std::vector<bool> known_mask() const;

  // Fills unknown entries from the counter stream keyed by `fresh_seed`.
  NoiseTape realize(std::uint64_t fresh_seed) const;
};

// DWSemi is rejected here; finite tape sets come from sample_semi_set.
AttackerTape knowledge_view(const NoiseTape& tape, KnowledgeSetting setting);

std::vector<NoiseTape> sample_semi_set(int k, std::uint64_t seed, const Shape& image_shape,
                                       std::size_t reverse_step_count);

void save_tape(const std::filesystem::path& path, const NoiseTape& tape);
NoiseTape load_tape(const std::filesystem::path& path);

}  // namespace dbp
