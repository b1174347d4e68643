#include "dbp/tape.hpp"

#include <json.hpp>

#include "dbp/error.hpp"
#include "dbp/io.hpp"
#include "dbp/rng.hpp"

namespace dbp {

namespace {

Tensor gaussian(const rng::StreamKey& key, const Shape& shape) {
  return Tensor(shape, rng::normal(key, shape_numel(shape)));
}

void hash_bytes(std::uint64_t& h, std::span<const double> values) {
  const auto* p = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size() * sizeof(double); ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
}

}  // namespace

NoiseTape record_tape(std::uint64_t seed, const Shape& image_shape,
                      std::size_t reverse_step_count) {
  NoiseTape tape;
  tape.seed = seed;
  tape.forward_noise = gaussian({seed, rng::Stream::ForwardNoise, 0}, image_shape);
  tape.reverse_noises.reserve(reverse_step_count);
  for (std::size_t i = 0; i < reverse_step_count; ++i) {
    tape.reverse_noises.push_back(gaussian(
        {seed, rng::Stream::ReverseNoise, static_cast<std::uint32_t>(i)}, image_shape));
  }
  return tape;
}

bool tapes_equal(const NoiseTape& a, const NoiseTape& b) {
  if (!bitwise_equal(a.forward_noise, b.forward_noise)) return false;
  if (a.reverse_noises.size() != b.reverse_noises.size()) return false;
  for (std::size_t i = 0; i < a.reverse_noises.size(); ++i) {
    if (!bitwise_equal(a.reverse_noises[i], b.reverse_noises[i])) return false;
  }
  return true;
}

std::uint64_t tape_hash(const NoiseTape& tape) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  hash_bytes(h, tape.forward_noise.data());
  for (const auto& r : tape.reverse_noises) hash_bytes(h, r.data());
  return h;
}

NoiseTape stack_tapes(std::span<const NoiseTape> tapes) {
  if (tapes.empty()) throw ShapeError("stack_tapes needs at least one tape");
  NoiseTape out;
  out.seed = tapes[0].seed;
  std::vector<Tensor> parts;
  parts.reserve(tapes.size());
  for (const auto& t : tapes) parts.push_back(t.forward_noise);
  out.forward_noise = stack_rows(parts);
  const std::size_t steps = tapes[0].reverse_noises.size();
  for (std::size_t s = 0; s < steps; ++s) {
    parts.clear();
    for (const auto& t : tapes) {
      if (t.reverse_noises.size() != steps) {
        throw DeterminismError("stack_tapes: tapes disagree on reverse step count");
      }
      parts.push_back(t.reverse_noises[s]);
    }
    out.reverse_noises.push_back(stack_rows(parts));
  }
  return out;
}

void KnowledgeSetting::validate() const {
  if (kind == Knowledge::DWSemi && semi_k < 1) {
    throw ConfigError("DW semi setting needs k >= 1");
  }
}

std::string KnowledgeSetting::name() const {
  switch (kind) {
    case Knowledge::WhiteBox: return "white_box";
    case Knowledge::DWFwd: return "dw_fwd";
    case Knowledge::DWRev: return "dw_rev";
    case Knowledge::DWBoth: return "dw_both";
    case Knowledge::DWSemi: return "dw_semi_" + std::to_string(semi_k);
  }
  return "unknown";
}

KnowledgeSetting KnowledgeSetting::parse(const std::string& name) {
  if (name == "white_box") return white_box();
  if (name == "dw_fwd") return dw_fwd();
  if (name == "dw_rev") return dw_rev();
  if (name == "dw_both") return dw_both();
  const std::string prefix = "dw_semi_";
  if (name.rfind(prefix, 0) == 0) {
    try {
      KnowledgeSetting s = dw_semi(std::stoi(name.substr(prefix.size())));
      s.validate();
      return s;
    } catch (const std::logic_error&) {
    }
  }
  throw ConfigError("unknown knowledge setting '" + name + "'");
}

bool KnowledgeSetting::knows_forward() const {
  return kind == Knowledge::DWFwd || kind == Knowledge::DWBoth;
}

bool KnowledgeSetting::knows_reverse() const {
  return kind == Knowledge::DWRev || kind == Knowledge::DWBoth;
}

bool AttackerTape::fully_known() const { return known_entries() == total_entries(); }

std::size_t AttackerTape::known_entries() const {
  std::size_t n = forward ? 1 : 0;
  for (const auto& r : reverse) n += r ? 1 : 0;
  return n;
}

std::vector<bool> AttackerTape::known_mask() const {
  std::vector<bool> mask;
  mask.push_back(forward.has_value());
  for (const auto& r : reverse) mask.push_back(r.has_value());
  return mask;
}

NoiseTape AttackerTape::realize(std::uint64_t fresh_seed) const {
  NoiseTape tape;
  tape.seed = fresh_seed;
  tape.forward_noise =
      forward ? *forward : gaussian({fresh_seed, rng::Stream::FreshNoise, 0}, image_shape);
  tape.reverse_noises.reserve(reverse.size());
  for (std::size_t i = 0; i < reverse.size(); ++i) {
    tape.reverse_noises.push_back(
        reverse[i] ? *reverse[i]
                   : gaussian({fresh_seed, rng::Stream::FreshNoise,
                               static_cast<std::uint32_t>(i + 1)},
                              image_shape));
  }
  return tape;
}

AttackerTape knowledge_view(const NoiseTape& tape, KnowledgeSetting setting) {
  if (setting.kind == Knowledge::DWSemi) {
    throw ConfigError("DW semi knowledge is modelled by sample_semi_set, not a tape view");
  }
  AttackerTape view;
  view.image_shape = tape.image_shape();
  if (setting.knows_forward()) view.forward = tape.forward_noise;
  view.reverse.resize(tape.reverse_noises.size());
  if (setting.knows_reverse()) {
    for (std::size_t i = 0; i < tape.reverse_noises.size(); ++i) {
      view.reverse[i] = tape.reverse_noises[i];
    }
  }
  return view;
}

std::vector<NoiseTape> sample_semi_set(int k, std::uint64_t seed, const Shape& image_shape,
                                       std::size_t reverse_step_count) {
  if (k < 1) throw ConfigError("semi set size must be at least 1");
  std::vector<NoiseTape> set;
  set.reserve(static_cast<std::size_t>(k));
  const std::uint64_t base = rng::derive_seed(seed, static_cast<std::uint64_t>(rng::Stream::SemiSet));
  for (int i = 0; i < k; ++i) {
    set.push_back(record_tape(rng::derive_seed(base, static_cast<std::uint64_t>(i)),
                              image_shape, reverse_step_count));
  }
  return set;
}

void save_tape(const std::filesystem::path& path, const NoiseTape& tape) {
  nlohmann::json header = {{"kind", "noise_tape"},
                           {"seed", tape.seed},
                           {"forward", 1},
                           {"reverse_count", tape.reverse_noises.size()}};
  io::Bundle b;
  b.header = header.dump();
  b.tensors.push_back(tape.forward_noise);
  for (const auto& r : tape.reverse_noises) b.tensors.push_back(r);
  io::save_bundle(path, b);
}

NoiseTape load_tape(const std::filesystem::path& path) {
  io::Bundle b = io::load_bundle(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(b.header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tape header is not JSON: ") + e.what());
  }
  if (header.value("kind", "") != "noise_tape") throw FormatError("bundle is not a noise tape");
  const auto count = header.at("reverse_count").get<std::size_t>();
  if (b.tensors.size() != count + 1) throw FormatError("tape tensor count mismatch");
  NoiseTape tape;
  tape.seed = header.at("seed").get<std::uint64_t>();
  tape.forward_noise = b.tensors[0];
  tape.reverse_noises.assign(b.tensors.begin() + 1, b.tensors.end());
  return tape;
}

}  // namespace dbp
