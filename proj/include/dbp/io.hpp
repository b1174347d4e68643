#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dbp/tensor.hpp"

namespace dbp::io {

// Single tensor record:
//   "DBPT" | version u32 LE | dtype u8 (0=f32, 1=f64) | ndim u8 |
//   dims u64 LE x ndim | raw LE values
inline constexpr std::uint32_t kTensorVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::string& bytes);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// Bundle: a JSON header followed by a sequence of tensor records.
//   "DBPB" | version u32 LE | header length u64 LE | header bytes (JSON) |
//   count u32 LE | count x tensor record
inline constexpr std::uint32_t kBundleVersion = 1;

struct Bundle {
  std::string header;  // JSON text
  std::vector<Tensor> tensors;
};

void write_bundle(std::ostream& os, const Bundle& bundle);
Bundle read_bundle(std::istream& is);
void save_bundle(const std::filesystem::path& path, const Bundle& bundle);
Bundle load_bundle(const std::filesystem::path& path);

// Whole-file helpers.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace dbp::io
