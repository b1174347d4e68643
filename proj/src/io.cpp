#include "dbp/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "dbp/error.hpp"

namespace dbp::io {

static_assert(std::endian::native == std::endian::little,
              "the on-disk formats are little-endian and written natively");

namespace {

constexpr std::array<char, 4> kTensorMagic{'D', 'B', 'P', 'T'};
constexpr std::array<char, 4> kBundleMagic{'D', 'B', 'P', 'B'};
// Dimensions above this are treated as corruption rather than allocated.
constexpr std::uint64_t kMaxElements = 1ull << 32;

template <class T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw FormatError(std::string("truncated input while reading ") + what);
  return value;
}

void expect_magic(std::istream& is, const std::array<char, 4>& magic) {
  std::array<char, 4> got{};
  is.read(got.data(), 4);
  if (!is) throw FormatError("truncated input while reading magic");
  if (got != magic) throw FormatError("bad magic bytes");
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), 4);
  put<std::uint32_t>(os, kTensorVersion);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dim()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  if (t.dtype() == Dtype::F32) {
    for (double v : t.data()) put<float>(os, static_cast<float>(v));
  } else {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw FormatError("failed writing tensor");
}

Tensor read_tensor(std::istream& is) {
  expect_magic(is, kTensorMagic);
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kTensorVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  const auto code = get<std::uint8_t>(is, "dtype");
  if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<Dtype>(code);
  const auto ndim = get<std::uint8_t>(is, "ndim");
  if (ndim == 0) throw FormatError("tensor record with zero dimensions");
  Shape shape;
  std::uint64_t total = 1;
  for (std::uint8_t i = 0; i < ndim; ++i) {
    const auto d = get<std::uint64_t>(is, "dims");
    if (d == 0) throw FormatError("zero extent in tensor record");
    total *= d;
    if (total > kMaxElements) throw FormatError("tensor record too large");
    shape.push_back(static_cast<std::size_t>(d));
  }
  Buffer values(static_cast<std::size_t>(total));
  if (dtype == Dtype::F32) {
    std::vector<float> raw(values.size());
    is.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!is) throw FormatError("truncated tensor payload");
    for (std::size_t i = 0; i < raw.size(); ++i) values[i] = raw[i];
  } else {
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw FormatError("truncated tensor payload");
  }
  return Tensor(std::move(shape), std::move(values), dtype);
}

std::string encode_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

Tensor decode_tensor(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensor(is);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file(path, encode_tensor(t));
}

Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

void write_bundle(std::ostream& os, const Bundle& bundle) {
  os.write(kBundleMagic.data(), 4);
  put<std::uint32_t>(os, kBundleVersion);
  put<std::uint64_t>(os, bundle.header.size());
  os.write(bundle.header.data(), static_cast<std::streamsize>(bundle.header.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(bundle.tensors.size()));
  for (const auto& t : bundle.tensors) write_tensor(os, t);
  if (!os) throw FormatError("failed writing bundle");
}

Bundle read_bundle(std::istream& is) {
  expect_magic(is, kBundleMagic);
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kBundleVersion) {
    throw FormatError("unsupported bundle version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(is, "header length");
  if (header_len > (1ull << 30)) throw FormatError("bundle header too large");
  Bundle b;
  b.header.resize(static_cast<std::size_t>(header_len));
  is.read(b.header.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw FormatError("truncated bundle header");
  const auto count = get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) b.tensors.push_back(read_tensor(is));
  return b;
}

void save_bundle(const std::filesystem::path& path, const Bundle& bundle) {
  std::ostringstream os(std::ios::binary);
  write_bundle(os, bundle);
  write_file(path, os.str());
}

Bundle load_bundle(const std::filesystem::path& path) {
  std::istringstream is(read_file(path), std::ios::binary);
  return read_bundle(is);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

}  // namespace dbp::io
