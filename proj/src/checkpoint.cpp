#include "xdr/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace xdr {

namespace {

constexpr char kMagic[4] = {'X', 'D', 'R', 'W'};
constexpr uint8_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double d) {
  uint64_t v = std::bit_cast<uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  put_u32(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (int e : t.shape()) put_u32(os, static_cast<uint32_t>(e));
    for (double d : t.data()) put_f64(os, d);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  int version = is.get();
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version in " + path);
  uint32_t count = get_u32(is);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    uint32_t rank = get_u32(is);
    if (rank == 0 || rank > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
    std::vector<int> shape(rank);
    int64_t n = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      shape[r] = static_cast<int>(get_u32(is));
      n *= shape[r];
    }
    std::vector<double> data(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) data[j] = get_f64(is);
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace xdr
