#include "rvnp/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace rvnp {

namespace {

constexpr char kMagic[8] = {'R', 'V', 'N', 'P', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw IoError("checkpoint: truncated file");
  return v;
}

void write_doubles(std::ofstream& f, const Vector& v) {
  write_pod<uint64_t>(f, v.size());
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Vector read_doubles(std::ifstream& f) {
  const uint64_t n = read_pod<uint64_t>(f);
  Vector v(n);
  f.read(reinterpret_cast<char*>(v.data()),
         static_cast<std::streamsize>(n * sizeof(double)));
  if (!f) throw IoError("checkpoint: truncated parameter block");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  f.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(f, Checkpoint::kVersion);
  write_pod<uint32_t>(f, c.kind);
  write_pod<uint64_t>(f, c.arch.size());
  f.write(c.arch.data(), static_cast<std::streamsize>(c.arch.size()));
  write_doubles(f, c.params);
  write_pod<uint8_t>(f, c.has_opt ? 1 : 0);
  if (c.has_opt) {
    write_pod<int64_t>(f, c.opt_step);
    write_doubles(f, c.opt_m);
    write_doubles(f, c.opt_v);
  }
  if (!f) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const uint32_t version = read_pod<uint32_t>(f);
  if (version != Checkpoint::kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.kind = read_pod<uint32_t>(f);
  const uint64_t arch_len = read_pod<uint64_t>(f);
  c.arch.resize(arch_len);
  f.read(c.arch.data(), static_cast<std::streamsize>(arch_len));
  c.params = read_doubles(f);
  c.has_opt = read_pod<uint8_t>(f) != 0;
  if (c.has_opt) {
    c.opt_step = read_pod<int64_t>(f);
    c.opt_m = read_doubles(f);
    c.opt_v = read_doubles(f);
  }
  return c;
}

}  // namespace rvnp
