#pragma once

#include <cstdint>
#include <string>

#include "rvnp/matrix.hpp"

namespace rvnp {

/// Versioned binary checkpoint shared by every trainable module: a short
/// architecture string, the flat parameter vector (bit-exact doubles), and an
/// optional Adam state so training can resume.
///
/// Layout: magic "RVNPCKP1" | u32 version | u32 kind | u64 arch_len |
/// arch bytes | u64 n_params | params | u8 has_opt [| i64 step | m | v].
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;
  enum Kind : uint32_t { kFlow = 1, kErrorModel = 2, kEncoder = 3, kMlp = 4 };

  uint32_t kind = 0;
  std::string arch;
  Vector params;
  bool has_opt = false;
  int64_t opt_step = 0;
  Vector opt_m, opt_v;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rvnp
