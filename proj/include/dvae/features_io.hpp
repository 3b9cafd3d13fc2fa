#pragma once

// On-disk feature formats.  Both are little-endian and fixed-layout so that
// identical inputs always produce byte-identical files:
//
//   feature cache (.dvf):  "DVF1" | u32 T | u32 n_mels | u8 normalized
//                          | T * n_mels float32, row-major
//   normalization stats (.dvs):  "DVS1" | f64 min | f64 max
//
// The code assumes a little-endian host (checked at startup cost zero: x86
// and the common arm64 ABIs are little-endian; big-endian hosts would need
// byte swaps here and in the checkpoint reader).

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/dsp.hpp"

namespace dvae {

namespace detail {

inline FILE* open_or_throw(const std::string& path, const char* mode) {
  FILE* f = std::fopen(path.c_str(), mode);
  if (!f) throw Error("format error: cannot open '" + path + "'");
  return f;
}

inline void write_bytes(FILE* f, const void* p, size_t n,
                        const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) {
    std::fclose(f);
    throw Error("format error: short write on '" + path + "'");
  }
}

inline void read_bytes(FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) {
    std::fclose(f);
    throw Error("format error: short read on '" + path + "'");
  }
}

}  // namespace detail

inline void save_features(const std::string& path, const MelSpectrogram& m) {
  FILE* f = detail::open_or_throw(path, "wb");
  detail::write_bytes(f, "DVF1", 4, path);
  uint32_t t = uint32_t(m.frames), n = uint32_t(m.n_mels);
  uint8_t norm = m.normalized ? 1 : 0;
  detail::write_bytes(f, &t, 4, path);
  detail::write_bytes(f, &n, 4, path);
  detail::write_bytes(f, &norm, 1, path);
  detail::write_bytes(f, m.data.data(), m.data.size() * 4, path);
  std::fclose(f);
}

inline MelSpectrogram load_features(const std::string& path) {
  FILE* f = detail::open_or_throw(path, "rb");
  char magic[4];
  detail::read_bytes(f, magic, 4, path);
  if (std::memcmp(magic, "DVF1", 4) != 0) {
    std::fclose(f);
    throw Error("format error: '" + path + "' is not a DVF1 feature file");
  }
  uint32_t t = 0, n = 0;
  uint8_t norm = 0;
  detail::read_bytes(f, &t, 4, path);
  detail::read_bytes(f, &n, 4, path);
  detail::read_bytes(f, &norm, 1, path);
  if (t == 0 || n == 0 || t > (1u << 24) || n > (1u << 16)) {
    std::fclose(f);
    throw Error("format error: implausible dimensions in '" + path + "'");
  }
  MelSpectrogram m;
  m.frames = int(t);
  m.n_mels = int(n);
  m.normalized = norm != 0;
  m.data.resize(size_t(t) * n);
  detail::read_bytes(f, m.data.data(), m.data.size() * 4, path);
  std::fclose(f);
  return m;
}

inline void save_stats(const std::string& path, const NormalizationStats& s) {
  s.validate();
  FILE* f = detail::open_or_throw(path, "wb");
  detail::write_bytes(f, "DVS1", 4, path);
  detail::write_bytes(f, &s.min_val, 8, path);
  detail::write_bytes(f, &s.max_val, 8, path);
  std::fclose(f);
}

inline NormalizationStats load_stats(const std::string& path) {
  FILE* f = detail::open_or_throw(path, "rb");
  char magic[4];
  detail::read_bytes(f, magic, 4, path);
  if (std::memcmp(magic, "DVS1", 4) != 0) {
    std::fclose(f);
    throw Error("format error: '" + path + "' is not a DVS1 stats file");
  }
  NormalizationStats s;
  detail::read_bytes(f, &s.min_val, 8, path);
  detail::read_bytes(f, &s.max_val, 8, path);
  std::fclose(f);
  s.validate();
  return s;
}

}  // namespace dvae
