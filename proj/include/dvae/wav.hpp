#pragma once

// Minimal RIFF/WAVE reader and writer for 16-bit PCM.  The reader walks the
// chunk list properly (players and editors like to insert LIST/fact chunks),
// takes the first channel of multi-channel files, and refuses sample rates
// other than the one the pipeline is built around -- there is no implicit
// resampling.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dvae/common.hpp"

namespace dvae {

struct Waveform {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = 0;
};

namespace detail {

inline uint32_t read_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}

inline uint16_t read_u16(const unsigned char* p) {
  return uint16_t(p[0]) | uint16_t(p[1]) << 8;
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw Error("format error: cannot open '" + path + "'");
  std::fseek(f, 0, SEEK_END);
  long n = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> buf(size_t(n > 0 ? n : 0));
  if (n > 0 && std::fread(buf.data(), 1, size_t(n), f) != size_t(n)) {
    std::fclose(f);
    throw Error("format error: short read on '" + path + "'");
  }
  std::fclose(f);
  return buf;
}

}  // namespace detail

inline Waveform load_wav(const std::string& path, int expected_rate = 16000) {
  std::vector<unsigned char> buf = detail::read_file(path);
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw Error("format error: '" + path + "' is not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  uint16_t audio_format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const unsigned char* data = nullptr;
  uint32_t data_len = 0;

  size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* hdr = buf.data() + pos;
    uint32_t chunk_len = detail::read_u32(hdr + 4);
    const unsigned char* body = hdr + 8;
    if (pos + 8 + chunk_len > buf.size()) {
      throw Error("format error: truncated chunk in '" + path + "'");
    }
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw Error("format error: short fmt chunk");
      audio_format = detail::read_u16(body);
      channels = detail::read_u16(body + 2);
      rate = detail::read_u32(body + 4);
      bits = detail::read_u16(body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || !data) {
    throw Error("format error: '" + path + "' lacks fmt/data chunks");
  }
  if (audio_format != 1 || bits != 16) {
    throw Error("format error: '" + path + "' is not 16-bit PCM");
  }
  if (channels < 1) throw Error("format error: zero channels");
  if (int(rate) != expected_rate) {
    throw Error("rate error: '" + path + "' is " + std::to_string(rate) +
                " Hz, expected " + std::to_string(expected_rate));
  }

  size_t frames = data_len / (2 * channels);
  Waveform w;
  w.sample_rate = int(rate);
  w.samples.resize(frames);
  for (size_t i = 0; i < frames; ++i) {
    const unsigned char* p = data + i * 2 * channels;  // first channel only
    int16_t v = int16_t(uint16_t(p[0]) | uint16_t(p[1]) << 8);
    w.samples[i] = double(v) / 32768.0;
  }
  return w;
}

inline void save_wav(const std::string& path, const Waveform& w) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error("format error: cannot create '" + path + "'");
  uint32_t n = uint32_t(w.samples.size());
  uint32_t data_len = n * 2;
  uint32_t riff_len = 36 + data_len;
  uint32_t rate = uint32_t(w.sample_rate);
  uint32_t byte_rate = rate * 2;

  unsigned char hdr[44];
  std::memcpy(hdr, "RIFF", 4);
  std::memcpy(hdr + 8, "WAVE", 4);
  std::memcpy(hdr + 12, "fmt ", 4);
  std::memcpy(hdr + 36, "data", 4);
  auto put_u32 = [&](size_t at, uint32_t v) {
    hdr[at] = v & 0xFF;
    hdr[at + 1] = (v >> 8) & 0xFF;
    hdr[at + 2] = (v >> 16) & 0xFF;
    hdr[at + 3] = (v >> 24) & 0xFF;
  };
  auto put_u16 = [&](size_t at, uint16_t v) {
    hdr[at] = v & 0xFF;
    hdr[at + 1] = (v >> 8) & 0xFF;
  };
  put_u32(4, riff_len);
  put_u32(16, 16);       // fmt chunk size
  put_u16(20, 1);        // PCM
  put_u16(22, 1);        // mono
  put_u32(24, rate);
  put_u32(28, byte_rate);
  put_u16(32, 2);        // block align
  put_u16(34, 16);       // bits
  put_u32(40, data_len);
  std::fwrite(hdr, 1, 44, f);

  std::vector<unsigned char> body(data_len);
  for (uint32_t i = 0; i < n; ++i) {
    double x = w.samples[i];
    x = x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x);
    int v = int(std::lround(x * 32767.0));
    body[i * 2] = uint16_t(v) & 0xFF;
    body[i * 2 + 1] = (uint16_t(v) >> 8) & 0xFF;
  }
  std::fwrite(body.data(), 1, body.size(), f);
  std::fclose(f);
}

}  // namespace dvae
