#pragma once

// Checkpoint serialization.
//
// Layout (all integers little-endian):
//   "DVC1"
//   u32  header length
//   UTF-8 JSON header: {"model": {...}, "dsp": {...},
//                       "stats": {"min_val": .., "max_val": ..},
//                       "step": N}
//   u32  parameter count
//   per parameter: u16 name length | name | u8 rank | u32 dims | f32 values
//   "OPT1"
//   u32  entry count
//   per entry: same record shape, names "<param>.m", "<param>.v",
//              "<param>.t" (first/second Adam moments and the step counter)
//
// The JSON header makes a checkpoint self-describing: conversion and
// embedding tools reconstruct the architecture, the spectrogram settings,
// and the corpus normalization range from the file alone, with no config.
// Keys are emitted in a fixed order and values are written exactly, so
// identical training runs produce byte-identical files.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/config.hpp"
#include "dvae/dsp.hpp"
#include "dvae/features_io.hpp"
#include "dvae/layers.hpp"

namespace dvae {

struct CheckpointHeader {
  ModelConfig model;
  SpectrogramConfig dsp;
  NormalizationStats stats;
  long step = 0;
};

namespace detail {

inline void write_record_f32(FILE* f, const std::string& path,
                             const std::string& name, const Shape& shape,
                             const float* data, long count) {
  check(name.size() < 65536 && shape.size() < 256,
        "format error: checkpoint record limits");
  uint16_t nl = uint16_t(name.size());
  write_bytes(f, &nl, sizeof nl, path);
  write_bytes(f, name.data(), name.size(), path);
  uint8_t rank = uint8_t(shape.size());
  write_bytes(f, &rank, sizeof rank, path);
  for (int d : shape) {
    uint32_t u = uint32_t(d);
    write_bytes(f, &u, sizeof u, path);
  }
  write_bytes(f, data, sizeof(float) * size_t(count), path);
}

struct RecordF32 {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

inline RecordF32 read_record_f32(FILE* f, const std::string& path) {
  RecordF32 r;
  uint16_t nl = 0;
  read_bytes(f, &nl, sizeof nl, path);
  r.name.resize(nl);
  read_bytes(f, r.name.data(), nl, path);
  uint8_t rank = 0;
  read_bytes(f, &rank, sizeof rank, path);
  long count = 1;
  for (int i = 0; i < rank; ++i) {
    uint32_t d = 0;
    read_bytes(f, &d, sizeof d, path);
    if (d == 0 || d >= (1u << 28)) {
      std::fclose(f);
      throw Error("format error: implausible dimension in '" + path + "'");
    }
    r.shape.push_back(int(d));
    count *= d;
  }
  r.data.resize(size_t(count));
  read_bytes(f, r.data.data(), sizeof(float) * size_t(count), path);
  return r;
}

inline ordered_json header_to_json(const CheckpointHeader& h) {
  ordered_json j;
  j["model"] = model_config_to_json(h.model);
  j["dsp"] = dsp_config_to_json(h.dsp);
  ordered_json s;
  s["min_val"] = h.stats.min_val;
  s["max_val"] = h.stats.max_val;
  j["stats"] = s;
  j["step"] = h.step;
  return j;
}

inline CheckpointHeader header_from_json(const ordered_json& j) {
  CheckpointHeader h;
  check(j.contains("model") && j.contains("dsp") && j.contains("stats") &&
            j.contains("step"),
        "format error: checkpoint header incomplete");
  h.model = model_config_from_json(j["model"]);
  h.dsp = dsp_config_from_json(j["dsp"]);
  fetch(j["stats"], "min_val", h.stats.min_val);
  fetch(j["stats"], "max_val", h.stats.max_val);
  h.stats.validate();
  h.step = j["step"].get<long>();
  return h;
}

// Reads magic + JSON header, leaving the stream positioned at the
// parameter count.
inline CheckpointHeader read_header_section(FILE* f,
                                            const std::string& path) {
  char magic[4];
  read_bytes(f, magic, 4, path);
  if (std::memcmp(magic, "DVC1", 4) != 0) {
    std::fclose(f);
    throw Error("format error: not a checkpoint file: '" + path + "'");
  }
  uint32_t hl = 0;
  read_bytes(f, &hl, sizeof hl, path);
  if (hl == 0 || hl >= (1u << 20)) {
    std::fclose(f);
    throw Error("format error: implausible header size in '" + path + "'");
  }
  std::string header(hl, '\0');
  read_bytes(f, header.data(), hl, path);
  ordered_json j;
  try {
    j = ordered_json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    std::fclose(f);
    throw Error("format error: checkpoint header JSON in '" + path +
                "': " + e.what());
  }
  return header_from_json(j);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const CheckpointHeader& h,
                     const ParamStore<T>& ps) {
  FILE* f = detail::open_or_throw(path, "wb");
  detail::write_bytes(f, "DVC1", 4, path);
  std::string header = detail::header_to_json(h).dump();
  uint32_t hl = uint32_t(header.size());
  detail::write_bytes(f, &hl, sizeof hl, path);
  detail::write_bytes(f, header.data(), header.size(), path);

  uint32_t np = uint32_t(ps.all().size());
  detail::write_bytes(f, &np, sizeof np, path);
  std::vector<float> buf;
  for (const auto& p : ps.all()) {
    buf.assign(p->value.begin(), p->value.end());
    detail::write_record_f32(f, path, p->name, p->shape, buf.data(),
                             p->numel());
  }

  // Optimizer state for trainable parameters.  Moments that were never
  // allocated serialize as zeros with step 0 — exactly the state a fresh
  // optimizer would start from.
  uint32_t ne = 0;
  for (const auto& p : ps.all()) {
    if (p->trainable) ne += 3;
  }
  detail::write_bytes(f, "OPT1", 4, path);
  detail::write_bytes(f, &ne, sizeof ne, path);
  std::vector<float> zeros;
  for (const auto& p : ps.all()) {
    if (!p->trainable) continue;
    long n = p->numel();
    const float* m = p->adam_m.data();
    const float* v = p->adam_v.data();
    if (p->adam_m.empty()) {
      zeros.assign(size_t(n), 0.0f);
      m = zeros.data();
      v = zeros.data();
    }
    detail::write_record_f32(f, path, p->name + ".m", p->shape, m, n);
    detail::write_record_f32(f, path, p->name + ".v", p->shape, v, n);
    float t = float(p->adam_t);
    detail::write_record_f32(f, path, p->name + ".t", {1}, &t, 1);
  }
  if (std::fclose(f) != 0) {
    throw Error("format error: failed writing '" + path + "'");
  }
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  FILE* f = detail::open_or_throw(path, "rb");
  CheckpointHeader h = detail::read_header_section(f, path);
  std::fclose(f);
  return h;
}

// Loads parameter values (and Adam state, when present) into a store whose
// layout was already built from the header's architecture.  Every stored
// tensor must match a registered parameter exactly.
template <class T>
CheckpointHeader load_checkpoint(const std::string& path, ParamStore<T>& ps) {
  FILE* f = detail::open_or_throw(path, "rb");
  CheckpointHeader h = detail::read_header_section(f, path);

  uint32_t np = 0;
  detail::read_bytes(f, &np, sizeof np, path);
  if (np != ps.all().size()) {
    std::fclose(f);
    throw Error("format error: checkpoint holds " + std::to_string(np) +
                " parameters, model expects " +
                std::to_string(ps.all().size()));
  }
  for (uint32_t i = 0; i < np; ++i) {
    detail::RecordF32 r = detail::read_record_f32(f, path);
    Parameter<T>* p = ps.find(r.name);
    if (!p || p->shape != r.shape) {
      std::fclose(f);
      throw Error("format error: unexpected parameter record " + r.name);
    }
    for (long j = 0; j < p->numel(); ++j) p->value[j] = T(r.data[size_t(j)]);
  }

  char tag[4];
  if (std::fread(tag, 1, 4, f) == 4 && std::memcmp(tag, "OPT1", 4) == 0) {
    uint32_t ne = 0;
    detail::read_bytes(f, &ne, sizeof ne, path);
    for (uint32_t i = 0; i < ne; ++i) {
      detail::RecordF32 r = detail::read_record_f32(f, path);
      size_t dot = r.name.rfind('.');
      if (dot == std::string::npos || dot + 2 != r.name.size()) {
        std::fclose(f);
        throw Error("format error: optimizer entry name " + r.name);
      }
      std::string base = r.name.substr(0, dot);
      char kind = r.name[dot + 1];
      Parameter<T>* p = ps.find(base);
      if (!p || !p->trainable) {
        std::fclose(f);
        throw Error("format error: optimizer entry for unknown parameter " +
                    r.name);
      }
      if (kind == 'm' && p->shape == r.shape) {
        p->adam_m.assign(r.data.begin(), r.data.end());
      } else if (kind == 'v' && p->shape == r.shape) {
        p->adam_v.assign(r.data.begin(), r.data.end());
      } else if (kind == 't' && r.data.size() == 1) {
        p->adam_t = long(r.data[0]);
      } else {
        std::fclose(f);
        throw Error("format error: malformed optimizer entry " + r.name);
      }
    }
  }
  std::fclose(f);
  return h;
}

}  // namespace dvae
