#pragma once

// Run configuration: typed sections, strict JSON parsing, defaults.
//
// The config file is a single JSON object with up to four sections —
// "dsp", "model", "train", "paths" — each itself an object.  Unknown keys
// anywhere are rejected outright: a typo that silently fell back to a
// default would be far more expensive to debug than a hard error.  Every
// key has a default, so {} is a valid config describing the stock setup.

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dvae/common.hpp"
#include "dvae/dsp.hpp"

namespace dvae {

using ordered_json = nlohmann::ordered_json;

// Architecture and loss weighting.  Latent layout: the first k1 latent
// channels are the speaker block, the remaining k2 the content block.
// The width knobs default to the full-size network; tests shrink them to
// keep end-to-end runs cheap without changing any wiring.
struct ModelConfig {
  int k1 = 8;              // speaker latent dim
  int k2 = 56;             // content latent dim
  int segment_frames = 64; // frames per training segment
  int n_mels = 80;
  double beta = 1.0;       // KL weight

  int conv_channels = 512;      // conv stack width (encoder and decoder)
  int enc_lstm_hidden = 64;     // encoder BiLSTM hidden size (per direction)
  int enc_fc = 256;             // encoder bottleneck FC width
  int dec_fc = 256;             // decoder first FC width
  int dec_seq_channels = 128;   // per-frame width after the latent expansion
  int dec_lstm1_hidden = 512;   // decoder LSTM before the conv stack
  int dec_lstm2_hidden = 1024;  // decoder LSTM after the conv stack
  int postnet_channels = 512;   // post-net conv width

  int k() const { return k1 + k2; }

  void validate() const {
    if (k1 < 1 || k2 < 1) {
      throw ValidationError("config error: latent dims must be positive");
    }
    if (beta < 1.0) {
      throw ValidationError("config error: beta must be >= 1");
    }
    if (segment_frames < 4 || segment_frames % 4 != 0) {
      throw ValidationError(
          "config error: segment_frames must be a positive multiple of 4 "
          "(the encoder downsamples frames by 4)");
    }
    if (n_mels < 1 || conv_channels < 1 || enc_lstm_hidden < 1 ||
        enc_fc < 1 || dec_fc < 1 || dec_seq_channels < 1 ||
        dec_lstm1_hidden < 1 || dec_lstm2_hidden < 1 ||
        postnet_channels < 1) {
      throw ValidationError("config error: layer widths must be positive");
    }
  }
};

struct TrainConfig {
  int batch_size = 8;  // pairs per step
  double lr = 1e-4;
  long total_steps = 1000;
  long checkpoint_every = 1000;
  uint64_t seed = 42;
  std::string precision = "f32";  // "f32" or "f64"
  bool clip_gradients = false;    // safety valve: global-norm clip at 100
  double beta = 1.0;              // mirrors ModelConfig::beta

  void validate() const {
    if (batch_size < 1) {
      throw ValidationError("config error: batch_size must be >= 1");
    }
    if (lr <= 0.0) {
      throw ValidationError("config error: lr must be > 0");
    }
    if (total_steps < 0 || checkpoint_every < 1) {
      throw ValidationError("config error: step counts out of range");
    }
    if (precision != "f32" && precision != "f64") {
      throw ValidationError("config error: precision must be f32 or f64");
    }
    if (beta < 1.0) {
      throw ValidationError("config error: beta must be >= 1");
    }
  }
};

struct PathsConfig {
  std::string features_dir;  // where cmd_features wrote the cache + stats
};

struct Config {
  SpectrogramConfig dsp;
  ModelConfig model;
  TrainConfig train;
  PathsConfig paths;
};

namespace detail {

inline void reject_unknown(const ordered_json& obj, const char* section,
                           std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ValidationError(std::string("config error: unknown key \"") +
                            it.key() + "\" in " + section);
    }
  }
}

template <class V>
void fetch(const ordered_json& obj, const char* key, V& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config error: bad value type for \"") +
                          key + "\"");
  }
}

}  // namespace detail

inline Config parse_config_json(const std::string& text) {
  ordered_json root;
  try {
    root = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config error: invalid JSON: ") +
                          e.what());
  }
  if (!root.is_object()) {
    throw ValidationError("config error: top level must be an object");
  }
  detail::reject_unknown(root, "config", {"dsp", "model", "train", "paths"});

  Config cfg;
  if (root.contains("dsp")) {
    const auto& d = root["dsp"];
    if (!d.is_object()) throw ValidationError("config error: dsp section");
    detail::reject_unknown(d, "dsp",
                           {"fft_size", "hop", "n_mels", "fmin", "fmax",
                            "sample_rate", "griffin_lim_iters"});
    detail::fetch(d, "fft_size", cfg.dsp.fft_size);
    detail::fetch(d, "hop", cfg.dsp.hop);
    detail::fetch(d, "n_mels", cfg.dsp.n_mels);
    detail::fetch(d, "fmin", cfg.dsp.fmin);
    detail::fetch(d, "fmax", cfg.dsp.fmax);
    detail::fetch(d, "sample_rate", cfg.dsp.sample_rate);
    detail::fetch(d, "griffin_lim_iters", cfg.dsp.griffin_lim_iters);
  }
  if (root.contains("model")) {
    const auto& m = root["model"];
    if (!m.is_object()) throw ValidationError("config error: model section");
    detail::reject_unknown(
        m, "model",
        {"k1", "k2", "segment_frames", "n_mels", "beta", "conv_channels",
         "enc_lstm_hidden", "enc_fc", "dec_fc", "dec_seq_channels",
         "dec_lstm1_hidden", "dec_lstm2_hidden", "postnet_channels"});
    detail::fetch(m, "k1", cfg.model.k1);
    detail::fetch(m, "k2", cfg.model.k2);
    detail::fetch(m, "segment_frames", cfg.model.segment_frames);
    detail::fetch(m, "n_mels", cfg.model.n_mels);
    detail::fetch(m, "beta", cfg.model.beta);
    detail::fetch(m, "conv_channels", cfg.model.conv_channels);
    detail::fetch(m, "enc_lstm_hidden", cfg.model.enc_lstm_hidden);
    detail::fetch(m, "enc_fc", cfg.model.enc_fc);
    detail::fetch(m, "dec_fc", cfg.model.dec_fc);
    detail::fetch(m, "dec_seq_channels", cfg.model.dec_seq_channels);
    detail::fetch(m, "dec_lstm1_hidden", cfg.model.dec_lstm1_hidden);
    detail::fetch(m, "dec_lstm2_hidden", cfg.model.dec_lstm2_hidden);
    detail::fetch(m, "postnet_channels", cfg.model.postnet_channels);
  }
  if (root.contains("train")) {
    const auto& t = root["train"];
    if (!t.is_object()) throw ValidationError("config error: train section");
    detail::reject_unknown(t, "train",
                           {"batch_size", "lr", "total_steps",
                            "checkpoint_every", "seed", "precision",
                            "clip_gradients", "beta"});
    detail::fetch(t, "batch_size", cfg.train.batch_size);
    detail::fetch(t, "lr", cfg.train.lr);
    detail::fetch(t, "total_steps", cfg.train.total_steps);
    detail::fetch(t, "checkpoint_every", cfg.train.checkpoint_every);
    detail::fetch(t, "seed", cfg.train.seed);
    detail::fetch(t, "precision", cfg.train.precision);
    detail::fetch(t, "clip_gradients", cfg.train.clip_gradients);
    detail::fetch(t, "beta", cfg.train.beta);
  }
  if (root.contains("paths")) {
    const auto& p = root["paths"];
    if (!p.is_object()) throw ValidationError("config error: paths section");
    detail::reject_unknown(p, "paths", {"features_dir"});
    detail::fetch(p, "features_dir", cfg.paths.features_dir);
  }

  // "beta" may be given in either the model or the train section (it is a
  // property of the training objective); when both are present they must
  // agree.  Whichever was set propagates to both structs.
  bool in_model = root.contains("model") && root["model"].contains("beta");
  bool in_train = root.contains("train") && root["train"].contains("beta");
  if (in_model && in_train && cfg.model.beta != cfg.train.beta) {
    throw ValidationError(
        "config error: beta given in both model and train sections with "
        "different values");
  }
  if (in_model && !in_train) cfg.train.beta = cfg.model.beta;
  if (in_train && !in_model) cfg.model.beta = cfg.train.beta;

  cfg.dsp.validate();
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("config error: cannot open " + path);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_json(ss.str());
}

// JSON encodings used inside checkpoint headers (ordered so the byte
// stream is deterministic).

inline ordered_json model_config_to_json(const ModelConfig& m) {
  ordered_json j;
  j["k1"] = m.k1;
  j["k2"] = m.k2;
  j["segment_frames"] = m.segment_frames;
  j["n_mels"] = m.n_mels;
  j["beta"] = m.beta;
  j["conv_channels"] = m.conv_channels;
  j["enc_lstm_hidden"] = m.enc_lstm_hidden;
  j["enc_fc"] = m.enc_fc;
  j["dec_fc"] = m.dec_fc;
  j["dec_seq_channels"] = m.dec_seq_channels;
  j["dec_lstm1_hidden"] = m.dec_lstm1_hidden;
  j["dec_lstm2_hidden"] = m.dec_lstm2_hidden;
  j["postnet_channels"] = m.postnet_channels;
  return j;
}

inline ModelConfig model_config_from_json(const ordered_json& j) {
  ModelConfig m;
  detail::fetch(j, "k1", m.k1);
  detail::fetch(j, "k2", m.k2);
  detail::fetch(j, "segment_frames", m.segment_frames);
  detail::fetch(j, "n_mels", m.n_mels);
  detail::fetch(j, "beta", m.beta);
  detail::fetch(j, "conv_channels", m.conv_channels);
  detail::fetch(j, "enc_lstm_hidden", m.enc_lstm_hidden);
  detail::fetch(j, "enc_fc", m.enc_fc);
  detail::fetch(j, "dec_fc", m.dec_fc);
  detail::fetch(j, "dec_seq_channels", m.dec_seq_channels);
  detail::fetch(j, "dec_lstm1_hidden", m.dec_lstm1_hidden);
  detail::fetch(j, "dec_lstm2_hidden", m.dec_lstm2_hidden);
  detail::fetch(j, "postnet_channels", m.postnet_channels);
  m.validate();
  return m;
}

inline ordered_json dsp_config_to_json(const SpectrogramConfig& d) {
  ordered_json j;
  j["fft_size"] = d.fft_size;
  j["hop"] = d.hop;
  j["n_mels"] = d.n_mels;
  j["fmin"] = d.fmin;
  j["fmax"] = d.fmax;
  j["sample_rate"] = d.sample_rate;
  j["griffin_lim_iters"] = d.griffin_lim_iters;
  return j;
}

inline SpectrogramConfig dsp_config_from_json(const ordered_json& j) {
  SpectrogramConfig d;
  detail::fetch(j, "fft_size", d.fft_size);
  detail::fetch(j, "hop", d.hop);
  detail::fetch(j, "n_mels", d.n_mels);
  detail::fetch(j, "fmin", d.fmin);
  detail::fetch(j, "fmax", d.fmax);
  detail::fetch(j, "sample_rate", d.sample_rate);
  detail::fetch(j, "griffin_lim_iters", d.griffin_lim_iters);
  d.validate();
  return d;
}

}  // namespace dvae
