#pragma once

// Synthetic two-voice corpus for overfit and conversion experiments.  Each
// "speaker" is a harmonic instrument with a fixed fundamental register and
// spectral envelope (that is the voice identity); each utterance index maps
// to a melody (that is the linguistic content).  Utterance i of speaker A
// and utterance i of speaker B play the same melody with different timbre,
// which gives conversion experiments a known ground-truth rendition on both
// sides.  Everything is a closed-form function of (speaker, utterance), so
// corpus generation is deterministic.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/wav.hpp"

namespace dvae {

struct ToyVoice {
  double f0;          // base fundamental, Hz
  double decay;       // harmonic amplitude rolloff exponent: 1 / h^decay
  double even_scale;  // attenuation of even harmonics (odd/even balance)
};

inline ToyVoice toy_voice(int speaker) {
  // Two clearly separated timbres: a low bright voice and a higher mellow
  // one with suppressed even harmonics.
  if (speaker % 2 == 0) return {155.0, 0.8, 1.0};
  return {220.0, 1.6, 0.35};
}

// Pentatonic scale steps relative to the fundamental.
inline const double* toy_scale() {
  static const double steps[5] = {1.0, 9.0 / 8.0, 5.0 / 4.0, 3.0 / 2.0,
                                  5.0 / 3.0};
  return steps;
}

// The melody for an utterance: `notes` scale degrees derived from a mixed
// counter so different utterance ids give distinct contours.
inline std::vector<int> toy_melody(int utt, int notes) {
  std::vector<int> m(notes);
  uint64_t state = uint64_t(utt) * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull;
  for (int i = 0; i < notes; ++i) {
    state ^= state >> 29;
    state *= 0xBF58476D1CE4E5B9ull;
    state ^= state >> 32;
    m[i] = int(state % 5);
  }
  return m;
}

inline Waveform synth_toy_utterance(int speaker, int utt,
                                    double seconds = 3.0,
                                    int sample_rate = 16000) {
  ToyVoice v = toy_voice(speaker);
  int total = int(seconds * sample_rate);
  int notes = 6;
  int note_len = total / notes;
  std::vector<int> melody = toy_melody(utt, notes);

  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(total, 0.0);

  double nyquist_cap = 7600.0;
  for (int ni = 0; ni < notes; ++ni) {
    double f = v.f0 * toy_scale()[melody[ni]];
    int start = ni * note_len;
    int len = ni == notes - 1 ? total - start : note_len;
    int attack = sample_rate * 3 / 100;   // 30 ms
    int release = sample_rate * 5 / 100;  // 50 ms
    for (int h = 1; f * h < nyquist_cap; ++h) {
      double amp = 1.0 / std::pow(double(h), v.decay);
      if (h % 2 == 0) amp *= v.even_scale;
      // Deterministic per-harmonic phase spread avoids a peaky waveform.
      double phase = 2.39996322972865332 * h;
      double omega = 2.0 * 3.14159265358979323846 * f * h / sample_rate;
      for (int i = 0; i < len; ++i) {
        double env = 1.0;
        if (i < attack) env = double(i) / attack;
        if (len - 1 - i < release) {
          env = std::min(env, double(len - 1 - i) / release);
        }
        w.samples[start + i] += amp * env * std::sin(omega * i + phase);
      }
    }
  }

  double peak = 0.0;
  for (double s : w.samples) peak = std::max(peak, std::abs(s));
  if (peak > 0.0) {
    double g = 0.5 / peak;
    for (double& s : w.samples) s *= g;
  }
  return w;
}

// Writes dir/<speaker>/<utterance>.wav for `n_speakers` voices with
// `n_utts` utterances each, plus a split file listing every speaker as
// training material.  Returns the split file path.
inline std::string write_toy_corpus(const std::string& dir, int n_speakers = 2,
                                    int n_utts = 10, double seconds = 3.0) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (int s = 0; s < n_speakers; ++s) {
    std::string spk = "spk" + std::to_string(s);
    fs::create_directories(fs::path(dir) / spk);
    for (int u = 0; u < n_utts; ++u) {
      char name[32];
      std::snprintf(name, sizeof name, "utt%02d.wav", u);
      save_wav((fs::path(dir) / spk / name).string(),
               synth_toy_utterance(s, u, seconds));
    }
  }
  std::string split_path = (fs::path(dir) / "split.txt").string();
  FILE* f = std::fopen(split_path.c_str(), "w");
  check(f != nullptr, "cannot create split file");
  for (int s = 0; s < n_speakers; ++s) {
    std::fprintf(f, "spk%d train\n", s);
  }
  std::fclose(f);
  return split_path;
}

}  // namespace dvae
