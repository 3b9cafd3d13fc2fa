#pragma once

// Voice conversion: pair a target speaker's embedding with a source
// utterance's content code and decode.
//
// Inference is sampling-free: it always consumes posterior means, never
// reparameterized draws, so identical inputs give identical outputs.  Long
// utterances are processed in non-overlapping segment-sized chunks (the
// model is trained on fixed 64-frame windows); the final partial chunk is
// zero-padded in and truncated back out.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dvae/dsp.hpp"
#include "dvae/features_io.hpp"
#include "dvae/model.hpp"

namespace dvae {

struct SpeakerEmbedding {
  std::vector<float> vec;  // k1 values: mean of mu_s over chunks
  std::string speaker_id;  // optional label
  int n_chunks = 0;
};

// Mean speaker code over every full segment-sized chunk in the given
// utterances.  About two chunks' worth of audio (~2 s) is already a usable
// voice sample; more utterances tighten the estimate.
template <class T>
SpeakerEmbedding extract_speaker_embedding(
    const Model<T>& model, const std::vector<MelSpectrogram>& utterances,
    const std::string& speaker_id = "") {
  int F = model.cfg.segment_frames, M = model.cfg.n_mels;
  std::vector<double> acc(size_t(model.cfg.k1), 0.0);
  int n_chunks = 0;
  for (const auto& mel : utterances) {
    check(mel.normalized,
          "domain error: embedding extraction expects normalized features");
    check(mel.n_mels == M, "shape error: utterance has " +
                               std::to_string(mel.n_mels) + " mel bins");
    for (int start = 0; start + F <= mel.frames; start += F) {
      std::vector<float> seg(mel.data.begin() + size_t(start) * M,
                             mel.data.begin() + size_t(start + F) * M);
      LatentPosterior p = model.encode_segment(seg);
      for (int i = 0; i < model.cfg.k1; ++i) acc[size_t(i)] += p.mu_s[size_t(i)];
      ++n_chunks;
    }
  }
  if (n_chunks == 0) {
    throw Error("length error: no full " + std::to_string(F) +
                "-frame chunk in the reference audio");
  }
  SpeakerEmbedding emb;
  emb.speaker_id = speaker_id;
  emb.n_chunks = n_chunks;
  emb.vec.resize(size_t(model.cfg.k1));
  for (int i = 0; i < model.cfg.k1; ++i) {
    emb.vec[size_t(i)] = float(acc[size_t(i)] / n_chunks);
  }
  return emb;
}

// Converts a normalized source spectrogram to the target voice.  Output has
// exactly the source's frame count and stays in the normalized domain.
template <class T>
MelSpectrogram convert(const Model<T>& model, const MelSpectrogram& source,
                       const SpeakerEmbedding& target) {
  int F = model.cfg.segment_frames, M = model.cfg.n_mels;
  check(source.normalized, "domain error: convert expects normalized input");
  check(source.n_mels == M, "shape error: source mel bins");
  check(int(target.vec.size()) == model.cfg.k1,
        "shape error: embedding size");
  if (source.frames < 1) {
    throw Error("length error: empty source spectrogram");
  }

  MelSpectrogram out;
  out.frames = source.frames;
  out.n_mels = M;
  out.normalized = true;
  out.data.assign(size_t(source.frames) * M, 0.0f);

  for (int start = 0; start < source.frames; start += F) {
    int usable = std::min(F, source.frames - start);
    std::vector<float> seg(size_t(F) * M, 0.0f);
    std::copy_n(source.data.begin() + size_t(start) * M, size_t(usable) * M,
                seg.begin());
    LatentPosterior p = model.encode_segment(seg);
    std::vector<float> z(target.vec.begin(), target.vec.end());
    z.insert(z.end(), p.mu_c.begin(), p.mu_c.end());
    std::vector<float> decoded = model.decode_segment(z);
    std::copy_n(decoded.begin(), size_t(usable) * M,
                out.data.begin() + size_t(start) * M);
  }
  return out;
}

// Normalized mel -> audio: undo the corpus normalization, then invert the
// mel filterbank and estimate phase.
inline Waveform synthesize(const MelSpectrogram& converted,
                           const NormalizationStats& stats,
                           const SpectrogramConfig& cfg,
                           const MelFilterbank& fb,
                           std::vector<double>* residuals = nullptr) {
  MelSpectrogram logmel = denormalize(converted, stats);
  return griffin_lim(logmel, cfg, fb, cfg.griffin_lim_iters, residuals);
}

// Embedding CSV rows: "speaker_id,utterance_id,e1..e8" (one row per
// utterance, coordinates in float decimal).
struct EmbeddingRow {
  std::string speaker_id;
  std::string utterance_id;
  std::vector<float> values;
};

inline void save_embeddings(const std::string& path,
                            const std::vector<EmbeddingRow>& rows) {
  FILE* f = detail::open_or_throw(path, "wb");
  for (const auto& r : rows) {
    std::fprintf(f, "%s,%s", r.speaker_id.c_str(), r.utterance_id.c_str());
    for (float v : r.values) std::fprintf(f, ",%.9g", double(v));
    std::fprintf(f, "\n");
  }
  if (std::fclose(f) != 0) {
    throw Error("format error: failed writing '" + path + "'");
  }
}

}  // namespace dvae
