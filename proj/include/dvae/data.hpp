#pragma once

// Corpus indexing, train/test splitting, feature precomputation, and
// same-speaker pair sampling.
//
// Directory layout: <root>/<speaker_id>/<utterance>.wav (raw corpus) or
// .dvf (feature cache).  All orderings are lexicographic so scans are
// reproducible, and every random decision in pair sampling consumes draws
// from the caller's generator in a fixed order: speaker, first utterance,
// second utterance, first crop offset, second crop offset.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/dsp.hpp"
#include "dvae/features_io.hpp"
#include "dvae/rng.hpp"
#include "dvae/wav.hpp"

namespace dvae {

struct SpeakerEntry {
  std::string id;
  std::vector<std::string> utt_names;  // file stems, lexicographic
  std::vector<std::string> utt_paths;  // full paths, same order
  bool train = true;
};

struct CorpusManifest {
  std::vector<SpeakerEntry> speakers;   // lexicographic by id
  std::vector<size_t> train_speakers;   // indices into speakers
};

// One training example: two normalized 64-frame segments cut from two
// distinct utterances of one speaker.
struct SegmentPair {
  std::vector<float> x1, x2;  // frames * n_mels, row-major
  std::string speaker_id;
  std::string utt1, utt2;
};

// Split file: one "<speaker_id> <train|test>" line per speaker.
inline std::map<std::string, bool> load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("manifest error: cannot open split file " + path);
  std::map<std::string, bool> split;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, tag, extra;
    ss >> id >> tag;
    if (id.empty() || tag.empty() || (ss >> extra)) {
      throw Error("manifest error: bad split line " + std::to_string(lineno) +
                  ": \"" + line + "\"");
    }
    if (tag != "train" && tag != "test") {
      throw Error("manifest error: split tag must be train or test, got \"" +
                  tag + "\" on line " + std::to_string(lineno));
    }
    if (!split.emplace(id, tag == "train").second) {
      throw Error("manifest error: duplicate speaker " + id +
                  " in split file");
    }
  }
  return split;
}

// Default split when none is given: the classic 105-train / 4-test pattern
// scaled to the corpus at hand (test share 4/109, rounded), with the test
// speakers taken from the lexicographic tail.
inline std::map<std::string, bool> default_split(
    const std::vector<std::string>& speaker_ids) {
  size_t n = speaker_ids.size();
  size_t n_test = size_t(std::lround(double(n) * 4.0 / 109.0));
  if (n_test >= n) n_test = n > 1 ? n - 1 : 0;
  std::map<std::string, bool> split;
  for (size_t i = 0; i < n; ++i) {
    split[speaker_ids[i]] = i < n - n_test;
  }
  return split;
}

// Lists every <root>/<speaker>/<utterance>.<ext> with no split logic or
// pairing constraints: what the embedding/conversion tools need.
inline std::vector<SpeakerEntry> scan_corpus_flat(const std::string& root,
                                                  const std::string& ext) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) {
    throw Error("manifest error: corpus root is not a directory: " + root);
  }
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) ids.push_back(entry.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());

  std::vector<SpeakerEntry> out;
  for (const std::string& id : ids) {
    SpeakerEntry sp;
    sp.id = id;
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& f : fs::directory_iterator(root + "/" + id)) {
      if (f.is_regular_file() && f.path().extension() == ext) {
        files.emplace_back(f.path().stem().string(), f.path().string());
      }
    }
    std::sort(files.begin(), files.end());
    for (auto& [stem, path] : files) {
      sp.utt_names.push_back(stem);
      sp.utt_paths.push_back(path);
    }
    if (!sp.utt_names.empty()) out.push_back(std::move(sp));
  }
  if (out.empty()) {
    throw Error("manifest error: no speakers with " + ext + " files under " +
                root);
  }
  return out;
}

// Scans <root>/<speaker>/<utterance>.<ext> into a manifest.  When the split
// map is empty the default split rule applies; otherwise it must cover
// exactly the speakers on disk.  Train speakers need at least two
// utterances (pairing draws two distinct ones).
inline CorpusManifest scan_corpus(const std::string& root,
                                  const std::map<std::string, bool>& split,
                                  const std::string& ext) {
  CorpusManifest m;
  m.speakers = scan_corpus_flat(root, ext);

  std::map<std::string, bool> eff = split;
  if (eff.empty()) {
    std::vector<std::string> found;
    for (const auto& sp : m.speakers) found.push_back(sp.id);
    eff = default_split(found);
  } else {
    for (const auto& [id, tag] : eff) {
      (void)tag;
      bool present = false;
      for (const auto& sp : m.speakers) {
        if (sp.id == id) present = true;
      }
      if (!present) {
        throw Error("manifest error: split lists speaker " + id +
                    " with no files under " + root);
      }
    }
  }

  for (size_t i = 0; i < m.speakers.size(); ++i) {
    auto& sp = m.speakers[i];
    auto it = eff.find(sp.id);
    if (it == eff.end()) {
      throw Error("manifest error: speaker " + sp.id +
                  " missing from split file");
    }
    sp.train = it->second;
    if (sp.train) {
      if (sp.utt_names.size() < 2) {
        throw Error("manifest error: train speaker " + sp.id + " has " +
                    std::to_string(sp.utt_names.size()) +
                    " utterances, pairing needs at least 2");
      }
      m.train_speakers.push_back(i);
    }
  }
  if (m.train_speakers.empty()) {
    throw Error("manifest error: no train speakers in split");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Pair sampling over a feature-cache manifest (.dvf files, normalized).
// Features are memoized in RAM after first load.
// ---------------------------------------------------------------------------

class PairSampler {
 public:
  PairSampler(const CorpusManifest& manifest, int segment_frames, int n_mels)
      : m_(manifest), frames_(segment_frames), mels_(n_mels) {}

  // Draw order is fixed: speaker, utterance 1, utterance 2 (distinct,
  // without replacement), offset 1, offset 2.  Utterances shorter than the
  // segment are right-padded with zeros (normalized silence).
  SegmentPair sample(Rng& rng) {
    const SpeakerEntry& sp =
        m_.speakers[m_.train_speakers[size_t(rng.below(
            uint64_t(m_.train_speakers.size())))]];
    uint64_t n = sp.utt_names.size();
    uint64_t u1 = rng.below(n);
    uint64_t u2 = rng.below(n - 1);
    if (u2 >= u1) ++u2;

    SegmentPair out;
    out.speaker_id = sp.id;
    out.utt1 = sp.utt_names[size_t(u1)];
    out.utt2 = sp.utt_names[size_t(u2)];
    out.x1 = crop(load(sp.utt_paths[size_t(u1)]), rng);
    out.x2 = crop(load(sp.utt_paths[size_t(u2)]), rng);
    return out;
  }

 private:
  const MelSpectrogram& load(const std::string& path) {
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    MelSpectrogram mel = load_features(path);
    check(mel.normalized, "stats error: feature file not normalized: " + path);
    check(mel.n_mels == mels_, "shape error: feature file " + path + " has " +
                                   std::to_string(mel.n_mels) + " mel bins");
    return cache_.emplace(path, std::move(mel)).first->second;
  }

  std::vector<float> crop(const MelSpectrogram& mel, Rng& rng) {
    std::vector<float> seg(size_t(frames_) * mels_, 0.0f);
    int off = 0;
    if (mel.frames > frames_) {
      off = int(rng.below(uint64_t(mel.frames - frames_ + 1)));
    }
    int usable = std::min(frames_, mel.frames);
    std::memcpy(seg.data(), mel.data.data() + size_t(off) * mels_,
                sizeof(float) * size_t(usable) * mels_);
    return seg;
  }

  const CorpusManifest& m_;
  int frames_;
  int mels_;
  std::map<std::string, MelSpectrogram> cache_;
};

// ---------------------------------------------------------------------------
// Feature precomputation: WAV corpus -> normalized DVF1 cache + stats.
//
// Pass 1 scans the TRAIN split only and accumulates the global log-mel
// min/max; pass 2 normalizes every utterance (train and test) with those
// stats and writes the cache, mirroring the corpus layout under out_dir,
// plus out_dir/stats.dvs.  Per-file I/O problems either abort (default) or,
// with continue_on_error, drop the file with a note on stderr.
// ---------------------------------------------------------------------------

inline NormalizationStats precompute_features(
    const std::string& corpus_root, const std::map<std::string, bool>& split,
    const SpectrogramConfig& cfg, const std::string& out_dir,
    bool continue_on_error = false) {
  namespace fs = std::filesystem;
  CorpusManifest m = scan_corpus(corpus_root, split, ".wav");
  MelFilterbank fb = build_mel_filterbank(cfg);

  std::map<std::string, bool> skipped;
  NormalizationStats stats;
  stats.min_val = 1e300;
  stats.max_val = -1e300;
  for (const auto& sp : m.speakers) {
    if (!sp.train) continue;
    for (const std::string& path : sp.utt_paths) {
      try {
        Waveform w = load_wav(path, cfg.sample_rate);
        MelSpectrogram mel = wav_to_logmel(w, cfg, fb);
        for (float v : mel.data) {
          if (double(v) < stats.min_val) stats.min_val = double(v);
          if (double(v) > stats.max_val) stats.max_val = double(v);
        }
      } catch (const Error& e) {
        if (!continue_on_error) throw;
        std::fprintf(stderr, "warning: skipping %s: %s\n", path.c_str(),
                     e.what());
        skipped[path] = true;
      }
    }
  }
  stats.validate();

  for (const auto& sp : m.speakers) {
    fs::create_directories(out_dir + "/" + sp.id);
    for (size_t i = 0; i < sp.utt_paths.size(); ++i) {
      const std::string& path = sp.utt_paths[i];
      if (skipped.count(path)) continue;
      try {
        Waveform w = load_wav(path, cfg.sample_rate);
        MelSpectrogram mel = wav_to_logmel(w, cfg, fb);
        MelSpectrogram norm = normalize(mel, stats);
        save_features(out_dir + "/" + sp.id + "/" + sp.utt_names[i] + ".dvf",
                      norm);
      } catch (const Error& e) {
        if (!continue_on_error) throw;
        std::fprintf(stderr, "warning: skipping %s: %s\n", path.c_str(),
                     e.what());
      }
    }
  }
  save_stats(out_dir + "/stats.dvs", stats);
  return stats;
}

}  // namespace dvae
