// Corpus scanning, split handling, pair sampling, and feature
// precomputation.  Everything here runs against small corpora generated
// into fresh temp directories.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dvae/data.hpp"
#include "dvae/dsp.hpp"
#include "dvae/features_io.hpp"
#include "dvae/rng.hpp"
#include "dvae/wav.hpp"

using namespace dvae;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir() {
  char tmpl[] = "/tmp/dvae_data_XXXXXX";
  char* p = mkdtemp(tmpl);
  REQUIRE(p != nullptr);
  return std::string(p);
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  REQUIRE(out.good());
  out << body;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

// A constant-valued normalized feature file: easy to trace back to its
// origin after cropping.
void write_const_features(const std::string& path, int frames, int mels,
                          float value) {
  MelSpectrogram m;
  m.frames = frames;
  m.n_mels = mels;
  m.normalized = true;
  m.data.assign(size_t(frames) * mels, value);
  save_features(path, m);
}

Waveform sine_wav(double hz, long samples, double amp = 0.4) {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(size_t(samples));
  for (long i = 0; i < samples; ++i) {
    w.samples[size_t(i)] = amp * std::sin(2.0 * M_PI * hz * double(i) / 16000.0);
  }
  return w;
}

}  // namespace

TEST_CASE("split file parsing") {
  std::string dir = tmp_dir();

  write_text(dir + "/ok.txt", "spk1 train\n\nspk2 test\n");
  auto split = load_split(dir + "/ok.txt");
  REQUIRE(split.size() == 2u);
  CHECK(split.at("spk1") == true);
  CHECK(split.at("spk2") == false);

  write_text(dir + "/tag.txt", "spk1 validation\n");
  CHECK_THROWS_WITH(load_split(dir + "/tag.txt"),
                    Catch::Matchers::ContainsSubstring("manifest error"));

  write_text(dir + "/extra.txt", "spk1 train extra\n");
  CHECK_THROWS_WITH(load_split(dir + "/extra.txt"),
                    Catch::Matchers::ContainsSubstring("manifest error"));

  write_text(dir + "/dup.txt", "spk1 train\nspk1 test\n");
  CHECK_THROWS_WITH(load_split(dir + "/dup.txt"),
                    Catch::Matchers::ContainsSubstring("duplicate"));

  CHECK_THROWS_WITH(load_split(dir + "/does_not_exist.txt"),
                    Catch::Matchers::ContainsSubstring("manifest error"));

  fs::remove_all(dir);
}

TEST_CASE("default split puts a ~4/109 share at the lexicographic tail") {
  std::vector<std::string> ids;
  for (int i = 0; i < 109; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%03d", i);
    ids.push_back(buf);
  }
  auto split = default_split(ids);
  int n_test = 0;
  for (const auto& [id, train] : split) {
    if (!train) ++n_test;
  }
  CHECK(n_test == 4);
  CHECK_FALSE(split.at("p108"));  // tail is test
  CHECK_FALSE(split.at("p105"));
  CHECK(split.at("p104"));  // head is train

  // tiny corpora round to zero test speakers
  auto two = default_split({"a", "b"});
  CHECK(two.at("a"));
  CHECK(two.at("b"));

  // 27 * 4 / 109 rounds to 1
  std::vector<std::string> ids27(ids.begin(), ids.begin() + 27);
  auto s27 = default_split(ids27);
  int t27 = 0;
  for (const auto& [id, train] : s27) {
    if (!train) ++t27;
  }
  CHECK(t27 == 1);
  CHECK_FALSE(s27.at("p026"));
}

TEST_CASE("corpus scan: lexicographic, extension-filtered, reproducible") {
  std::string dir = tmp_dir();
  // create out of order to prove sorting is not directory order
  fs::create_directories(dir + "/zeta");
  fs::create_directories(dir + "/alpha");
  write_const_features(dir + "/zeta/b.dvf", 4, 2, 0.1f);
  write_const_features(dir + "/zeta/a.dvf", 4, 2, 0.2f);
  write_const_features(dir + "/alpha/x.dvf", 4, 2, 0.3f);
  write_text(dir + "/alpha/notes.txt", "not a feature file");

  auto scan1 = scan_corpus_flat(dir, ".dvf");
  REQUIRE(scan1.size() == 2u);
  CHECK(scan1[0].id == "alpha");
  CHECK(scan1[1].id == "zeta");
  REQUIRE(scan1[1].utt_names.size() == 2u);
  CHECK(scan1[1].utt_names[0] == "a");
  CHECK(scan1[1].utt_names[1] == "b");
  CHECK(scan1[0].utt_names == std::vector<std::string>{"x"});

  auto scan2 = scan_corpus_flat(dir, ".dvf");
  REQUIRE(scan2.size() == scan1.size());
  for (size_t i = 0; i < scan1.size(); ++i) {
    CHECK(scan1[i].id == scan2[i].id);
    CHECK(scan1[i].utt_paths == scan2[i].utt_paths);
  }

  // no .wav files anywhere -> manifest error
  CHECK_THROWS_WITH(scan_corpus_flat(dir, ".wav"),
                    Catch::Matchers::ContainsSubstring("manifest error"));
  CHECK_THROWS_WITH(scan_corpus_flat(dir + "/missing", ".dvf"),
                    Catch::Matchers::ContainsSubstring("manifest error"));

  fs::remove_all(dir);
}

TEST_CASE("scan_corpus enforces split coverage and pairing needs") {
  std::string dir = tmp_dir();
  fs::create_directories(dir + "/sa");
  fs::create_directories(dir + "/sb");
  write_const_features(dir + "/sa/u1.dvf", 4, 2, 0.1f);
  write_const_features(dir + "/sa/u2.dvf", 4, 2, 0.2f);
  write_const_features(dir + "/sb/u1.dvf", 4, 2, 0.3f);

  std::map<std::string, bool> good = {{"sa", true}, {"sb", false}};
  CorpusManifest m = scan_corpus(dir, good, ".dvf");
  REQUIRE(m.speakers.size() == 2u);
  CHECK(m.speakers[0].train);
  CHECK_FALSE(m.speakers[1].train);
  REQUIRE(m.train_speakers.size() == 1u);
  CHECK(m.train_speakers[0] == 0u);

  std::map<std::string, bool> unknown = {
      {"sa", true}, {"sb", false}, {"ghost", true}};
  CHECK_THROWS_WITH(scan_corpus(dir, unknown, ".dvf"),
                    Catch::Matchers::ContainsSubstring("ghost"));

  std::map<std::string, bool> partial = {{"sa", true}};
  CHECK_THROWS_WITH(scan_corpus(dir, partial, ".dvf"),
                    Catch::Matchers::ContainsSubstring("missing from split"));

  // sb has one utterance: fine as test, fatal as train
  std::map<std::string, bool> sb_train = {{"sa", true}, {"sb", true}};
  CHECK_THROWS_WITH(scan_corpus(dir, sb_train, ".dvf"),
                    Catch::Matchers::ContainsSubstring("at least 2"));

  std::map<std::string, bool> all_test = {{"sa", false}, {"sb", false}};
  CHECK_THROWS_WITH(scan_corpus(dir, all_test, ".dvf"),
                    Catch::Matchers::ContainsSubstring("no train speakers"));

  fs::remove_all(dir);
}

TEST_CASE("pair sampler: distribution, pairing, padding, determinism") {
  const int frames = 4, mels = 2;
  std::string dir = tmp_dir();
  // 4 speakers x 3 utterances, constant value encodes (speaker, utterance)
  for (int s = 0; s < 4; ++s) {
    std::string sp = dir + "/spk" + std::to_string(s);
    fs::create_directories(sp);
    for (int u = 0; u < 3; ++u) {
      write_const_features(sp + "/u" + std::to_string(u) + ".dvf", 6, mels,
                           0.2f * s + 0.05f * u);
    }
  }
  CorpusManifest m = scan_corpus(dir, {}, ".dvf");  // default: all train
  REQUIRE(m.train_speakers.size() == 4u);

  PairSampler sampler(m, frames, mels);
  Rng rng(1234);
  std::map<std::string, int> speaker_count;
  const int N = 10000;
  for (int i = 0; i < N; ++i) {
    SegmentPair p = sampler.sample(rng);
    speaker_count[p.speaker_id]++;
    REQUIRE(p.utt1 != p.utt2);  // distinct utterances, same speaker
    REQUIRE(p.x1.size() == size_t(frames) * mels);
    // constant files: every sample value identifies its source utterance
    int s = p.speaker_id.back() - '0';
    int u1 = p.utt1.back() - '0';
    int u2 = p.utt2.back() - '0';
    REQUIRE(p.x1[0] == 0.2f * s + 0.05f * u1);
    REQUIRE(p.x2[0] == 0.2f * s + 0.05f * u2);
  }
  REQUIRE(speaker_count.size() == 4u);
  for (const auto& [id, count] : speaker_count) {
    double share = double(count) / N;
    CHECK(share > 0.22);
    CHECK(share < 0.28);
  }

  // identical seeds give identical sample streams
  PairSampler s1(m, frames, mels), s2(m, frames, mels);
  Rng r1(777), r2(777);
  for (int i = 0; i < 20; ++i) {
    SegmentPair a = s1.sample(r1);
    SegmentPair b = s2.sample(r2);
    REQUIRE(a.speaker_id == b.speaker_id);
    REQUIRE(a.utt1 == b.utt1);
    REQUIRE(a.utt2 == b.utt2);
    REQUIRE(a.x1 == b.x1);
    REQUIRE(a.x2 == b.x2);
  }

  fs::remove_all(dir);
}

TEST_CASE("pair sampler zero-pads short utterances") {
  const int frames = 4, mels = 3;
  std::string dir = tmp_dir();
  fs::create_directories(dir + "/solo");
  write_const_features(dir + "/solo/u0.dvf", 2, mels, 0.7f);  // 2 < 4 frames
  write_const_features(dir + "/solo/u1.dvf", 2, mels, 0.9f);

  CorpusManifest m = scan_corpus(dir, {{"solo", true}}, ".dvf");
  PairSampler sampler(m, frames, mels);
  Rng rng(5);
  SegmentPair p = sampler.sample(rng);
  for (int f = 0; f < frames; ++f) {
    for (int c = 0; c < mels; ++c) {
      float v = p.x1[size_t(f) * mels + c];
      if (f < 2) {
        REQUIRE((v == 0.7f || v == 0.9f));
      } else {
        REQUIRE(v == 0.0f);  // right-padded with normalized silence
      }
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("pair sampler rejects unusable feature files") {
  const int mels = 3;
  std::string dir = tmp_dir();
  fs::create_directories(dir + "/sa");

  MelSpectrogram raw;  // not normalized
  raw.frames = 5;
  raw.n_mels = mels;
  raw.normalized = false;
  raw.data.assign(15, -3.0f);
  save_features(dir + "/sa/u0.dvf", raw);
  write_const_features(dir + "/sa/u1.dvf", 5, mels, 0.5f);

  CorpusManifest m = scan_corpus(dir, {{"sa", true}}, ".dvf");
  PairSampler sampler(m, 4, mels);
  Rng rng(9);
  CHECK_THROWS_WITH(
      [&] {
        for (int i = 0; i < 8; ++i) sampler.sample(rng);  // must hit u0
      }(),
      Catch::Matchers::ContainsSubstring("stats error"));

  // wrong mel width: a corpus of otherwise-fine normalized files read by a
  // sampler expecting one more mel bin
  std::string dir2 = tmp_dir();
  fs::create_directories(dir2 + "/sb");
  write_const_features(dir2 + "/sb/u0.dvf", 5, mels, 0.4f);
  write_const_features(dir2 + "/sb/u1.dvf", 5, mels, 0.5f);
  CorpusManifest m2 = scan_corpus(dir2, {{"sb", true}}, ".dvf");
  PairSampler narrow(m2, 4, mels + 1);
  Rng rng2(9);
  CHECK_THROWS_WITH(narrow.sample(rng2),
                    Catch::Matchers::ContainsSubstring("shape error"));

  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("feature precomputation: cache layout, train-only stats, rerun") {
  std::string corpus = tmp_dir();
  fs::create_directories(corpus + "/sa");
  fs::create_directories(corpus + "/sb");
  fs::create_directories(corpus + "/sc");
  save_wav(corpus + "/sa/u0.wav", sine_wav(300.0, 5120));
  save_wav(corpus + "/sa/u1.wav", sine_wav(500.0, 5120));
  save_wav(corpus + "/sb/u0.wav", sine_wav(800.0, 5120, 0.2));
  save_wav(corpus + "/sb/u1.wav", sine_wav(1200.0, 5120, 0.2));
  save_wav(corpus + "/sc/u0.wav", sine_wav(2000.0, 5120, 0.8));  // test only

  std::map<std::string, bool> split = {
      {"sa", true}, {"sb", true}, {"sc", false}};
  SpectrogramConfig cfg;

  std::string out1 = tmp_dir();
  NormalizationStats stats = precompute_features(corpus, split, cfg, out1);

  // stats must come from the train speakers only
  MelFilterbank fb = build_mel_filterbank(cfg);
  double lo = 1e300, hi = -1e300;
  for (std::string p : {"/sa/u0.wav", "/sa/u1.wav", "/sb/u0.wav",
                        "/sb/u1.wav"}) {
    MelSpectrogram mel = wav_to_logmel(load_wav(corpus + p, 16000), cfg, fb);
    for (float v : mel.data) {
      lo = std::min(lo, double(v));
      hi = std::max(hi, double(v));
    }
  }
  CHECK(stats.min_val == lo);
  CHECK(stats.max_val == hi);

  // cache mirrors the corpus, test speakers included, plus stats.dvs
  for (std::string p : {"/sa/u0.dvf", "/sa/u1.dvf", "/sb/u0.dvf",
                        "/sb/u1.dvf", "/sc/u0.dvf"}) {
    REQUIRE(fs::exists(out1 + p));
  }
  NormalizationStats loaded = load_stats(out1 + "/stats.dvs");
  CHECK(loaded.min_val == stats.min_val);
  CHECK(loaded.max_val == stats.max_val);

  MelSpectrogram cached = load_features(out1 + "/sa/u0.dvf");
  CHECK(cached.normalized);
  CHECK(cached.n_mels == 80);
  for (float v : cached.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  // a second run over the same corpus writes byte-identical artifacts
  std::string out2 = tmp_dir();
  precompute_features(corpus, split, cfg, out2);
  for (std::string p : {"/sa/u0.dvf", "/sb/u1.dvf", "/sc/u0.dvf",
                        "/stats.dvs"}) {
    REQUIRE(slurp(out1 + p) == slurp(out2 + p));
  }

  fs::remove_all(out1);
  fs::remove_all(out2);
  fs::remove_all(corpus);
}

TEST_CASE("feature precomputation failure policy") {
  std::string corpus = tmp_dir();
  fs::create_directories(corpus + "/sa");
  save_wav(corpus + "/sa/u0.wav", sine_wav(300.0, 5120));
  save_wav(corpus + "/sa/u1.wav", sine_wav(500.0, 5120));
  write_text(corpus + "/sa/u2.wav", "this is not a wav file");

  std::map<std::string, bool> split = {{"sa", true}};
  SpectrogramConfig cfg;

  std::string out = tmp_dir();
  CHECK_THROWS_WITH(precompute_features(corpus, split, cfg, out),
                    Catch::Matchers::ContainsSubstring("format error"));

  // with continue_on_error the bad file is dropped, the rest written
  std::string out2 = tmp_dir();
  NormalizationStats stats =
      precompute_features(corpus, split, cfg, out2, true);
  stats.validate();
  CHECK(fs::exists(out2 + "/sa/u0.dvf"));
  CHECK(fs::exists(out2 + "/sa/u1.dvf"));
  CHECK_FALSE(fs::exists(out2 + "/sa/u2.dvf"));
  CHECK(fs::exists(out2 + "/stats.dvs"));

  fs::remove_all(out);
  fs::remove_all(out2);
  fs::remove_all(corpus);
}
