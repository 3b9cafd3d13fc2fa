// Conversion-path tests: speaker embedding extraction (chunking and
// averaging rules), the convert routine's framing contract, synthesis back
// to audio, and the embedding CSV format.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dvae/convert.hpp"
#include "dvae/dsp.hpp"
#include "dvae/model.hpp"
#include "dvae/rng.hpp"

using namespace dvae;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.k1 = 2;
  c.k2 = 3;
  c.segment_frames = 8;
  c.n_mels = 6;
  c.conv_channels = 5;
  c.enc_lstm_hidden = 3;
  c.enc_fc = 7;
  c.dec_fc = 6;
  c.dec_seq_channels = 4;
  c.dec_lstm1_hidden = 5;
  c.dec_lstm2_hidden = 6;
  c.postnet_channels = 4;
  return c;
}

MelSpectrogram random_mel(int frames, int mels, uint64_t seed) {
  MelSpectrogram m;
  m.frames = frames;
  m.n_mels = mels;
  m.normalized = true;
  m.data.resize(size_t(frames) * mels);
  Rng rng(seed);
  for (float& v : m.data) v = float(rng.uniform(0.0, 1.0));
  return m;
}

std::vector<float> chunk_of(const MelSpectrogram& m, int start, int frames) {
  return std::vector<float>(m.data.begin() + size_t(start) * m.n_mels,
                            m.data.begin() + size_t(start + frames) * m.n_mels);
}

}  // namespace

TEST_CASE("single-chunk embedding is that chunk's speaker posterior mean") {
  ModelConfig cfg = tiny_cfg();
  Model<float> model(cfg, 5);
  MelSpectrogram mel = random_mel(cfg.segment_frames, cfg.n_mels, 11);

  SpeakerEmbedding emb = extract_speaker_embedding(model, {mel}, "spk");
  CHECK(emb.speaker_id == "spk");
  CHECK(emb.n_chunks == 1);
  REQUIRE(emb.vec.size() == size_t(cfg.k1));

  LatentPosterior p = model.encode_segment(chunk_of(mel, 0, cfg.segment_frames));
  for (int i = 0; i < cfg.k1; ++i) {
    CHECK(emb.vec[size_t(i)] == p.mu_s[size_t(i)]);  // mean of one value
  }
}

TEST_CASE("embedding averages full chunks and ignores the partial tail") {
  ModelConfig cfg = tiny_cfg();
  Model<float> model(cfg, 5);
  const int F = cfg.segment_frames;

  // 2.5 segments: two full chunks count, the half tail does not
  MelSpectrogram mel = random_mel(F * 2 + F / 2, cfg.n_mels, 13);
  SpeakerEmbedding emb = extract_speaker_embedding(model, {mel});
  CHECK(emb.n_chunks == 2);

  LatentPosterior p1 = model.encode_segment(chunk_of(mel, 0, F));
  LatentPosterior p2 = model.encode_segment(chunk_of(mel, F, F));
  for (int i = 0; i < cfg.k1; ++i) {
    float expect =
        float((double(p1.mu_s[size_t(i)]) + double(p2.mu_s[size_t(i)])) / 2.0);
    CHECK(emb.vec[size_t(i)] == expect);
  }

  // duplicating the reference list leaves the mean unchanged
  SpeakerEmbedding dup = extract_speaker_embedding(model, {mel, mel});
  CHECK(dup.n_chunks == 4);
  CHECK(dup.vec == emb.vec);

  // utterance order does not matter
  MelSpectrogram other = random_mel(F, cfg.n_mels, 14);
  SpeakerEmbedding ab = extract_speaker_embedding(model, {mel, other});
  SpeakerEmbedding ba = extract_speaker_embedding(model, {other, mel});
  CHECK(ab.vec == ba.vec);
}

TEST_CASE("embedding extraction input validation") {
  ModelConfig cfg = tiny_cfg();
  Model<float> model(cfg, 5);

  MelSpectrogram is_short = random_mel(cfg.segment_frames - 1, cfg.n_mels, 15);
  CHECK_THROWS_WITH(extract_speaker_embedding(model, {is_short}),
                    Catch::Matchers::ContainsSubstring("length error"));

  MelSpectrogram raw = random_mel(cfg.segment_frames, cfg.n_mels, 16);
  raw.normalized = false;
  CHECK_THROWS_WITH(extract_speaker_embedding(model, {raw}),
                    Catch::Matchers::ContainsSubstring("domain error"));

  MelSpectrogram wide = random_mel(cfg.segment_frames, cfg.n_mels + 1, 17);
  CHECK_THROWS_WITH(extract_speaker_embedding(model, {wide}),
                    Catch::Matchers::ContainsSubstring("shape error"));

  CHECK_THROWS_WITH(extract_speaker_embedding(model, {}),
                    Catch::Matchers::ContainsSubstring("length error"));
}

TEST_CASE("convert keeps the frame count and the normalized domain") {
  ModelConfig cfg = tiny_cfg();
  Model<float> model(cfg, 7);
  MelSpectrogram ref = random_mel(cfg.segment_frames, cfg.n_mels, 21);
  SpeakerEmbedding target = extract_speaker_embedding(model, {ref});

  for (int frames : {3, cfg.segment_frames, cfg.segment_frames + 5,
                     3 * cfg.segment_frames}) {
    MelSpectrogram src = random_mel(frames, cfg.n_mels, 100 + frames);
    MelSpectrogram out = convert(model, src, target);
    CHECK(out.frames == frames);
    CHECK(out.n_mels == cfg.n_mels);
    CHECK(out.normalized);
    CHECK(out.data.size() == size_t(frames) * cfg.n_mels);
  }

  // inference is draw-free: converting twice gives identical bytes
  MelSpectrogram src = random_mel(cfg.segment_frames + 2, cfg.n_mels, 23);
  MelSpectrogram o1 = convert(model, src, target);
  MelSpectrogram o2 = convert(model, src, target);
  CHECK(o1.data == o2.data);

  // the speaker embedding genuinely steers the output
  SpeakerEmbedding shifted = target;
  for (float& v : shifted.vec) v += 1.0f;
  MelSpectrogram o3 = convert(model, src, shifted);
  CHECK(o3.data != o1.data);
}

TEST_CASE("convert input validation") {
  ModelConfig cfg = tiny_cfg();
  Model<float> model(cfg, 7);
  MelSpectrogram ref = random_mel(cfg.segment_frames, cfg.n_mels, 25);
  SpeakerEmbedding target = extract_speaker_embedding(model, {ref});

  MelSpectrogram raw = random_mel(4, cfg.n_mels, 26);
  raw.normalized = false;
  CHECK_THROWS_WITH(convert(model, raw, target),
                    Catch::Matchers::ContainsSubstring("domain error"));

  MelSpectrogram empty;
  empty.frames = 0;
  empty.n_mels = cfg.n_mels;
  empty.normalized = true;
  CHECK_THROWS_WITH(convert(model, empty, target),
                    Catch::Matchers::ContainsSubstring("length error"));

  SpeakerEmbedding bad = target;
  bad.vec.push_back(0.0f);
  MelSpectrogram src = random_mel(4, cfg.n_mels, 27);
  CHECK_THROWS_WITH(convert(model, src, bad),
                    Catch::Matchers::ContainsSubstring("shape error"));
}

TEST_CASE("synthesize goes back to audio through the stats and filterbank") {
  SpectrogramConfig cfg;  // 80 mels, 1024 fft, hop 256
  cfg.griffin_lim_iters = 8;
  MelFilterbank fb = build_mel_filterbank(cfg);
  NormalizationStats stats{-23.0, 0.0};

  // normalized zeros decode to the stats floor: near-silence
  MelSpectrogram quiet;
  quiet.frames = 8;
  quiet.n_mels = 80;
  quiet.normalized = true;
  quiet.data.assign(8 * 80, 0.0f);
  Waveform w = synthesize(quiet, stats, cfg, fb);
  REQUIRE(long(w.samples.size()) == 8L * cfg.hop);
  CHECK(w.sample_rate == cfg.sample_rate);
  double rms = 0.0;
  for (double s : w.samples) rms += s * s;
  rms = std::sqrt(rms / double(w.samples.size()));
  CHECK(rms < 1e-3);

  // denormalization is mandatory: synthesize must reject raw log-mels by
  // construction (denormalize throws on an unnormalized input)
  MelSpectrogram raw = quiet;
  raw.normalized = false;
  CHECK_THROWS_WITH(synthesize(raw, stats, cfg, fb),
                    Catch::Matchers::ContainsSubstring("domain error"));
}

TEST_CASE("embedding csv format") {
  std::string path = "/tmp/dvae_emb_test.csv";
  std::vector<EmbeddingRow> rows = {
      {"spk0", "utt00", {0.5f, -1.25f}},
      {"spk1", "utt03", {0.0f, 3.0f}},
  };
  save_embeddings(path, rows);

  std::ifstream in(path, std::ios::binary);
  std::string text(std::istreambuf_iterator<char>(in),
                   std::istreambuf_iterator<char>{});
  char expect[256];
  std::snprintf(expect, sizeof expect, "spk0,utt00,%.9g,%.9g\nspk1,utt03,%.9g,%.9g\n",
                0.5, -1.25, 0.0, 3.0);
  CHECK(text == expect);
  std::filesystem::remove(path);
}
