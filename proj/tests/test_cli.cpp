// Command-line tests: exit-code contract, flag validation, and one
// end-to-end pipeline over a small synthetic corpus (generate -> features ->
// train -> embed -> convert -> eval).  The binaries under test are passed in
// by the build as DVAE_CLI_PATH / DVAE_TOYGEN_PATH.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "dvae/features_io.hpp"
#include "dvae/wav.hpp"

using namespace dvae;
namespace fs = std::filesystem;

namespace {

const std::string kCli = DVAE_CLI_PATH;
const std::string kToygen = DVAE_TOYGEN_PATH;

std::string tmp_dir() {
  char tmpl[] = "/tmp/dvae_cli_XXXXXX";
  char* p = mkdtemp(tmpl);
  REQUIRE(p != nullptr);
  return std::string(p);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>{});
}

// Runs a command with stdout+stderr captured into `log`; returns the exit
// code (or -1 if the child did not exit normally).
int run(const std::string& cmd, std::string* log = nullptr) {
  static int counter = 0;
  std::string log_path = "/tmp/dvae_cli_log_" + std::to_string(getpid()) +
                         "_" + std::to_string(counter++) + ".txt";
  int rc = std::system((cmd + " >" + log_path + " 2>&1").c_str());
  if (log) *log = slurp(log_path);
  fs::remove(log_path);
  if (!WIFEXITED(rc)) return -1;
  return WEXITSTATUS(rc);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(in, l)) lines.push_back(l);
  return lines;
}

// Narrow-width 80-mel model: big enough to run the real DSP path, small
// enough that four training steps take seconds.
const char* kConfigJson = R"({
  "dsp": {"griffin_lim_iters": 12},
  "model": {
    "k1": 2, "k2": 3, "segment_frames": 8, "n_mels": 80,
    "conv_channels": 6, "enc_lstm_hidden": 4, "enc_fc": 8,
    "dec_fc": 8, "dec_seq_channels": 4,
    "dec_lstm1_hidden": 6, "dec_lstm2_hidden": 6, "postnet_channels": 5
  },
  "train": {
    "batch_size": 2, "lr": 0.001, "total_steps": 4,
    "checkpoint_every": 2, "seed": 7, "precision": "f32"
  },
  "paths": {"features_dir": "%s"}
})";

std::string write_config(const std::string& root) {
  std::string feats = root + "/feats";
  char buf[2048];
  std::snprintf(buf, sizeof buf, kConfigJson, feats.c_str());
  std::string path = root + "/config.json";
  std::ofstream(path) << buf;
  return path;
}

}  // namespace

TEST_CASE("exit codes: help, missing subcommand, bad flags") {
  std::string log;
  CHECK(run(kCli + " --help", &log) == 0);
  CHECK(log.find("features") != std::string::npos);
  CHECK(log.find("convert") != std::string::npos);

  CHECK(run(kCli + " train --help", &log) == 0);
  CHECK(log.find("--manifest") != std::string::npos);

  CHECK(run(kCli, &log) == 1);  // a subcommand is required

  CHECK(run(kCli + " features --bogus-flag", &log) == 1);

  // missing required option
  CHECK(run(kCli + " eval --pairs /tmp/nope.csv", &log) == 1);

  CHECK(run(kToygen + " --help", &log) == 0);
  CHECK(run(kToygen, &log) == 1);  // --out is required
}

TEST_CASE("exit codes: validation vs runtime errors") {
  std::string root = tmp_dir();
  std::string log;

  // unreadable config is a validation problem -> 1
  CHECK(run(kCli + " train --manifest x --config " + root +
                "/absent.json --out " + root + "/run",
            &log) == 1);
  CHECK(log.find("config error") != std::string::npos);

  // unknown config key -> 1
  std::ofstream(root + "/bad.json") << R"({"train": {"warmup": 5}})";
  CHECK(run(kCli + " train --manifest x --config " + root +
                "/bad.json --out " + root + "/run",
            &log) == 1);
  CHECK(log.find("unknown key \"warmup\"") != std::string::npos);

  // config itself fine, referenced split file missing -> runtime error 2
  std::string cfg = write_config(root);
  CHECK(run(kCli + " train --manifest " + root + "/absent_split.txt" +
                " --config " + cfg + " --out " + root + "/run",
            &log) == 2);
  CHECK(log.find("error:") != std::string::npos);
}

TEST_CASE("pipeline: generate, featurize, train, embed, convert, eval") {
  std::string root = tmp_dir();
  std::string corpus = root + "/corpus";
  std::string feats = root + "/feats";
  std::string cfg = write_config(root);
  std::string log;

  // 2 voices x 3 utterances, 0.8 s each
  REQUIRE(run(kToygen + " --out " + corpus +
                  " --speakers 2 --utts 3 --seconds 0.8",
              &log) == 0);
  REQUIRE(fs::exists(corpus + "/spk0/utt00.wav"));
  REQUIRE(fs::exists(corpus + "/spk1/utt02.wav"));
  REQUIRE(fs::exists(corpus + "/split.txt"));

  REQUIRE(run(kCli + " features --corpus " + corpus + " --out " + feats +
                  " --config " + cfg,
              &log) == 0);
  CHECK(log.find("features: cache written") != std::string::npos);
  REQUIRE(fs::exists(feats + "/stats.dvs"));
  REQUIRE(fs::exists(feats + "/spk0/utt00.dvf"));
  MelSpectrogram m = load_features(feats + "/spk0/utt00.dvf");
  CHECK(m.n_mels == 80);
  CHECK(m.normalized);
  CHECK(m.frames >= 8);

  std::string run_dir = root + "/run";
  REQUIRE(run(kCli + " train --manifest " + corpus + "/split.txt --config " +
                  cfg + " --out " + run_dir,
              &log) == 0);
  CHECK(log.find("train: finished at step 4") != std::string::npos);
  std::string ckpt = run_dir + "/ckpt_000004.dvc";
  REQUIRE(fs::exists(ckpt));
  CHECK(fs::exists(run_dir + "/ckpt_000000.dvc"));
  CHECK(read_lines(run_dir + "/loss.csv").size() == 4);

  // --seed overrides the config seed: a different seed changes the losses
  REQUIRE(run(kCli + " train --manifest " + corpus + "/split.txt --config " +
                  cfg + " --out " + root + "/run_seed9 --seed 9",
              &log) == 0);
  CHECK(slurp(root + "/run_seed9/loss.csv") != slurp(run_dir + "/loss.csv"));

  // embeddings: one CSV row per utterance, speaker id + utt + k1 values
  std::string emb = root + "/emb.csv";
  REQUIRE(run(kCli + " embed --ckpt " + ckpt + " --corpus " + corpus +
                  " --out " + emb,
              &log) == 0);
  std::vector<std::string> rows = read_lines(emb);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].rfind("spk0,utt00,", 0) == 0);
  CHECK(rows[5].rfind("spk1,utt02,", 0) == 0);
  for (const std::string& r : rows) {
    CHECK(std::count(r.begin(), r.end(), ',') == 3);  // spk,utt,e1,e2
  }

  // conversion: output wav plus a mel dump with the source's frame count
  std::string conv = root + "/conv.wav";
  REQUIRE(run(kCli + " convert --ckpt " + ckpt + " --source " + corpus +
                  "/spk0/utt00.wav --target-ref " + corpus +
                  "/spk1/utt00.wav --target-ref " + corpus +
                  "/spk1/utt01.wav --out " + conv,
              &log) == 0);
  REQUIRE(fs::exists(conv));
  REQUIRE(fs::exists(conv + ".dvf"));
  MelSpectrogram cm = load_features(conv + ".dvf");
  MelSpectrogram sm = load_features(feats + "/spk0/utt00.dvf");
  CHECK(cm.frames == sm.frames);
  CHECK(cm.normalized);
  Waveform w = load_wav(conv, 16000);
  CHECK(long(w.samples.size()) == long(cm.frames) * 256);

  // eval: an utterance against itself scores exactly 0 dB
  std::string pairs = root + "/pairs.csv";
  std::string src_wav = corpus + "/spk0/utt00.wav";
  std::ofstream(pairs) << src_wav << "," << src_wav << "\n"
                       << src_wav << "," << conv << "\n";
  std::string report = root + "/report.csv";
  REQUIRE(run(kCli + " eval --pairs " + pairs + " --config " + cfg +
                  " --out " + report,
              &log) == 0);
  std::vector<std::string> rep = read_lines(report);
  REQUIRE(rep.size() == 4);  // 2 pairs + MEAN + STD
  CHECK(rep[0] == src_wav + "," + src_wav + ",0");
  CHECK(rep[2].rfind("MEAN,,", 0) == 0);
  CHECK(rep[3].rfind("STD,,", 0) == 0);
  double self_mcd = 0.0, conv_mcd = 0.0;
  REQUIRE(std::sscanf(rep[0].c_str() + rep[0].rfind(','), ",%lf",
                      &self_mcd) == 1);
  REQUIRE(std::sscanf(rep[1].c_str() + rep[1].rfind(','), ",%lf",
                      &conv_mcd) == 1);
  CHECK(self_mcd == 0.0);
  CHECK(conv_mcd > 0.0);  // a 4-step model is nowhere near transparent
}
