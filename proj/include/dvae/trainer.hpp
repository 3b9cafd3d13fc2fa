#pragma once

// Training loop: sample same-speaker pairs, build the pair loss, apply one
// Adam update per step, log losses, write checkpoints.
//
// Reproducibility design: every step derives its own generator as
// Rng(mix_seed(seed, step)) and consumes draws in a fixed order (the batch
// of pairs, then the latent noise).  No generator state survives from one
// step to the next, so a run resumed from a step-S checkpoint replays steps
// S+1..N with exactly the draws the uninterrupted run would have used —
// resume equivalence holds by construction rather than by careful state
// serialization.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dvae/checkpoint.hpp"
#include "dvae/config.hpp"
#include "dvae/data.hpp"
#include "dvae/model.hpp"
#include "dvae/optim.hpp"
#include "dvae/rng.hpp"

namespace dvae {

struct StepResult {
  double total = 0, mse = 0, l1 = 0;
  double kl = 0, kl_s = 0, kl_c = 0;
  double grad_norm = 0;
  double recon() const { return mse + l1; }
};

// One optimization step.  `rng` must already be positioned after the batch
// draws; the latent noise is drawn here in order (speaker eps, then content
// eps for segment 1, then segment 2).  Throws on a non-finite loss, naming
// the step and the batch that produced it.
template <class T>
StepResult train_step(Model<T>& model, const AdamConfig& opt,
                      const std::vector<SegmentPair>& batch, Rng& rng,
                      double beta, long step_index) {
  check(!batch.empty(), "state error: empty batch");
  int B = int(batch.size());
  int F = model.cfg.segment_frames, M = model.cfg.n_mels;
  int k1 = model.cfg.k1, k2 = model.cfg.k2;

  std::vector<T> x1(size_t(B) * F * M), x2(size_t(B) * F * M);
  for (int b = 0; b < B; ++b) {
    check(long(batch[b].x1.size()) == long(F) * M &&
              long(batch[b].x2.size()) == long(F) * M,
          "shape error: segment size in batch");
    for (long i = 0; i < long(F) * M; ++i) {
      x1[size_t(b) * F * M + i] = T(batch[b].x1[size_t(i)]);
      x2[size_t(b) * F * M + i] = T(batch[b].x2[size_t(i)]);
    }
  }
  std::vector<T> eps_s(size_t(B) * k1);
  std::vector<T> eps_c(size_t(2 * B) * k2);
  for (auto& v : eps_s) v = T(rng.normal());
  for (auto& v : eps_c) v = T(rng.normal());

  Tape<T> t;
  int x1id = t.constant(std::move(x1), {B, F, M});
  int x2id = t.constant(std::move(x2), {B, F, M});
  int es = t.constant(std::move(eps_s), {B, k1});
  int ec = t.constant(std::move(eps_c), {2 * B, k2});
  PairLossNodes nodes = model.pair_loss(t, x1id, x2id, es, ec, beta, true);

  StepResult r;
  r.total = double(t.v(nodes.total)[0]);
  r.mse = double(t.v(nodes.mse)[0]);
  r.l1 = double(t.v(nodes.l1)[0]);
  r.kl = double(t.v(nodes.kl)[0]);
  r.kl_s = double(t.v(nodes.kl_s)[0]);
  r.kl_c = double(t.v(nodes.kl_c)[0]);
  if (!std::isfinite(r.total)) {
    std::string prov;
    for (const auto& p : batch) {
      prov += " " + p.speaker_id + "(" + p.utt1 + "," + p.utt2 + ")";
    }
    throw Error("numeric error: non-finite loss at step " +
                std::to_string(step_index) + "; batch:" + prov);
  }

  model.ps.zero_grad();
  t.backward(nodes.total);
  r.grad_norm = adam_step(model.ps, opt);
  return r;
}

namespace detail {

// Rewrites the loss log keeping only rows with step <= keep_until.
inline void truncate_loss_log(const std::string& path, long keep_until) {
  std::ifstream in(path);
  if (!in) return;  // nothing to truncate
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    long step = std::strtol(line.c_str(), nullptr, 10);
    if (step <= keep_until) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << "\n";
}

inline bool same_arch(const ModelConfig& a, const ModelConfig& b) {
  return a.k1 == b.k1 && a.k2 == b.k2 &&
         a.segment_frames == b.segment_frames && a.n_mels == b.n_mels &&
         a.conv_channels == b.conv_channels &&
         a.enc_lstm_hidden == b.enc_lstm_hidden && a.enc_fc == b.enc_fc &&
         a.dec_fc == b.dec_fc && a.dec_seq_channels == b.dec_seq_channels &&
         a.dec_lstm1_hidden == b.dec_lstm1_hidden &&
         a.dec_lstm2_hidden == b.dec_lstm2_hidden &&
         a.postnet_channels == b.postnet_channels;
}

inline std::string ckpt_path(const std::string& out_dir, long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06ld.dvc", step);
  return out_dir + "/" + buf;
}

}  // namespace detail

// Full training run.  `manifest_path` is the split file; features and
// stats come from cfg.paths.features_dir.  Writes ckpt_000000.dvc up
// front, a checkpoint every cfg.train.checkpoint_every steps and at the
// end, and appends one "step,total,recon,kl" row per step to loss.csv.
// Returns the path of the final checkpoint.
template <class T>
std::string run_training(const Config& cfg, const std::string& manifest_path,
                         const std::string& out_dir,
                         const std::string& resume_path) {
  if (cfg.paths.features_dir.empty()) {
    throw ValidationError(
        "config error: paths.features_dir must point at the feature cache");
  }
  std::map<std::string, bool> split = load_split(manifest_path);
  CorpusManifest manifest =
      scan_corpus(cfg.paths.features_dir, split, ".dvf");
  NormalizationStats stats =
      load_stats(cfg.paths.features_dir + "/stats.dvs");

  std::filesystem::create_directories(out_dir);
  Model<T> model(cfg.model, cfg.train.seed);
  long start_step = 0;
  if (!resume_path.empty()) {
    // Validate the header before touching the parameter store, so a
    // mismatched checkpoint reports what differs instead of failing on the
    // first incompatible record.
    CheckpointHeader h = read_checkpoint_header(resume_path);
    if (!detail::same_arch(h.model, cfg.model)) {
      throw ValidationError(
          "config error: resume checkpoint architecture differs from config");
    }
    if (h.stats.min_val != stats.min_val ||
        h.stats.max_val != stats.max_val) {
      throw Error(
          "stats error: resume checkpoint normalization differs from "
          "feature cache");
    }
    load_checkpoint(resume_path, model.ps);
    start_step = h.step;
  }
  check(start_step <= cfg.train.total_steps,
        "state error: checkpoint step " + std::to_string(start_step) +
            " beyond total_steps " + std::to_string(cfg.train.total_steps));

  CheckpointHeader header;
  header.model = cfg.model;
  header.dsp = cfg.dsp;
  header.stats = stats;

  const std::string log_path = out_dir + "/loss.csv";
  if (!resume_path.empty()) {
    detail::truncate_loss_log(log_path, start_step);
  } else {
    std::ofstream(log_path, std::ios::trunc);
  }

  if (start_step == 0) {
    header.step = 0;
    save_checkpoint(detail::ckpt_path(out_dir, 0), header, model.ps);
  }

  PairSampler sampler(manifest, cfg.model.segment_frames, cfg.model.n_mels);
  AdamConfig opt;
  opt.lr = cfg.train.lr;
  opt.clip_norm = cfg.train.clip_gradients ? 100.0 : 0.0;

  FILE* log = detail::open_or_throw(log_path, "ab");
  std::string final_path = detail::ckpt_path(out_dir, start_step);
  for (long step = start_step + 1; step <= cfg.train.total_steps; ++step) {
    Rng rng(mix_seed(cfg.train.seed, uint64_t(step)));
    std::vector<SegmentPair> batch;
    batch.reserve(size_t(cfg.train.batch_size));
    for (int b = 0; b < cfg.train.batch_size; ++b) {
      batch.push_back(sampler.sample(rng));
    }
    StepResult r;
    try {
      r = train_step(model, opt, batch, rng, cfg.train.beta, step);
    } catch (...) {
      std::fclose(log);
      throw;
    }
    std::fprintf(log, "%ld,%.9g,%.9g,%.9g\n", step, r.total, r.recon(),
                 r.kl);
    std::fflush(log);

    if (step % cfg.train.checkpoint_every == 0 ||
        step == cfg.train.total_steps) {
      header.step = step;
      final_path = detail::ckpt_path(out_dir, step);
      save_checkpoint(final_path, header, model.ps);
    }
  }
  std::fclose(log);
  return final_path;
}

inline std::string train_loop(const Config& cfg,
                              const std::string& manifest_path,
                              const std::string& out_dir,
                              const std::string& resume_path = "") {
  if (cfg.train.precision == "f64") {
    return run_training<double>(cfg, manifest_path, out_dir, resume_path);
  }
  return run_training<float>(cfg, manifest_path, out_dir, resume_path);
}

}  // namespace dvae
