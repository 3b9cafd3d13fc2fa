// dvae — voice-conversion toolkit command line.
//
// Subcommands cover the whole pipeline:
//   features   extract + normalize log-mel features into a cache directory
//   train      train the disentangling autoencoder on a feature cache
//   convert    convert one utterance to a target voice (wav + mel dump)
//   eval       mel-cepstral distortion report over (ref, converted) pairs
//   embed      export per-utterance speaker embeddings as CSV
//
// Exit codes: 0 success, 1 validation error (bad flags/config/inputs),
// 2 runtime error (I/O, numeric, state).

#include "dvae/blas_env.hpp"  // one TU per binary publishes the BLAS CPU hint

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dvae/checkpoint.hpp"
#include "dvae/config.hpp"
#include "dvae/convert.hpp"
#include "dvae/data.hpp"
#include "dvae/dsp.hpp"
#include "dvae/eval.hpp"
#include "dvae/features_io.hpp"
#include "dvae/model.hpp"
#include "dvae/trainer.hpp"
#include "dvae/wav.hpp"

namespace {

namespace fs = std::filesystem;

int cmd_features(const std::string& corpus, const std::string& out,
                 const std::string& config_path, bool continue_on_error) {
  dvae::Config cfg = dvae::load_config(config_path);

  // A split.txt at the corpus root pins which speakers feed the
  // normalization stats; without one the default split rule applies.
  std::map<std::string, bool> split;
  std::string split_path = corpus + "/split.txt";
  if (fs::is_regular_file(split_path)) split = dvae::load_split(split_path);

  dvae::NormalizationStats stats = dvae::precompute_features(
      corpus, split, cfg.dsp, out, continue_on_error);
  std::printf("features: cache written to %s (stats min %.6g max %.6g)\n",
              out.c_str(), stats.min_val, stats.max_val);
  return 0;
}

int cmd_train(const std::string& manifest, const std::string& config_path,
              const std::string& out, const std::string& resume,
              const uint64_t* seed_override) {
  dvae::Config cfg = dvae::load_config(config_path);
  if (seed_override) cfg.train.seed = *seed_override;
  std::string final_ckpt = dvae::train_loop(cfg, manifest, out, resume);
  std::printf("train: finished at step %ld, final checkpoint %s\n",
              cfg.train.total_steps, final_ckpt.c_str());
  return 0;
}

int cmd_convert(const std::string& ckpt, const std::string& source,
                const std::vector<std::string>& target_refs,
                const std::string& out) {
  dvae::CheckpointHeader h = dvae::read_checkpoint_header(ckpt);
  dvae::Model<float> model(h.model, 0);
  dvae::load_checkpoint(ckpt, model.ps);

  dvae::MelFilterbank fb = dvae::build_mel_filterbank(h.dsp);
  auto to_features = [&](const std::string& wav_path) {
    dvae::Waveform w = dvae::load_wav(wav_path, h.dsp.sample_rate);
    return dvae::normalize(dvae::wav_to_logmel(w, h.dsp, fb), h.stats);
  };

  std::vector<dvae::MelSpectrogram> refs;
  refs.reserve(target_refs.size());
  for (const std::string& p : target_refs) refs.push_back(to_features(p));
  dvae::SpeakerEmbedding emb =
      dvae::extract_speaker_embedding(model, refs, "target");

  dvae::MelSpectrogram converted = dvae::convert(model, to_features(source), emb);

  // The normalized converted mels ride along as <out>.dvf so objective
  // checks can skip the vocoder.
  dvae::save_features(out + ".dvf", converted);
  dvae::Waveform wav = dvae::synthesize(converted, h.stats, h.dsp, fb);
  dvae::save_wav(out, wav);
  std::printf("convert: wrote %s (%zu samples) and %s.dvf (%d frames)\n",
              out.c_str(), wav.samples.size(), out.c_str(), converted.frames);
  return 0;
}

int cmd_eval(const std::string& pairs_path, const std::string& config_path,
             const std::string& out) {
  dvae::Config cfg = dvae::load_config(config_path);
  auto pairs = dvae::load_pairs_csv(pairs_path);
  dvae::McdReport rep = dvae::evaluate_corpus(pairs, cfg.dsp);
  dvae::save_mcd_report(out, rep);
  std::printf("eval: %zu/%zu pairs scored, mean %.4f dB, std %.4f dB -> %s\n",
              rep.rows.size(), pairs.size(), rep.mean, rep.stddev,
              out.c_str());
  return 0;
}

int cmd_embed(const std::string& ckpt, const std::string& corpus,
              const std::string& out) {
  dvae::CheckpointHeader h = dvae::read_checkpoint_header(ckpt);
  dvae::Model<float> model(h.model, 0);
  dvae::load_checkpoint(ckpt, model.ps);

  // Prefer raw audio; fall back to a feature cache laid out the same way.
  bool from_wav = true;
  std::vector<dvae::SpeakerEntry> speakers;
  try {
    speakers = dvae::scan_corpus_flat(corpus, ".wav");
  } catch (const dvae::Error&) {
    speakers = dvae::scan_corpus_flat(corpus, ".dvf");
    from_wav = false;
  }

  dvae::MelFilterbank fb = dvae::build_mel_filterbank(h.dsp);
  std::vector<dvae::EmbeddingRow> rows;
  for (const auto& sp : speakers) {
    for (size_t u = 0; u < sp.utt_paths.size(); ++u) {
      dvae::MelSpectrogram m;
      if (from_wav) {
        dvae::Waveform w = dvae::load_wav(sp.utt_paths[u], h.dsp.sample_rate);
        m = dvae::normalize(dvae::wav_to_logmel(w, h.dsp, fb), h.stats);
      } else {
        m = dvae::load_features(sp.utt_paths[u]);
      }
      dvae::SpeakerEmbedding emb =
          dvae::extract_speaker_embedding(model, {m}, sp.id);
      rows.push_back({sp.id, sp.utt_names[u], emb.vec});
    }
  }
  dvae::save_embeddings(out, rows);
  std::printf("embed: %zu utterance embeddings -> %s\n", rows.size(),
              out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Voice conversion via disentangled speaker/content latents"};
  app.require_subcommand(1);

  // features
  auto* features = app.add_subcommand(
      "features", "Extract normalized log-mel features from a wav corpus");
  std::string f_corpus, f_out, f_config;
  bool f_continue = false;
  features->add_option("--corpus", f_corpus, "Corpus root: <speaker>/<utt>.wav")
      ->required();
  features->add_option("--out", f_out, "Feature cache output directory")
      ->required();
  features->add_option("--config", f_config, "JSON config file")->required();
  features->add_flag("--continue-on-error", f_continue,
                     "Skip unreadable files instead of aborting");

  // train
  auto* train = app.add_subcommand("train", "Train on a feature cache");
  std::string t_manifest, t_config, t_out, t_resume;
  uint64_t t_seed = 0;
  bool t_seed_set = false;
  train->add_option("--manifest", t_manifest,
                    "Split file: one \"<speaker> <train|test>\" per line")
      ->required();
  train->add_option("--config", t_config, "JSON config file")->required();
  train->add_option("--out", t_out, "Run directory for checkpoints + loss log")
      ->required();
  train->add_option("--resume", t_resume, "Checkpoint to resume from");
  train->add_option("--seed", t_seed, "Random seed (overrides config)")
      ->each([&](const std::string&) { t_seed_set = true; });

  // convert
  auto* convert = app.add_subcommand(
      "convert", "Convert a source utterance to a target voice");
  std::string c_ckpt, c_source, c_out;
  std::vector<std::string> c_refs;
  convert->add_option("--ckpt", c_ckpt, "Model checkpoint")->required();
  convert->add_option("--source", c_source, "Source wav")->required();
  convert
      ->add_option("--target-ref", c_refs,
                   "Target-speaker reference wav (repeatable)")
      ->required();
  convert->add_option("--out", c_out, "Output wav path (mel dump at <out>.dvf)")
      ->required();

  // eval
  auto* eval = app.add_subcommand(
      "eval", "Mel-cepstral distortion over (reference, converted) wav pairs");
  std::string e_pairs, e_config, e_out;
  eval->add_option("--pairs", e_pairs, "CSV of ref_path,conv_path lines")
      ->required();
  eval->add_option("--config", e_config, "JSON config file")->required();
  eval->add_option("--out", e_out, "Report CSV output path")->required();

  // embed
  auto* embed = app.add_subcommand(
      "embed", "Export per-utterance speaker embeddings as CSV");
  std::string m_ckpt, m_corpus, m_out;
  embed->add_option("--ckpt", m_ckpt, "Model checkpoint")->required();
  embed->add_option("--corpus", m_corpus, "Corpus root (.wav or .dvf files)")
      ->required();
  embed->add_option("--out", m_out, "Embedding CSV output path")->required();

  try {
    app.parse(argc, argv);
    if (features->parsed()) {
      return cmd_features(f_corpus, f_out, f_config, f_continue);
    }
    if (train->parsed()) {
      return cmd_train(t_manifest, t_config, t_out, t_resume,
                       t_seed_set ? &t_seed : nullptr);
    }
    if (convert->parsed()) {
      return cmd_convert(c_ckpt, c_source, c_refs, c_out);
    }
    if (eval->parsed()) return cmd_eval(e_pairs, e_config, e_out);
    if (embed->parsed()) return cmd_embed(m_ckpt, m_corpus, m_out);
    return 1;  // unreachable: require_subcommand(1)
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the message
    return 1;
  } catch (const dvae::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const dvae::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
