#pragma once

// The voice-conversion model: a variational autoencoder whose latent code
// is split into a small speaker block and a larger content block.
//
// Training always sees two segments cut from different utterances of the
// same speaker.  Both are encoded; the two speaker posteriors are averaged
// into one shared speaker distribution while each segment keeps its own
// content posterior.  Both segments must reconstruct through the shared
// speaker code, which is what pushes speaker identity into the small block
// and everything segment-specific into the content block.
//
// Pipeline per segment batch x [B, frames, n_mels], all normalized mels:
//   encoder:  3x (conv k5 + batchnorm + tanh, strides 2,2,1)
//             -> stacked BiLSTM -> flatten -> FC tanh -> four linear heads
//             (content mean/logvar, speaker mean/logvar), logvar clamped
//   decoder:  FC tanh -> FC -> [frames/4, seq channels] -> repeat x4
//             -> LSTM -> 3x (conv k5 + batchnorm + tanh) -> 2-layer LSTM
//             -> per-frame linear to n_mels
//   post-net: 5 convs k5 (four batchnorm+tanh, last linear) producing a
//             residual; the refined output is input + residual.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dvae/config.hpp"
#include "dvae/layers.hpp"
#include "dvae/rng.hpp"
#include "dvae/tensor.hpp"

namespace dvae {

// Diagonal-Gaussian posterior for one segment, plain values.
struct LatentPosterior {
  std::vector<float> mu_s, logvar_s;  // speaker block
  std::vector<float> mu_c, logvar_c;  // content block
};

// Posterior heads as tape nodes, batched [B, dim].
struct PosteriorNodes {
  int mu_s = -1, logvar_s = -1;
  int mu_c = -1, logvar_c = -1;
};

// Closed-form KL(N(mu, diag(exp(logvar))) || N(0, I)), plain-value version
// used by conversion tools and tests.  Accumulates in double.
template <class S>
double kl_divergence(const std::vector<S>& mu, const std::vector<S>& logvar) {
  check(mu.size() == logvar.size(), "shape error: kl_divergence inputs");
  double acc = 0.0;
  for (size_t i = 0; i < mu.size(); ++i) {
    double m = double(mu[i]);
    double lv = double(logvar[i]);
    acc += m * m + std::exp(lv) - 1.0 - lv;
  }
  return 0.5 * acc;
}

// Shared speaker statistics for a same-speaker pair: means averaged
// directly, spreads averaged in the variance domain (the mean of two
// Gaussians' second moments), then taken back to log-variance.  The
// exp/add/log chain runs in double whatever the storage type: at float
// precision the round trip log(exp(x)) misses x by an ulp often enough
// that averaging a posterior with itself would not return it unchanged.
template <class S>
void average_posteriors(const std::vector<S>& mu1, const std::vector<S>& lv1,
                        const std::vector<S>& mu2, const std::vector<S>& lv2,
                        std::vector<S>& mu_out, std::vector<S>& lv_out) {
  check(mu1.size() == mu2.size() && lv1.size() == lv2.size() &&
            mu1.size() == lv1.size(),
        "shape error: average_posteriors inputs");
  size_t n = mu1.size();
  mu_out.resize(n);
  lv_out.resize(n);
  for (size_t i = 0; i < n; ++i) {
    mu_out[i] = (mu1[i] + mu2[i]) * S(0.5);
    double var = (std::exp(double(lv1[i])) + std::exp(double(lv2[i]))) * 0.5;
    lv_out[i] = S(std::log(var));
  }
}

// Everything a training step needs to read back from one pair loss graph.
struct PairLossNodes {
  int total = -1;    // optimized objective
  int elbo = -1;     // mse + beta * kl
  int mse = -1;      // decoder MSE, both segments, batch mean
  int l1 = -1;       // post-net L1, both segments, batch mean
  int kl = -1;       // full-posterior KL, both segments, batch mean
  int kl_s = -1;     // speaker-block share of kl (diagnostic)
  int kl_c = -1;     // content-block share of kl (diagnostic)
  int x_tilde = -1;  // decoder output      [2B, F, M]
  int x_bar = -1;    // post-net residual   [2B, F, M]
  int x_hat = -1;    // refined output      [2B, F, M]
  int z = -1;        // latent draws        [2B, k]
  PosteriorNodes post;         // raw posteriors   [2B, *]
  int mu_star = -1, lv_star = -1;  // shared speaker block [B, k1]
};

template <class T>
class Model {
 public:
  ModelConfig cfg;
  ParamStore<T> ps;

  explicit Model(const ModelConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    int M = cfg.n_mels, C = cfg.conv_channels;
    int F4 = cfg.segment_frames / 4;

    enc_conv1_ = Conv1d<T>(ps, "enc.conv1", M, C, 5, 2, 2, rng);
    enc_bn1_ = BatchNorm1d<T>(ps, "enc.bn1", C);
    enc_conv2_ = Conv1d<T>(ps, "enc.conv2", C, C, 5, 2, 2, rng);
    enc_bn2_ = BatchNorm1d<T>(ps, "enc.bn2", C);
    enc_conv3_ = Conv1d<T>(ps, "enc.conv3", C, C, 5, 1, 2, rng);
    enc_bn3_ = BatchNorm1d<T>(ps, "enc.bn3", C);
    enc_rnn_ = BiLstm<T>(ps, "enc.rnn", C, cfg.enc_lstm_hidden, 2, rng);
    enc_flat_width_ = F4 * 2 * cfg.enc_lstm_hidden;
    enc_fc_ = Linear<T>(ps, "enc.fc", enc_flat_width_, cfg.enc_fc, rng);
    head_mu_c_ = Linear<T>(ps, "enc.mu_c", cfg.enc_fc, cfg.k2, rng);
    head_lv_c_ = Linear<T>(ps, "enc.logvar_c", cfg.enc_fc, cfg.k2, rng);
    head_mu_s_ = Linear<T>(ps, "enc.mu_s", cfg.enc_fc, cfg.k1, rng);
    head_lv_s_ = Linear<T>(ps, "enc.logvar_s", cfg.enc_fc, cfg.k1, rng);

    dec_fc1_ = Linear<T>(ps, "dec.fc1", cfg.k(), cfg.dec_fc, rng);
    dec_fc2_ =
        Linear<T>(ps, "dec.fc2", cfg.dec_fc, F4 * cfg.dec_seq_channels, rng);
    dec_lstm1_ = Lstm<T>(ps, "dec.lstm1", cfg.dec_seq_channels,
                         cfg.dec_lstm1_hidden, 1, rng);
    dec_conv1_ =
        Conv1d<T>(ps, "dec.conv1", cfg.dec_lstm1_hidden, C, 5, 1, 2, rng);
    dec_bn1_ = BatchNorm1d<T>(ps, "dec.bn1", C);
    dec_conv2_ = Conv1d<T>(ps, "dec.conv2", C, C, 5, 1, 2, rng);
    dec_bn2_ = BatchNorm1d<T>(ps, "dec.bn2", C);
    dec_conv3_ = Conv1d<T>(ps, "dec.conv3", C, C, 5, 1, 2, rng);
    dec_bn3_ = BatchNorm1d<T>(ps, "dec.bn3", C);
    dec_lstm2_ = Lstm<T>(ps, "dec.lstm2", C, cfg.dec_lstm2_hidden, 2, rng);
    dec_out_ = Linear<T>(ps, "dec.out", cfg.dec_lstm2_hidden, M, rng);

    int P = cfg.postnet_channels;
    pn_conv1_ = Conv1d<T>(ps, "postnet.conv1", M, P, 5, 1, 2, rng);
    pn_bn1_ = BatchNorm1d<T>(ps, "postnet.bn1", P);
    pn_conv2_ = Conv1d<T>(ps, "postnet.conv2", P, P, 5, 1, 2, rng);
    pn_bn2_ = BatchNorm1d<T>(ps, "postnet.bn2", P);
    pn_conv3_ = Conv1d<T>(ps, "postnet.conv3", P, P, 5, 1, 2, rng);
    pn_bn3_ = BatchNorm1d<T>(ps, "postnet.bn3", P);
    pn_conv4_ = Conv1d<T>(ps, "postnet.conv4", P, P, 5, 1, 2, rng);
    pn_bn4_ = BatchNorm1d<T>(ps, "postnet.bn4", P);
    pn_conv5_ = Conv1d<T>(ps, "postnet.conv5", P, M, 5, 1, 2, rng);
  }

  int flatten_width() const { return enc_flat_width_; }

  // --- graph builders (batched tape nodes) -------------------------------

  // x [B, frames, n_mels] -> posterior heads [B, k*].
  PosteriorNodes encode_batch(Tape<T>& t, int x, bool training) const {
    const Shape& s = t.shape(x);
    check(s.size() == 3 && s[1] == cfg.segment_frames && s[2] == cfg.n_mels,
          "shape error: encoder expects [batch, " +
              std::to_string(cfg.segment_frames) + ", " +
              std::to_string(cfg.n_mels) + "], got " + shape_str(s));
    int B = s[0];
    int h = tanh_op(t, enc_bn1_.forward(t, enc_conv1_.forward(t, x), training));
    h = tanh_op(t, enc_bn2_.forward(t, enc_conv2_.forward(t, h), training));
    h = tanh_op(t, enc_bn3_.forward(t, enc_conv3_.forward(t, h), training));
    h = swap01(t, h);  // [F/4, B, C]
    h = enc_rnn_.forward(t, h);
    h = swap01(t, h);  // [B, F/4, 2H]
    h = reshape(t, h, {B, enc_flat_width_});
    h = tanh_op(t, enc_fc_.forward(t, h));
    PosteriorNodes p;
    p.mu_c = head_mu_c_.forward(t, h);
    p.logvar_c = clamp_op(t, head_lv_c_.forward(t, h), T(-8), T(8));
    p.mu_s = head_mu_s_.forward(t, h);
    p.logvar_s = clamp_op(t, head_lv_s_.forward(t, h), T(-8), T(8));
    return p;
  }

  // z [B, k] -> mel frames [B, frames, n_mels].
  int decode_batch(Tape<T>& t, int z, bool training) const {
    const Shape& s = t.shape(z);
    check(s.size() == 2 && s[1] == cfg.k(),
          "shape error: decoder expects [batch, " + std::to_string(cfg.k()) +
              "], got " + shape_str(s));
    int B = s[0];
    int F4 = cfg.segment_frames / 4;
    int h = tanh_op(t, dec_fc1_.forward(t, z));
    h = dec_fc2_.forward(t, h);
    h = reshape(t, h, {B, F4, cfg.dec_seq_channels});
    h = repeat_frames(t, h, 4);  // [B, F, dsc]
    h = swap01(t, h);
    h = dec_lstm1_.forward(t, h);
    h = swap01(t, h);
    h = tanh_op(t, dec_bn1_.forward(t, dec_conv1_.forward(t, h), training));
    h = tanh_op(t, dec_bn2_.forward(t, dec_conv2_.forward(t, h), training));
    h = tanh_op(t, dec_bn3_.forward(t, dec_conv3_.forward(t, h), training));
    h = swap01(t, h);
    h = dec_lstm2_.forward(t, h);
    h = swap01(t, h);
    return dec_out_.forward(t, h);  // linear: normalized-mel value range
  }

  // Decoder output -> (residual, refined).  The refined spectrogram is the
  // elementwise sum, so refined - input == residual exactly.
  std::pair<int, int> postnet_batch(Tape<T>& t, int x_tilde,
                                    bool training) const {
    const Shape& s = t.shape(x_tilde);
    check(s.size() == 3 && s[1] == cfg.segment_frames && s[2] == cfg.n_mels,
          "shape error: post-net expects decoder-shaped input, got " +
              shape_str(s));
    int h = tanh_op(t,
                    pn_bn1_.forward(t, pn_conv1_.forward(t, x_tilde), training));
    h = tanh_op(t, pn_bn2_.forward(t, pn_conv2_.forward(t, h), training));
    h = tanh_op(t, pn_bn3_.forward(t, pn_conv3_.forward(t, h), training));
    h = tanh_op(t, pn_bn4_.forward(t, pn_conv4_.forward(t, h), training));
    int x_bar = pn_conv5_.forward(t, h);
    int x_hat = add(t, x_tilde, x_bar);
    return {x_bar, x_hat};
  }

  // Shared speaker block: means averaged, spreads averaged as variances.
  std::pair<int, int> average_speaker(Tape<T>& t, int mu1, int lv1, int mu2,
                                      int lv2) const {
    int mu = scale(t, add(t, mu1, mu2), T(0.5));
    int var = scale(t, add(t, exp_op(t, lv1), exp_op(t, lv2)), T(0.5));
    return {mu, log_op(t, var)};
  }

  // z = mu + exp(logvar/2) * eps.
  int reparameterize(Tape<T>& t, int mu, int logvar, int eps) const {
    return add(t, mu, mul(t, exp_op(t, scale(t, logvar, T(0.5))), eps));
  }

  // Elementwise KL contributions 0.5 * (mu^2 + e^lv - 1 - lv).
  int kl_elements(Tape<T>& t, int mu, int logvar) const {
    int term = sub(t, add(t, square(t, mu), exp_op(t, logvar)),
                   add_scalar(t, logvar, T(1)));
    return scale(t, term, T(0.5));
  }

  // Full pair objective.  x1, x2: [B, F, M] same-speaker segment batches.
  // eps_s [B, k1] is the single shared speaker draw; eps_c [2B, k2] holds
  // the content draws for segment 1 (rows 0..B) and segment 2 (rows B..2B).
  //
  // total = mse(x~, x) + beta * KL + l1(x^, x), every term summed over the
  // two segments and averaged over the batch; KL is taken over the full
  // latent posterior of each segment, with the shared speaker block
  // appearing in both terms.
  PairLossNodes pair_loss(Tape<T>& t, int x1, int x2, int eps_s, int eps_c,
                          double beta, bool training) const {
    check(t.shape(x1) == t.shape(x2), "shape error: pair segments differ");
    int B = t.shape(x1)[0];
    check(t.shape(eps_s) == Shape{B, cfg.k1} &&
              t.shape(eps_c) == Shape{2 * B, cfg.k2},
          "shape error: noise draws");
    long per_seg = long(B) * cfg.segment_frames * cfg.n_mels;

    PairLossNodes out;
    int xcat = concat_first(t, x1, x2);  // [2B, F, M]
    out.post = encode_batch(t, xcat, training);

    int mu_s1 = slice_first(t, out.post.mu_s, 0, B);
    int mu_s2 = slice_first(t, out.post.mu_s, B, 2 * B);
    int lv_s1 = slice_first(t, out.post.logvar_s, 0, B);
    int lv_s2 = slice_first(t, out.post.logvar_s, B, 2 * B);
    auto [mu_star, lv_star] = average_speaker(t, mu_s1, lv_s1, mu_s2, lv_s2);
    out.mu_star = mu_star;
    out.lv_star = lv_star;

    // One speaker draw serves both segments; content draws are per segment.
    int z_s = reparameterize(t, mu_star, lv_star, eps_s);
    int z_c = reparameterize(t, out.post.mu_c, out.post.logvar_c, eps_c);
    int z_s_cat = concat_first(t, z_s, z_s);
    out.z = concat_last(t, z_s_cat, z_c);  // [2B, k]

    out.x_tilde = decode_batch(t, out.z, training);
    auto [x_bar, x_hat] = postnet_batch(t, out.x_tilde, training);
    out.x_bar = x_bar;
    out.x_hat = x_hat;

    // Decoder likelihood term: per-entry MSE per segment, the two segments
    // summed, batch-averaged — i.e. total squared error / (B * F * M).
    int mse_sum = sum_all(t, square(t, sub(t, out.x_tilde, xcat)));
    out.mse = scale(t, mse_sum, T(1) / T(per_seg));

    // KL over the full 64-dim posterior of each segment: shared speaker
    // block in both, own content block each.
    int mu_full = concat_last(t, concat_first(t, mu_star, mu_star),
                              out.post.mu_c);
    int lv_full = concat_last(t, concat_first(t, lv_star, lv_star),
                              out.post.logvar_c);
    int kle = kl_elements(t, mu_full, lv_full);  // [2B, k]
    out.kl = scale(t, sum_all(t, kle), T(1) / T(B));
    out.kl_s = scale(t, sum_all(t, slice_last(t, kle, 0, cfg.k1)),
                     T(1) / T(B));
    out.kl_c = scale(t, sum_all(t, slice_last(t, kle, cfg.k1, cfg.k())),
                     T(1) / T(B));

    out.elbo = add(t, out.mse, scale(t, out.kl, T(beta)));

    int l1_sum = abs_sum(t, sub(t, out.x_hat, xcat));
    out.l1 = scale(t, l1_sum, T(1) / T(per_seg));

    out.total = add(t, out.elbo, out.l1);
    return out;
  }

  // --- plain-value wrappers (inference) -----------------------------------

  // Single normalized segment (frames*n_mels, row-major) -> posterior.
  // Uses the running batch-norm statistics; builds no gradients.
  LatentPosterior encode_segment(const std::vector<float>& seg) const {
    check(long(seg.size()) == long(cfg.segment_frames) * cfg.n_mels,
          "shape error: encode_segment input size");
    Tape<T> t;
    std::vector<T> x(seg.begin(), seg.end());
    int xid = t.constant(std::move(x), {1, cfg.segment_frames, cfg.n_mels});
    PosteriorNodes p = encode_batch(t, xid, false);
    LatentPosterior out;
    auto take = [&](int id, std::vector<float>& dst) {
      const T* v = t.v(id);
      dst.assign(v, v + t.numel(id));
    };
    take(p.mu_s, out.mu_s);
    take(p.logvar_s, out.logvar_s);
    take(p.mu_c, out.mu_c);
    take(p.logvar_c, out.logvar_c);
    return out;
  }

  // Latent vector (k values) -> refined normalized segment (frames*n_mels).
  std::vector<float> decode_segment(const std::vector<float>& z) const {
    check(int(z.size()) == cfg.k(), "shape error: decode_segment input size");
    Tape<T> t;
    std::vector<T> zv(z.begin(), z.end());
    int zid = t.constant(std::move(zv), {1, cfg.k()});
    int xt = decode_batch(t, zid, false);
    auto [x_bar, x_hat] = postnet_batch(t, xt, false);
    (void)x_bar;
    const T* v = t.v(x_hat);
    return std::vector<float>(v, v + t.numel(x_hat));
  }

 private:
  Conv1d<T> enc_conv1_, enc_conv2_, enc_conv3_;
  BatchNorm1d<T> enc_bn1_, enc_bn2_, enc_bn3_;
  BiLstm<T> enc_rnn_;
  Linear<T> enc_fc_;
  Linear<T> head_mu_c_, head_lv_c_, head_mu_s_, head_lv_s_;
  int enc_flat_width_ = 0;

  Linear<T> dec_fc1_, dec_fc2_;
  Lstm<T> dec_lstm1_;
  Conv1d<T> dec_conv1_, dec_conv2_, dec_conv3_;
  BatchNorm1d<T> dec_bn1_, dec_bn2_, dec_bn3_;
  Lstm<T> dec_lstm2_;
  Linear<T> dec_out_;

  Conv1d<T> pn_conv1_, pn_conv2_, pn_conv3_, pn_conv4_, pn_conv5_;
  BatchNorm1d<T> pn_bn1_, pn_bn2_, pn_bn3_, pn_bn4_;
};

}  // namespace dvae
