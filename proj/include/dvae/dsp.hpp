#pragma once

// Audio front end: short-time analysis with a Hamming window, triangular
// mel filterbank over the power spectrum, log compression with a fixed
// floor, corpus min/max normalization, and the inverse direction (filterbank
// pseudo-inversion plus iterative phase estimation) for listening to model
// output.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/fft.hpp"
#include "dvae/wav.hpp"

namespace dvae {

struct SpectrogramConfig {
  int fft_size = 1024;
  int hop = 256;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  int sample_rate = 16000;
  int griffin_lim_iters = 60;

  int n_bins() const { return fft_size / 2 + 1; }

  void validate() const {
    if (hop <= 0 || hop >= fft_size)
      throw ValidationError("dsp config: hop must be in (0, fft_size)");
    if (n_mels != 80)
      throw ValidationError("dsp config: n_mels must be 80");
    if (!(fmin < fmax) || fmax > sample_rate / 2.0)
      throw ValidationError("dsp config: need fmin < fmax <= sample_rate/2");
  }
};

// Symmetric Hamming window.
inline std::vector<double> hamming_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.54 - 0.46 * std::cos(2.0 * 3.14159265358979323846 * i / (n - 1));
  }
  return w;
}

inline double hz_to_mel(double f) {
  return 2595.0 * std::log10(1.0 + f / 700.0);
}

inline double mel_to_hz(double m) {
  return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
}

struct MelFilterbank {
  int n_mels = 0;
  int n_bins = 0;
  std::vector<double> weights;  // [n_mels, n_bins] row-major

  const double* row(int m) const { return weights.data() + size_t(m) * n_bins; }
};

// Triangular filters with centers equally spaced on the mel scale between
// fmin and fmax.  Filter m rises from grid point m to m+1 and falls to m+2.
inline MelFilterbank build_mel_filterbank(const SpectrogramConfig& cfg) {
  cfg.validate();
  MelFilterbank fb;
  fb.n_mels = cfg.n_mels;
  fb.n_bins = cfg.n_bins();
  fb.weights.assign(size_t(fb.n_mels) * fb.n_bins, 0.0);

  std::vector<double> hz(cfg.n_mels + 2);
  double mel_lo = hz_to_mel(cfg.fmin);
  double mel_hi = hz_to_mel(cfg.fmax);
  for (int i = 0; i < cfg.n_mels + 2; ++i) {
    hz[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));
  }

  double bin_hz = double(cfg.sample_rate) / cfg.fft_size;
  for (int m = 0; m < fb.n_mels; ++m) {
    double left = hz[m], center = hz[m + 1], right = hz[m + 2];
    bool any = false;
    for (int k = 0; k < fb.n_bins; ++k) {
      double f = k * bin_hz;
      double w = 0.0;
      if (f > left && f < right) {
        w = f <= center ? (f - left) / (center - left)
                        : (right - f) / (right - center);
      }
      if (w > 0.0) {
        fb.weights[size_t(m) * fb.n_bins + k] = w;
        any = true;
      }
    }
    if (!any) {
      throw Error("construction error: mel filter " + std::to_string(m) +
                  " has no FFT bin support; reduce n_mels or raise fft_size");
    }
  }
  return fb;
}

// Center frequency (Hz) of 0-based filter m; exposed for tests.
inline double mel_filter_center_hz(const SpectrogramConfig& cfg, int m) {
  double mel_lo = hz_to_mel(cfg.fmin);
  double mel_hi = hz_to_mel(cfg.fmax);
  return mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (cfg.n_mels + 1));
}

struct MelSpectrogram {
  int frames = 0;   // T
  int n_mels = 0;   // always 80 in this pipeline
  bool normalized = false;
  std::vector<float> data;  // [T, n_mels] row-major

  float* row(int t) { return data.data() + size_t(t) * n_mels; }
  const float* row(int t) const { return data.data() + size_t(t) * n_mels; }
};

struct NormalizationStats {
  double min_val = 0.0;
  double max_val = 0.0;

  void validate() const {
    if (!(min_val < max_val))
      throw Error("stats error: min must be strictly below max");
  }
};

namespace detail {

// Reflected index without edge duplication: ...x2 x1 | x0 x1 x2... The
// signal is always at least one analysis window long, so a single bounce per
// side suffices.
inline long reflect_index(long i, long n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * (n - 1) - i;
  return i;
}

}  // namespace detail

// Complex STFT with centered frames.  T = 1 + floor(len / hop).
inline std::vector<std::complex<double>> stft_complex(
    const Waveform& w, const SpectrogramConfig& cfg,
    const std::vector<double>& window, int* out_frames) {
  long n = long(w.samples.size());
  if (n < cfg.fft_size) {
    throw Error("length error: signal shorter than one analysis window");
  }
  int t_count = 1 + int(n / cfg.hop);
  int bins = cfg.n_bins();
  Fft fft(cfg.fft_size);
  std::vector<std::complex<double>> out(size_t(t_count) * bins);
  std::vector<std::complex<double>> buf(cfg.fft_size);
  int half = cfg.fft_size / 2;
  for (int t = 0; t < t_count; ++t) {
    long start = long(t) * cfg.hop - half;
    for (int j = 0; j < cfg.fft_size; ++j) {
      long idx = detail::reflect_index(start + j, n);
      buf[j] = {w.samples[idx] * window[j], 0.0};
    }
    fft.forward(buf.data());
    for (int k = 0; k < bins; ++k) out[size_t(t) * bins + k] = buf[k];
  }
  *out_frames = t_count;
  return out;
}

// Magnitude spectrogram, [T, fft_size/2 + 1].
inline std::vector<double> stft_magnitude(const Waveform& w,
                                          const SpectrogramConfig& cfg,
                                          int* out_frames) {
  std::vector<double> window = hamming_window(cfg.fft_size);
  std::vector<std::complex<double>> s = stft_complex(w, cfg, window, out_frames);
  std::vector<double> mag(s.size());
  for (size_t i = 0; i < s.size(); ++i) mag[i] = std::abs(s[i]);
  return mag;
}

constexpr double kLogFloor = 1e-10;  // applied to mel power before the log

// Log-mel features: log(max(filterbank * |STFT|^2, floor)).
inline MelSpectrogram wav_to_logmel(const Waveform& w,
                                    const SpectrogramConfig& cfg,
                                    const MelFilterbank& fb) {
  int t_count = 0;
  std::vector<double> mag = stft_magnitude(w, cfg, &t_count);
  int bins = cfg.n_bins();

  MelSpectrogram m;
  m.frames = t_count;
  m.n_mels = fb.n_mels;
  m.normalized = false;
  m.data.resize(size_t(t_count) * fb.n_mels);
  std::vector<double> power(bins);
  for (int t = 0; t < t_count; ++t) {
    const double* src = mag.data() + size_t(t) * bins;
    for (int k = 0; k < bins; ++k) power[k] = src[k] * src[k];
    for (int j = 0; j < fb.n_mels; ++j) {
      const double* wrow = fb.row(j);
      double acc = 0.0;
      for (int k = 0; k < bins; ++k) acc += wrow[k] * power[k];
      m.data[size_t(t) * fb.n_mels + j] =
          float(std::log(std::max(acc, kLogFloor)));
    }
  }
  return m;
}

inline MelSpectrogram normalize(const MelSpectrogram& m,
                                const NormalizationStats& s) {
  s.validate();
  check(!m.normalized, "domain error: input is already normalized");
  MelSpectrogram out = m;
  double scale = 1.0 / (s.max_val - s.min_val);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double x = (double(m.data[i]) - s.min_val) * scale;
    out.data[i] = float(std::clamp(x, 0.0, 1.0));
  }
  out.normalized = true;
  return out;
}

inline MelSpectrogram denormalize(const MelSpectrogram& m,
                                  const NormalizationStats& s) {
  s.validate();
  check(m.normalized, "domain error: input is not normalized");
  MelSpectrogram out = m;
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = float(s.min_val + double(m.data[i]) * (s.max_val - s.min_val));
  }
  out.normalized = false;
  return out;
}

// Inverse STFT by windowed overlap-add with squared-window normalization.
// Output is trimmed to exactly T * hop samples.
inline Waveform istft(const std::vector<std::complex<double>>& spec,
                      int t_count, const SpectrogramConfig& cfg,
                      const std::vector<double>& window) {
  int bins = cfg.n_bins();
  int nfft = cfg.fft_size;
  Fft fft(nfft);
  long total = long(t_count - 1) * cfg.hop + nfft;
  std::vector<double> acc(total, 0.0), wsum(total, 0.0);
  std::vector<std::complex<double>> buf(nfft);
  for (int t = 0; t < t_count; ++t) {
    const std::complex<double>* s = spec.data() + size_t(t) * bins;
    for (int k = 0; k < bins; ++k) buf[k] = s[k];
    for (int k = bins; k < nfft; ++k) buf[k] = std::conj(s[nfft - k]);
    fft.inverse(buf.data());
    long base = long(t) * cfg.hop;
    for (int j = 0; j < nfft; ++j) {
      acc[base + j] += buf[j].real() * window[j];
      wsum[base + j] += window[j] * window[j];
    }
  }
  Waveform w;
  w.sample_rate = cfg.sample_rate;
  long out_len = long(t_count) * cfg.hop;
  long lead = nfft / 2;  // frames are centered; drop the left padding
  w.samples.resize(out_len);
  for (long i = 0; i < out_len; ++i) {
    long j = i + lead;
    w.samples[i] = (j < total && wsum[j] > 1e-9) ? acc[j] / wsum[j] : 0.0;
  }
  return w;
}

// Least-squares pseudo-inversion of the filterbank in the power domain with
// a nonnegativity constraint, via multiplicative updates:
//   p <- p * (F^T m) / (F^T F p).
// Every factor is nonnegative, so the iterate stays in the feasible cone,
// and the objective ||F p - m||^2 is non-increasing.
inline std::vector<double> mel_power_to_linear_power(
    const std::vector<double>& mel_power, int t_count,
    const MelFilterbank& fb, int iters = 80) {
  int bins = fb.n_bins;
  int n_mels = fb.n_mels;

  // Gram matrix G = F^T F, [bins, bins].
  std::vector<double> gram(size_t(bins) * bins, 0.0);
  gemm(true, false, bins, bins, n_mels, 1.0, fb.weights.data(), bins,
       fb.weights.data(), bins, 0.0, gram.data(), bins);

  // Numerator N = M F, [T, bins] (rows are frames).
  std::vector<double> num(size_t(t_count) * bins);
  gemm(false, false, t_count, bins, n_mels, 1.0, mel_power.data(), n_mels,
       fb.weights.data(), bins, 0.0, num.data(), bins);

  std::vector<double> p = num;  // nonnegative start
  std::vector<double> denom(size_t(t_count) * bins);
  for (int it = 0; it < iters; ++it) {
    gemm(false, false, t_count, bins, bins, 1.0, p.data(), bins, gram.data(),
         bins, 0.0, denom.data(), bins);
    for (size_t i = 0; i < p.size(); ++i) {
      p[i] *= num[i] / (denom[i] + 1e-12);
    }
  }
  return p;
}

// Phase reconstruction: alternating projection between the set of spectra
// with the target magnitude and the set of consistent STFTs.  Zero initial
// phase keeps the whole procedure deterministic, and the projection distance
// (spectral-convergence residual) is non-increasing by construction.
//
// `residuals`, when non-null, receives one spectral-convergence value per
// iteration.
inline Waveform griffin_lim(const MelSpectrogram& m,
                            const SpectrogramConfig& cfg,
                            const MelFilterbank& fb, int iterations,
                            std::vector<double>* residuals = nullptr) {
  if (iterations <= 0) {
    throw ValidationError("parameter error: griffin_lim iterations must be >= 1");
  }
  check(!m.normalized,
        "domain error: griffin_lim expects denormalized log-mels");

  int t_count = m.frames;
  int bins = cfg.n_bins();
  std::vector<double> mel_power(size_t(t_count) * fb.n_mels);
  for (size_t i = 0; i < mel_power.size(); ++i) {
    mel_power[i] = std::exp(double(m.data[i]));
  }
  std::vector<double> lin_power =
      mel_power_to_linear_power(mel_power, t_count, fb);
  std::vector<double> target(size_t(t_count) * bins);
  for (size_t i = 0; i < target.size(); ++i) {
    target[i] = std::sqrt(std::max(lin_power[i], 0.0));
  }

  double target_norm = 0.0;
  for (double v : target) target_norm += v * v;
  target_norm = std::sqrt(target_norm);

  std::vector<double> window = hamming_window(cfg.fft_size);
  std::vector<std::complex<double>> spec(size_t(t_count) * bins);
  for (size_t i = 0; i < spec.size(); ++i) spec[i] = {target[i], 0.0};

  // The analysis frame law is T = 1 + floor(len / hop), so the iteration
  // re-analyzes a signal of length T*hop - 1 (the longest that still maps
  // to T frames).  Very short spectrograms are padded up to one window;
  // their re-analysis then has extra trailing frames, which are ignored.
  long analysis_len =
      std::max(long(t_count) * cfg.hop - 1, long(cfg.fft_size));

  Waveform x;
  for (int it = 0; it < iterations; ++it) {
    x = istft(spec, t_count, cfg, window);
    x.samples.resize(size_t(analysis_len), 0.0);
    int t2 = 0;
    std::vector<std::complex<double>> s = stft_complex(x, cfg, window, &t2);
    check(t2 >= t_count, "griffin_lim: frame count drifted during iteration");
    if (residuals) {
      double err = 0.0;
      for (size_t i = 0; i < spec.size(); ++i) {
        double d = std::abs(s[i]) - target[i];
        err += d * d;
      }
      residuals->push_back(std::sqrt(err) / (target_norm + 1e-12));
    }
    for (size_t i = 0; i < spec.size(); ++i) {
      double mag = std::abs(s[i]);
      spec[i] = mag > 1e-12 ? std::complex<double>(s[i] * (target[i] / mag))
                            : std::complex<double>(target[i], 0.0);
    }
  }
  return istft(spec, t_count, cfg, window);
}

}  // namespace dvae
