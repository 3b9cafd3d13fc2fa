#pragma once

// Objective evaluation: mel-cepstra, DTW alignment, and mel-cepstral
// distortion (MCD) in dB.
//
// Mel-cepstra are the orthonormal DCT-II of each denormalized log-mel
// frame, keeping coefficients 1..13 (c0 carries overall energy and is
// excluded, so a constant gain shift does not count as distortion).  DTW
// uses plain Euclidean frame distances with steps {(1,0),(0,1),(1,1)} and a
// fixed tie-break, and accumulates costs in path order in double precision
// — a brute-force enumeration over all monotone paths reproduces its cost
// exactly, which the tests exploit.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/dsp.hpp"
#include "dvae/features_io.hpp"
#include "dvae/wav.hpp"

namespace dvae {

struct CepstralSequence {
  int frames = 0;
  int n_coeffs = 0;
  std::vector<double> data;  // frames x n_coeffs, row-major

  const double* row(int t) const { return data.data() + size_t(t) * n_coeffs; }
};

namespace detail {

// Full-length orthonormal DCT-II (the basis mel_cepstrum samples rows of);
// exposed for the Parseval/oracle tests.
inline std::vector<double> dct2_orthonormal(const std::vector<double>& x) {
  int n = int(x.size());
  std::vector<double> out(static_cast<size_t>(n));
  const double pi = 3.14159265358979323846;
  for (int k = 0; k < n; ++k) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += x[size_t(i)] * std::cos(pi * (i + 0.5) * k / n);
    }
    double s = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    out[size_t(k)] = s * acc;
  }
  return out;
}

}  // namespace detail

// Per-frame DCT-II of denormalized log-mels, coefficients 1..n_coeffs.
inline CepstralSequence mel_cepstrum(const MelSpectrogram& m,
                                     int n_coeffs = 13) {
  if (m.normalized) {
    throw Error(
        "domain error: mel_cepstrum expects denormalized log-mels (cepstra "
        "of [0,1]-scaled values would be meaningless)");
  }
  check(m.frames >= 1 && n_coeffs >= 1 && n_coeffs < m.n_mels,
        "shape error: mel_cepstrum inputs");

  // Precompute the kept DCT rows: basis[k][i] for k = 1..n_coeffs.
  int n = m.n_mels;
  const double pi = 3.14159265358979323846;
  std::vector<double> basis(size_t(n_coeffs) * n);
  double s = std::sqrt(2.0 / n);
  for (int k = 1; k <= n_coeffs; ++k) {
    for (int i = 0; i < n; ++i) {
      basis[size_t(k - 1) * n + i] = s * std::cos(pi * (i + 0.5) * k / n);
    }
  }

  CepstralSequence out;
  out.frames = m.frames;
  out.n_coeffs = n_coeffs;
  out.data.resize(size_t(m.frames) * n_coeffs);
  for (int t = 0; t < m.frames; ++t) {
    const float* frame = m.row(t);
    for (int k = 0; k < n_coeffs; ++k) {
      const double* b = basis.data() + size_t(k) * n;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += b[i] * double(frame[i]);
      out.data[size_t(t) * n_coeffs + k] = acc;
    }
  }
  return out;
}

struct AlignmentPath {
  std::vector<std::pair<int, int>> pairs;  // (i, j), monotone, ends at corners
};

namespace detail {

inline double frame_dist(const CepstralSequence& a, int i,
                         const CepstralSequence& b, int j) {
  const double* ra = a.row(i);
  const double* rb = b.row(j);
  double acc = 0.0;
  for (int d = 0; d < a.n_coeffs; ++d) {
    double diff = ra[d] - rb[d];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// Dynamic-time-warping alignment minimizing summed Euclidean frame
// distances.  Ties prefer the diagonal step, then (1,0), then (0,1).
inline std::pair<AlignmentPath, double> dtw_align(const CepstralSequence& a,
                                                  const CepstralSequence& b) {
  check(a.frames >= 1 && b.frames >= 1 && a.n_coeffs == b.n_coeffs,
        "shape error: dtw_align inputs");
  int n = a.frames, m = b.frames;
  std::vector<double> cost(size_t(n) * m);
  std::vector<uint8_t> from(size_t(n) * m);  // 0 diag, 1 up (1,0), 2 left (0,1)
  auto at = [m](int i, int j) { return size_t(i) * m + j; };

  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double d = detail::frame_dist(a, i, b, j);
      if (i == 0 && j == 0) {
        cost[at(i, j)] = d;
        from[at(i, j)] = 0;
      } else if (i == 0) {
        cost[at(i, j)] = cost[at(0, j - 1)] + d;
        from[at(i, j)] = 2;
      } else if (j == 0) {
        cost[at(i, j)] = cost[at(i - 1, 0)] + d;
        from[at(i, j)] = 1;
      } else {
        double best = cost[at(i - 1, j - 1)];
        uint8_t arg = 0;
        if (cost[at(i - 1, j)] < best) {
          best = cost[at(i - 1, j)];
          arg = 1;
        }
        if (cost[at(i, j - 1)] < best) {
          best = cost[at(i, j - 1)];
          arg = 2;
        }
        cost[at(i, j)] = best + d;
        from[at(i, j)] = arg;
      }
    }
  }

  AlignmentPath path;
  int i = n - 1, j = m - 1;
  while (true) {
    path.pairs.emplace_back(i, j);
    if (i == 0 && j == 0) break;
    uint8_t f = from[at(i, j)];
    if (f == 0) {
      --i;
      --j;
    } else if (f == 1) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(path.pairs.begin(), path.pairs.end());
  return {std::move(path), cost[at(n - 1, m - 1)]};
}

// Mel-cepstral distortion: mean over the DTW-aligned pairs of
// (10/ln 10) * sqrt(2 * sum_d (ref_d - conv_d)^2), in dB.
inline double mcd(const CepstralSequence& ref, const CepstralSequence& conv) {
  auto [path, cost] = dtw_align(ref, conv);
  (void)cost;
  const double scale = 10.0 / std::log(10.0);
  double acc = 0.0;
  for (const auto& [i, j] : path.pairs) {
    double d = detail::frame_dist(ref, i, conv, j);
    acc += scale * std::sqrt(2.0) * d;
  }
  return acc / double(path.pairs.size());
}

// ---------------------------------------------------------------------------
// Corpus-level report
// ---------------------------------------------------------------------------

struct McdRow {
  std::string ref;
  std::string conv;
  double mcd_db = 0.0;
};

struct McdReport {
  std::vector<McdRow> rows;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over rows
};

// Pairs file: one "ref_path,conv_path" line per evaluation pair.
inline std::vector<std::pair<std::string, std::string>> load_pairs_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("format error: cannot open pairs file " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    size_t comma = line.find(',');
    if (comma == std::string::npos || comma == 0 ||
        comma + 1 == line.size() ||
        line.find(',', comma + 1) != std::string::npos) {
      throw Error("format error: pairs line " + std::to_string(lineno) +
                  " must be \"ref,conv\": \"" + line + "\"");
    }
    out.emplace_back(line.substr(0, comma), line.substr(comma + 1));
  }
  if (out.empty()) throw Error("format error: pairs file is empty");
  return out;
}

// MCD over a list of (reference wav, converted wav) pairs.  A pair that
// fails to load or process is reported on stderr and dropped; the run
// continues with the rest.
inline McdReport evaluate_corpus(
    const std::vector<std::pair<std::string, std::string>>& pairs,
    const SpectrogramConfig& cfg) {
  MelFilterbank fb = build_mel_filterbank(cfg);
  McdReport rep;
  for (const auto& [ref_path, conv_path] : pairs) {
    try {
      Waveform ref_wav = load_wav(ref_path, cfg.sample_rate);
      Waveform conv_wav = load_wav(conv_path, cfg.sample_rate);
      CepstralSequence ref_cep =
          mel_cepstrum(wav_to_logmel(ref_wav, cfg, fb));
      CepstralSequence conv_cep =
          mel_cepstrum(wav_to_logmel(conv_wav, cfg, fb));
      rep.rows.push_back({ref_path, conv_path, mcd(ref_cep, conv_cep)});
    } catch (const Error& e) {
      std::fprintf(stderr, "warning: skipping pair %s,%s: %s\n",
                   ref_path.c_str(), conv_path.c_str(), e.what());
    }
  }
  if (rep.rows.empty()) {
    throw Error("state error: no evaluable pairs (all failed)");
  }
  double sum = 0.0;
  for (const auto& r : rep.rows) sum += r.mcd_db;
  rep.mean = sum / double(rep.rows.size());
  double var = 0.0;
  for (const auto& r : rep.rows) {
    double d = r.mcd_db - rep.mean;
    var += d * d;
  }
  rep.stddev = std::sqrt(var / double(rep.rows.size()));
  return rep;
}

// Report CSV: "ref,conv,mcd_db" rows plus trailing MEAN,,<v> and STD,,<v>.
inline void save_mcd_report(const std::string& path, const McdReport& rep) {
  FILE* f = detail::open_or_throw(path, "wb");
  for (const auto& r : rep.rows) {
    std::fprintf(f, "%s,%s,%.9g\n", r.ref.c_str(), r.conv.c_str(), r.mcd_db);
  }
  std::fprintf(f, "MEAN,,%.9g\n", rep.mean);
  std::fprintf(f, "STD,,%.9g\n", rep.stddev);
  if (std::fclose(f) != 0) {
    throw Error("format error: failed writing '" + path + "'");
  }
}

}  // namespace dvae
