#pragma once

// Iterative radix-2 FFT with precomputed twiddles and bit-reversal table.
// The transform size is fixed per plan (the analysis window is a power of
// two), the arithmetic is plain double, and there is no runtime dispatch --
// the output is bit-identical across runs, which the reproducibility
// guarantees depend on.

#include <cmath>
#include <complex>
#include <vector>

#include "dvae/common.hpp"

namespace dvae {

class Fft {
 public:
  explicit Fft(int n) : n_(n) {
    check(n > 0 && (n & (n - 1)) == 0, "fft size must be a power of two");
    rev_.resize(n);
    int log2n = 0;
    while ((1 << log2n) < n) ++log2n;
    for (int i = 0; i < n; ++i) {
      int r = 0;
      for (int b = 0; b < log2n; ++b) r |= ((i >> b) & 1) << (log2n - 1 - b);
      rev_[i] = r;
    }
    tw_.resize(n / 2);
    for (int k = 0; k < n / 2; ++k) {
      double ang = -2.0 * 3.14159265358979323846 * k / n;
      tw_[k] = {std::cos(ang), std::sin(ang)};
    }
  }

  int size() const { return n_; }

  void forward(std::complex<double>* a) const { run(a, false); }

  void inverse(std::complex<double>* a) const {
    run(a, true);
    double s = 1.0 / n_;
    for (int i = 0; i < n_; ++i) a[i] *= s;
  }

 private:
  void run(std::complex<double>* a, bool inv) const {
    for (int i = 0; i < n_; ++i) {
      if (i < rev_[i]) std::swap(a[i], a[rev_[i]]);
    }
    for (int len = 2; len <= n_; len <<= 1) {
      int half = len >> 1;
      int stride = n_ / len;
      for (int base = 0; base < n_; base += len) {
        for (int k = 0; k < half; ++k) {
          std::complex<double> w = tw_[k * stride];
          if (inv) w = std::conj(w);
          std::complex<double> u = a[base + k];
          std::complex<double> v = a[base + k + half] * w;
          a[base + k] = u + v;
          a[base + k + half] = u - v;
        }
      }
    }
  }

  int n_;
  std::vector<int> rev_;
  std::vector<std::complex<double>> tw_;
};

}  // namespace dvae
