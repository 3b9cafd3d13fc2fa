#pragma once

// Adam optimizer and the finite-difference gradient checker.

#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/layers.hpp"
#include "dvae/rng.hpp"

namespace dvae {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // When positive, gradients are rescaled before the update so their global
  // L2 norm does not exceed this value.
  double clip_norm = 0.0;
};

// One Adam update over every trainable parameter.  Moment buffers are
// float32; the per-element arithmetic runs in double so the update is
// identical whatever the storage type.  Returns the pre-clip global
// gradient norm (a useful training diagnostic).
template <class T>
double adam_step(ParamStore<T>& ps, const AdamConfig& cfg) {
  for (const auto& p : ps.all()) {
    if (p->trainable && p->grad.empty()) {
      throw Error("state error: missing gradient for parameter " + p->name);
    }
  }

  double sq = 0.0;
  for (const auto& p : ps.all()) {
    if (!p->trainable) continue;
    for (T g : p->grad) sq += double(g) * double(g);
  }
  double norm = std::sqrt(sq);
  double gscale = 1.0;
  if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
    gscale = cfg.clip_norm / norm;
  }

  for (const auto& p : ps.all()) {
    if (!p->trainable) continue;
    long n = p->numel();
    if (p->adam_m.empty()) {
      p->adam_m.assign(size_t(n), 0.0f);
      p->adam_v.assign(size_t(n), 0.0f);
    }
    p->adam_t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(p->adam_t));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(p->adam_t));
    for (long i = 0; i < n; ++i) {
      double g = double(p->grad[i]) * gscale;
      double m = cfg.beta1 * double(p->adam_m[i]) + (1.0 - cfg.beta1) * g;
      double v = cfg.beta2 * double(p->adam_v[i]) + (1.0 - cfg.beta2) * g * g;
      p->adam_m[i] = float(m);
      p->adam_v[i] = float(v);
      double update = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p->value[i] = T(double(p->value[i]) - update);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Central finite-difference check of analytic gradients.
//
//   eval_loss()           builds a fresh graph with the CURRENT parameter
//                         values and returns the scalar loss (no gradients
//                         needed).  Must be deterministic: any randomness in
//                         the graph has to be frozen across calls.
//   eval_loss_and_grads() same, but also runs backward so Parameter::grad
//                         holds the analytic gradient afterwards.
//
// For every trainable parameter, coords_per_param random coordinates are
// perturbed by ±epsilon (the whole tensor when it is smaller than that).
// Coordinates where both the analytic and numeric derivative sit below
// denom_floor are skipped: a central difference of a loss of magnitude L
// carries absolute noise of roughly a few ulps of L divided by 2*epsilon
// (~1e-11 for L ~ 1, epsilon 1e-5 in double), so derivatives under the
// floor are unmeasurable by FD and their "relative error" is meaningless.
// Pick denom_floor well above that noise bound (e.g. 1e-6 for unit-scale
// losses).  Returns the maximum relative error over checked coordinates.
// ---------------------------------------------------------------------------

template <class T>
double gradient_check(ParamStore<T>& ps,
                      const std::function<double()>& eval_loss,
                      const std::function<double()>& eval_loss_and_grads,
                      Rng& rng, int coords_per_param = 32,
                      double epsilon = 1e-3, double denom_floor = 1e-10) {
  ps.zero_grad();
  eval_loss_and_grads();

  // Snapshot the analytic gradients before perturbation runs start.
  std::vector<std::vector<double>> analytic;
  for (const auto& p : ps.all()) {
    std::vector<double> g;
    if (p->trainable) g.assign(p->grad.begin(), p->grad.end());
    analytic.push_back(std::move(g));
  }

  double max_rel = 0.0;
  size_t pi = 0;
  for (const auto& p : ps.all()) {
    const std::vector<double>& ga = analytic[pi++];
    if (!p->trainable) continue;
    long n = p->numel();
    std::set<long> coords;
    if (n <= coords_per_param) {
      for (long i = 0; i < n; ++i) coords.insert(i);
    } else {
      while (long(coords.size()) < coords_per_param) {
        coords.insert(long(rng.below(uint64_t(n))));
      }
    }
    for (long i : coords) {
      T saved = p->value[i];
      p->value[i] = T(double(saved) + epsilon);
      double f_plus = eval_loss();
      p->value[i] = T(double(saved) - epsilon);
      double f_minus = eval_loss();
      p->value[i] = saved;
      double fd = (f_plus - f_minus) / (2.0 * epsilon);
      double denom = std::max(std::abs(fd), std::abs(ga[size_t(i)]));
      if (denom < denom_floor) continue;
      double rel = std::abs(fd - ga[size_t(i)]) / denom;
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

}  // namespace dvae
