#pragma once

// Trainable parameters and the layer wrappers that own them.
//
// Parameters live in a ParamStore, outside any tape.  A layer registers its
// tensors under hierarchical dotted names at construction time; the
// registration order is fixed and defines both the checkpoint layout and
// the order in which initialization consumes random draws, so identical
// seeds build bitwise-identical models.
//
// Non-trainable state (the batch-norm running statistics) is registered in
// the same store with trainable=false: it is serialized like everything
// else but never receives gradients or optimizer updates.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dvae/common.hpp"
#include "dvae/rng.hpp"
#include "dvae/tensor.hpp"

namespace dvae {

template <class T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;
  // Adam state (see optim.hpp); allocated lazily by the optimizer.
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  long adam_t = 0;

  long numel() const { return shape_numel(shape); }
};

template <class T>
class ParamStore {
 public:
  Parameter<T>* add(const std::string& name, Shape shape,
                    bool trainable = true) {
    check(index_.find(name) == index_.end(),
          "state error: duplicate parameter name " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->shape = std::move(shape);
    p->value.assign(size_t(p->numel()), T(0));
    // grad stays empty until the parameter first enters a graph; an empty
    // buffer is how the optimizer detects a parameter that never saw a
    // backward pass.
    p->trainable = trainable;
    Parameter<T>* raw = p.get();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return raw;
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  const std::vector<std::unique_ptr<Parameter<T>>>& all() const {
    return params_;
  }

  void zero_grad() {
    for (auto& p : params_) {
      std::fill(p->grad.begin(), p->grad.end(), T(0));
    }
  }

  long trainable_numel() const {
    long n = 0;
    for (const auto& p : params_) {
      if (p->trainable) n += p->numel();
    }
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, size_t> index_;
};

// Puts a parameter on a tape as an external leaf.  Gradients flow straight
// into Parameter::grad, which is allocated on first use and stays at a
// stable address afterwards.
template <class T>
int leaf(Tape<T>& t, Parameter<T>& p) {
  if (p.trainable && p.grad.empty()) {
    p.grad.assign(size_t(p.numel()), T(0));
  }
  return t.external(p.value.data(), p.trainable ? p.grad.data() : nullptr,
                    p.shape, p.trainable);
}

namespace init {

// Uniform(-k, k) with k = 1/sqrt(fan_in): the default for affine weights.
template <class T>
void uniform_fan_in(Parameter<T>& p, long fan_in, Rng& rng) {
  double k = 1.0 / std::sqrt(double(fan_in));
  for (auto& v : p.value) v = T(rng.uniform(-k, k));
}

template <class T>
void constant(Parameter<T>& p, T c) {
  std::fill(p.value.begin(), p.value.end(), c);
}

}  // namespace init

// ---------------------------------------------------------------------------

template <class T>
struct Linear {
  Parameter<T>* w = nullptr;
  Parameter<T>* b = nullptr;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& prefix, int in, int out,
         Rng& rng, bool bias = true) {
    w = ps.add(prefix + ".w", {out, in});
    init::uniform_fan_in(*w, in, rng);
    if (bias) b = ps.add(prefix + ".b", {out});
  }

  int forward(Tape<T>& t, int x) const {
    int wid = leaf(t, *w);
    int bid = b ? leaf(t, *b) : -1;
    return linear(t, x, wid, bid);
  }
};

template <class T>
struct Conv1d {
  Parameter<T>* w = nullptr;  // [C_out, K, C_in]
  Parameter<T>* b = nullptr;
  int stride = 1;
  int pad = 0;

  Conv1d() = default;
  Conv1d(ParamStore<T>& ps, const std::string& prefix, int in_ch, int out_ch,
         int kernel, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    w = ps.add(prefix + ".w", {out_ch, kernel, in_ch});
    init::uniform_fan_in(*w, long(kernel) * in_ch, rng);
    b = ps.add(prefix + ".b", {out_ch});
  }

  int forward(Tape<T>& t, int x) const {
    return conv1d(t, x, leaf(t, *w), leaf(t, *b), stride, pad);
  }
};

template <class T>
struct BatchNorm1d {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Parameter<T>* running_mean = nullptr;  // buffer, not trained
  Parameter<T>* running_var = nullptr;   // buffer, not trained

  BatchNorm1d() = default;
  BatchNorm1d(ParamStore<T>& ps, const std::string& prefix, int channels) {
    gamma = ps.add(prefix + ".gamma", {channels});
    beta = ps.add(prefix + ".beta", {channels});
    running_mean = ps.add(prefix + ".running_mean", {channels}, false);
    running_var = ps.add(prefix + ".running_var", {channels}, false);
    init::constant(*gamma, T(1));
    init::constant(*running_var, T(1));
  }

  int forward(Tape<T>& t, int x, bool training) const {
    return batchnorm(t, x, leaf(t, *gamma), leaf(t, *beta),
                     &running_mean->value, &running_var->value, training);
  }
};

// Unidirectional stacked LSTM.  Input [T, B, I] -> output [T, B, H] of the
// last layer.  Gate blocks are ordered (input, forget, cell, output); the
// forget-gate slice of b_ih starts at one so early training does not flush
// the cell state.
template <class T>
struct Lstm {
  struct LayerParams {
    Parameter<T>* w_ih;
    Parameter<T>* w_hh;
    Parameter<T>* b_ih;
    Parameter<T>* b_hh;
  };
  std::vector<LayerParams> layers;
  int hidden = 0;

  Lstm() = default;
  Lstm(ParamStore<T>& ps, const std::string& prefix, int input, int hidden_,
       int num_layers, Rng& rng)
      : hidden(hidden_) {
    for (int l = 0; l < num_layers; ++l) {
      int in = l == 0 ? input : hidden;
      std::string base = prefix + ".l" + std::to_string(l);
      LayerParams lp;
      lp.w_ih = ps.add(base + ".w_ih", {4 * hidden, in});
      lp.w_hh = ps.add(base + ".w_hh", {4 * hidden, hidden});
      lp.b_ih = ps.add(base + ".b_ih", {4 * hidden});
      lp.b_hh = ps.add(base + ".b_hh", {4 * hidden});
      init::uniform_fan_in(*lp.w_ih, hidden, rng);
      init::uniform_fan_in(*lp.w_hh, hidden, rng);
      for (int j = hidden; j < 2 * hidden; ++j) lp.b_ih->value[j] = T(1);
      layers.push_back(lp);
    }
  }

  int forward(Tape<T>& t, int x) const {
    int h = x;
    for (const auto& lp : layers) {
      h = lstm(t, h, leaf(t, *lp.w_ih), leaf(t, *lp.w_hh), leaf(t, *lp.b_ih),
               leaf(t, *lp.b_hh));
    }
    return h;
  }
};

// Stacked bidirectional LSTM: [T, B, I] -> [T, B, 2H].  Each layer runs a
// forward and a time-reversed pass and concatenates them per step; deeper
// layers consume the concatenated output of the previous one.
template <class T>
struct BiLstm {
  std::vector<Lstm<T>> fwd;
  std::vector<Lstm<T>> bwd;

  BiLstm() = default;
  BiLstm(ParamStore<T>& ps, const std::string& prefix, int input, int hidden,
         int num_layers, Rng& rng) {
    for (int l = 0; l < num_layers; ++l) {
      int in = l == 0 ? input : 2 * hidden;
      std::string base = prefix + ".l" + std::to_string(l);
      fwd.emplace_back(ps, base + ".fw", in, hidden, 1, rng);
      bwd.emplace_back(ps, base + ".bw", in, hidden, 1, rng);
    }
  }

  int forward(Tape<T>& t, int x) const {
    int h = x;
    for (size_t l = 0; l < fwd.size(); ++l) {
      int hf = fwd[l].forward(t, h);
      int hb = reverse0(t, bwd[l].forward(t, reverse0(t, h)));
      h = concat_last(t, hf, hb);
    }
    return h;
  }
};

}  // namespace dvae
