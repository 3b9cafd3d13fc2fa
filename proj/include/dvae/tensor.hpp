#pragma once

// Reverse-mode automatic differentiation on a flat tape.
//
// A Tape owns every value computed during one forward pass.  Operations
// append nodes; each node that participates in differentiation carries a
// closure that scatters its output gradient to its inputs.  backward() walks
// the nodes once in reverse append order, which is a valid topological order
// by construction.
//
// Design notes:
//   - Parameters live outside the tape (see optim.hpp); they enter a graph
//     as "external" leaves whose value and gradient pointers alias the
//     parameter's own storage, so backward() accumulates straight into the
//     optimizer's buffers with no copying.
//   - Everything is templated on the scalar type.  float is the training
//     precision; double is used by the finite-difference gradient checks.
//   - All reductions are sequential in a fixed order: results are bitwise
//     reproducible run to run.
//   - The heavy ops (matrix products, convolution via column gathering, the
//     recurrent cells) sit directly on GEMM.  The recurrent per-step
//     products are evaluated in transposed form (weights-first), which is
//     roughly twice as fast for small batch sizes.

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dvae/common.hpp"

namespace dvae {

using Shape = std::vector<int>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<T> val;      // owned storage (empty when ext is set)
    const T* ext = nullptr;  // external value storage (parameters)
    T* ext_grad = nullptr;   // external gradient target (parameters)
    std::vector<T> grad;     // owned gradient, allocated on first touch
    std::function<void(Tape&)> back;
    bool rq = false;  // does anything reachable from here require gradients?
  };

  std::vector<Node> nodes;

  // External leaf aliasing caller-owned storage.  `grad` may be null when
  // requires_grad is false (plain inputs).
  int external(const T* vals, T* grad, Shape shape, bool requires_grad) {
    Node n;
    n.shape = std::move(shape);
    n.ext = vals;
    n.ext_grad = grad;
    n.rq = requires_grad;
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  // Owned constant leaf (no gradient).
  int constant(std::vector<T> vals, Shape shape) {
    check(long(vals.size()) == shape_numel(shape),
          "shape error: constant size mismatch");
    Node n;
    n.shape = std::move(shape);
    n.val = std::move(vals);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  // Owned computed node, zero-initialized.
  int make(Shape shape, bool rq) {
    Node n;
    n.shape = std::move(shape);
    n.val.assign(size_t(shape_numel(n.shape)), T(0));
    n.rq = rq;
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  const Shape& shape(int id) const { return nodes[id].shape; }
  long numel(int id) const { return shape_numel(nodes[id].shape); }
  bool rq(int id) const { return nodes[id].rq; }

  const T* v(int id) const {
    const Node& n = nodes[id];
    return n.ext ? n.ext : n.val.data();
  }

  T* vm(int id) {
    Node& n = nodes[id];
    check(n.ext == nullptr, "internal: cannot mutate external node values");
    return n.val.data();
  }

  // Gradient buffer for a node, allocated (zeroed) on first use.
  T* g(int id) {
    Node& n = nodes[id];
    if (n.ext_grad) return n.ext_grad;
    if (n.grad.empty()) n.grad.assign(size_t(shape_numel(n.shape)), T(0));
    return n.grad.data();
  }

  bool grad_touched(int id) const {
    const Node& n = nodes[id];
    return n.ext_grad != nullptr || !n.grad.empty();
  }

  std::vector<T> read(int id) const {
    const T* p = v(id);
    return std::vector<T>(p, p + numel(id));
  }

  // Reverse sweep from a scalar loss.  Nodes whose gradient was never
  // touched contribute nothing and are skipped.
  void backward(int loss_id) {
    check(numel(loss_id) == 1, "shape error: backward needs a scalar loss");
    g(loss_id)[0] = T(1);
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes[i];
      if (n.back && grad_touched(i)) n.back(*this);
    }
  }
};

namespace detail {

template <class T>
void transpose2d(const T* src, int rows, int cols, T* dst) {
  for (int r = 0; r < rows; ++r) {
    const T* s = src + size_t(r) * cols;
    for (int c = 0; c < cols; ++c) dst[size_t(c) * rows + r] = s[c];
  }
}

template <class T>
void add_rowwise(T* y, const T* b, long rows, long cols) {
  for (long r = 0; r < rows; ++r) {
    T* yr = y + r * cols;
    for (long c = 0; c < cols; ++c) yr[c] += b[c];
  }
}

template <class T>
void colsum_accum(const T* y, long rows, long cols, T* out) {
  for (long r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    for (long c = 0; c < cols; ++c) out[c] += yr[c];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape primitives
// ---------------------------------------------------------------------------

template <class T>
int add(Tape<T>& t, int a, int b) {
  check(t.shape(a) == t.shape(b), "shape error: add operands " +
                                      shape_str(t.shape(a)) + " vs " +
                                      shape_str(t.shape(b)));
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a) || t.rq(b));
  const T* pa = t.v(a);
  const T* pb = t.v(b);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  if (t.rq(y)) {
    t.nodes[y].back = [a, b, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(a)) {
        T* ga = tp.g(a);
        for (long i = 0; i < n; ++i) ga[i] += gy[i];
      }
      if (tp.rq(b)) {
        T* gb = tp.g(b);
        for (long i = 0; i < n; ++i) gb[i] += gy[i];
      }
    };
  }
  return y;
}

template <class T>
int sub(Tape<T>& t, int a, int b) {
  check(t.shape(a) == t.shape(b), "shape error: sub operands differ");
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a) || t.rq(b));
  const T* pa = t.v(a);
  const T* pb = t.v(b);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
  if (t.rq(y)) {
    t.nodes[y].back = [a, b, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(a)) {
        T* ga = tp.g(a);
        for (long i = 0; i < n; ++i) ga[i] += gy[i];
      }
      if (tp.rq(b)) {
        T* gb = tp.g(b);
        for (long i = 0; i < n; ++i) gb[i] -= gy[i];
      }
    };
  }
  return y;
}

template <class T>
int mul(Tape<T>& t, int a, int b) {
  check(t.shape(a) == t.shape(b), "shape error: mul operands differ");
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a) || t.rq(b));
  const T* pa = t.v(a);
  const T* pb = t.v(b);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
  if (t.rq(y)) {
    t.nodes[y].back = [a, b, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(a)) {
        T* ga = tp.g(a);
        const T* pb2 = tp.v(b);
        for (long i = 0; i < n; ++i) ga[i] += gy[i] * pb2[i];
      }
      if (tp.rq(b)) {
        T* gb = tp.g(b);
        const T* pa2 = tp.v(a);
        for (long i = 0; i < n; ++i) gb[i] += gy[i] * pa2[i];
      }
    };
  }
  return y;
}

template <class T>
int scale(Tape<T>& t, int a, T c) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = pa[i] * c;
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n, c](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i] * c;
    };
  }
  return y;
}

template <class T>
int add_scalar(Tape<T>& t, int a, T c) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = pa[i] + c;
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i];
    };
  }
  return y;
}

template <class T>
int tanh_op(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = fast_tanh(pa[i]);
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      const T* py2 = tp.v(y);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i] * (T(1) - py2[i] * py2[i]);
    };
  }
  return y;
}

template <class T>
int sigmoid_op(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = fast_sigmoid(pa[i]);
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      const T* py2 = tp.v(y);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i] * py2[i] * (T(1) - py2[i]);
    };
  }
  return y;
}

template <class T>
int exp_op(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = std::exp(pa[i]);
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      const T* py2 = tp.v(y);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i] * py2[i];
    };
  }
  return y;
}

template <class T>
int log_op(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = std::log(pa[i]);
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      const T* pa2 = tp.v(a);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i] / pa2[i];
    };
  }
  return y;
}

template <class T>
int square(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) py[i] = pa[i] * pa[i];
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      const T* pa2 = tp.v(a);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i] * T(2) * pa2[i];
    };
  }
  return y;
}

// Clamp with pass-through subgradient strictly inside the interval.
template <class T>
int clamp_op(Tape<T>& t, int a, T lo, T hi) {
  long n = t.numel(a);
  int y = t.make(t.shape(a), t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long i = 0; i < n; ++i) {
    py[i] = pa[i] < lo ? lo : (pa[i] > hi ? hi : pa[i]);
  }
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n, lo, hi](Tape<T>& tp) {
      const T* gy = tp.g(y);
      const T* pa2 = tp.v(a);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) {
        if (pa2[i] > lo && pa2[i] < hi) ga[i] += gy[i];
      }
    };
  }
  return y;
}

template <class T>
int concat_last(Tape<T>& t, int a, int b) {
  Shape sa = t.shape(a), sb = t.shape(b);
  check(sa.size() == sb.size() && !sa.empty(),
        "shape error: concat rank mismatch");
  for (size_t i = 0; i + 1 < sa.size(); ++i) {
    check(sa[i] == sb[i], "shape error: concat leading dims differ");
  }
  int la = sa.back(), lb = sb.back();
  Shape sy = sa;
  sy.back() = la + lb;
  long rows = shape_numel(sa) / la;
  int y = t.make(sy, t.rq(a) || t.rq(b));
  const T* pa = t.v(a);
  const T* pb = t.v(b);
  T* py = t.vm(y);
  for (long r = 0; r < rows; ++r) {
    std::memcpy(py + r * (la + lb), pa + r * la, sizeof(T) * la);
    std::memcpy(py + r * (la + lb) + la, pb + r * lb, sizeof(T) * lb);
  }
  if (t.rq(y)) {
    t.nodes[y].back = [a, b, y, rows, la, lb](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(a)) {
        T* ga = tp.g(a);
        for (long r = 0; r < rows; ++r) {
          const T* s = gy + r * (la + lb);
          T* d = ga + r * la;
          for (int i = 0; i < la; ++i) d[i] += s[i];
        }
      }
      if (tp.rq(b)) {
        T* gb = tp.g(b);
        for (long r = 0; r < rows; ++r) {
          const T* s = gy + r * (la + lb) + la;
          T* d = gb + r * lb;
          for (int i = 0; i < lb; ++i) d[i] += s[i];
        }
      }
    };
  }
  return y;
}

// Stack along the leading (batch) dimension; trailing dims must agree.
// Rows are contiguous, so this is two block copies.
template <class T>
int concat_first(Tape<T>& t, int a, int b) {
  Shape sa = t.shape(a), sb = t.shape(b);
  check(sa.size() == sb.size() && !sa.empty(),
        "shape error: concat_first rank mismatch");
  for (size_t i = 1; i < sa.size(); ++i) {
    check(sa[i] == sb[i], "shape error: concat_first trailing dims differ");
  }
  long na = t.numel(a), nb = t.numel(b);
  Shape sy = sa;
  sy[0] = sa[0] + sb[0];
  int y = t.make(sy, t.rq(a) || t.rq(b));
  std::memcpy(t.vm(y), t.v(a), sizeof(T) * na);
  std::memcpy(t.vm(y) + na, t.v(b), sizeof(T) * nb);
  if (t.rq(y)) {
    t.nodes[y].back = [a, b, y, na, nb](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(a)) {
        T* ga = tp.g(a);
        for (long i = 0; i < na; ++i) ga[i] += gy[i];
      }
      if (tp.rq(b)) {
        T* gb = tp.g(b);
        for (long i = 0; i < nb; ++i) gb[i] += gy[i + na];
      }
    };
  }
  return y;
}

// Rows [from, to) of the leading dimension (one contiguous block).
template <class T>
int slice_first(Tape<T>& t, int a, int from, int to) {
  Shape sa = t.shape(a);
  check(!sa.empty() && 0 <= from && from < to && to <= sa[0],
        "shape error: slice_first range");
  long inner = t.numel(a) / sa[0];
  Shape sy = sa;
  sy[0] = to - from;
  long n = inner * (to - from);
  long off = inner * from;
  int y = t.make(sy, t.rq(a));
  std::memcpy(t.vm(y), t.v(a) + off, sizeof(T) * n);
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n, off](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* ga = tp.g(a) + off;
      for (long i = 0; i < n; ++i) ga[i] += gy[i];
    };
  }
  return y;
}

// Slice [from, to) of the last dimension.
template <class T>
int slice_last(Tape<T>& t, int a, int from, int to) {
  Shape sa = t.shape(a);
  int last = sa.back();
  check(0 <= from && from < to && to <= last, "shape error: slice range");
  Shape sy = sa;
  sy.back() = to - from;
  long rows = shape_numel(sa) / last;
  int width = to - from;
  int y = t.make(sy, t.rq(a));
  const T* pa = t.v(a);
  T* py = t.vm(y);
  for (long r = 0; r < rows; ++r) {
    std::memcpy(py + r * width, pa + r * last + from, sizeof(T) * width);
  }
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, rows, last, from, width](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* ga = tp.g(a);
      for (long r = 0; r < rows; ++r) {
        const T* s = gy + r * width;
        T* d = ga + r * last + from;
        for (int i = 0; i < width; ++i) d[i] += s[i];
      }
    };
  }
  return y;
}

template <class T>
int reshape(Tape<T>& t, int a, Shape sy) {
  check(shape_numel(sy) == t.numel(a), "shape error: reshape numel mismatch");
  long n = t.numel(a);
  int y = t.make(sy, t.rq(a));
  std::memcpy(t.vm(y), t.v(a), sizeof(T) * n);
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy[i];
    };
  }
  return y;
}

// [A, B, C] -> [B, A, C]: swaps the two leading axes of a rank-3 tensor.
// Used at the sequence/batch boundary between convolutional (batch-major)
// and recurrent (time-major) layouts.
template <class T>
int swap01(Tape<T>& t, int x) {
  Shape s = t.shape(x);
  check(s.size() == 3, "shape error: swap01 needs rank 3");
  int A = s[0], B = s[1], C = s[2];
  int y = t.make({B, A, C}, t.rq(x));
  const T* px = t.v(x);
  T* py = t.vm(y);
  for (int a = 0; a < A; ++a) {
    for (int b = 0; b < B; ++b) {
      std::memcpy(py + (size_t(b) * A + a) * C, px + (size_t(a) * B + b) * C,
                  sizeof(T) * C);
    }
  }
  if (t.rq(y)) {
    t.nodes[y].back = [x, y, A, B, C](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* gx = tp.g(x);
      for (int a = 0; a < A; ++a) {
        for (int b = 0; b < B; ++b) {
          const T* s2 = gy + (size_t(b) * A + a) * C;
          T* d = gx + (size_t(a) * B + b) * C;
          for (int c = 0; c < C; ++c) d[c] += s2[c];
        }
      }
    };
  }
  return y;
}

// Reverses the leading (time) axis of a rank-3 tensor.
template <class T>
int reverse0(Tape<T>& t, int x) {
  Shape s = t.shape(x);
  check(s.size() == 3, "shape error: reverse0 needs rank 3");
  int A = s[0];
  long inner = long(s[1]) * s[2];
  int y = t.make(s, t.rq(x));
  const T* px = t.v(x);
  T* py = t.vm(y);
  for (int a = 0; a < A; ++a) {
    std::memcpy(py + size_t(a) * inner, px + size_t(A - 1 - a) * inner,
                sizeof(T) * inner);
  }
  if (t.rq(y)) {
    t.nodes[y].back = [x, y, A, inner](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* gx = tp.g(x);
      for (int a = 0; a < A; ++a) {
        const T* s2 = gy + size_t(a) * inner;
        T* d = gx + size_t(A - 1 - a) * inner;
        for (long i = 0; i < inner; ++i) d[i] += s2[i];
      }
    };
  }
  return y;
}

// [B, F, C] -> [B, F*r, C]: every frame repeated r consecutive times
// (nearest-neighbor upsampling along the frame axis).
template <class T>
int repeat_frames(Tape<T>& t, int x, int r) {
  Shape s = t.shape(x);
  check(s.size() == 3 && r >= 1, "shape error: repeat_frames needs rank 3");
  int B = s[0], F = s[1], C = s[2];
  int y = t.make({B, F * r, C}, t.rq(x));
  const T* px = t.v(x);
  T* py = t.vm(y);
  for (int b = 0; b < B; ++b) {
    for (int f = 0; f < F; ++f) {
      const T* src = px + (size_t(b) * F + f) * C;
      for (int k = 0; k < r; ++k) {
        std::memcpy(py + (size_t(b) * F * r + size_t(f) * r + k) * C, src,
                    sizeof(T) * C);
      }
    }
  }
  if (t.rq(y)) {
    t.nodes[y].back = [x, y, B, F, C, r](Tape<T>& tp) {
      const T* gy = tp.g(y);
      T* gx = tp.g(x);
      for (int b = 0; b < B; ++b) {
        for (int f = 0; f < F; ++f) {
          T* d = gx + (size_t(b) * F + f) * C;
          for (int k = 0; k < r; ++k) {
            const T* s2 = gy + (size_t(b) * F * r + size_t(f) * r + k) * C;
            for (int c = 0; c < C; ++c) d[c] += s2[c];
          }
        }
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
int sum_all(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = t.make({1}, t.rq(a));
  const T* pa = t.v(a);
  T acc = 0;
  for (long i = 0; i < n; ++i) acc += pa[i];
  t.vm(y)[0] = acc;
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      T gy = tp.g(y)[0];
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) ga[i] += gy;
    };
  }
  return y;
}

template <class T>
int mean_all(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = sum_all(t, a);
  return scale(t, y, T(1) / T(n));
}

// Sum of absolute values (the building block of the L1 losses).
template <class T>
int abs_sum(Tape<T>& t, int a) {
  long n = t.numel(a);
  int y = t.make({1}, t.rq(a));
  const T* pa = t.v(a);
  T acc = 0;
  for (long i = 0; i < n; ++i) acc += pa[i] < T(0) ? -pa[i] : pa[i];
  t.vm(y)[0] = acc;
  if (t.rq(y)) {
    t.nodes[y].back = [a, y, n](Tape<T>& tp) {
      T gy = tp.g(y)[0];
      const T* pa2 = tp.v(a);
      T* ga = tp.g(a);
      for (long i = 0; i < n; ++i) {
        if (pa2[i] > T(0)) {
          ga[i] += gy;
        } else if (pa2[i] < T(0)) {
          ga[i] -= gy;
        }
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// Plain matrix product: [M, K] x [K, N] -> [M, N].
template <class T>
int matmul(Tape<T>& t, int a, int b) {
  Shape sa = t.shape(a), sb = t.shape(b);
  check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
        "shape error: matmul " + shape_str(sa) + " x " + shape_str(sb));
  int M = sa[0], K = sa[1], N = sb[1];
  int y = t.make({M, N}, t.rq(a) || t.rq(b));
  gemm(false, false, M, N, K, T(1), t.v(a), K, t.v(b), N, T(0), t.vm(y), N);
  if (t.rq(y)) {
    t.nodes[y].back = [a, b, y, M, K, N](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(a)) {
        gemm(false, true, M, K, N, T(1), gy, N, tp.v(b), N, T(1), tp.g(a), K);
      }
      if (tp.rq(b)) {
        gemm(true, false, K, N, M, T(1), tp.v(a), K, gy, N, T(1), tp.g(b), N);
      }
    };
  }
  return y;
}

// Affine map y = x * W^T + b with x [..., K] folded to [M, K], W [N, K],
// optional b [N] (pass -1 to skip).
template <class T>
int linear(Tape<T>& t, int x, int w, int b) {
  Shape sx = t.shape(x), sw = t.shape(w);
  check(sw.size() == 2 && !sx.empty() && sx.back() == sw[1],
        "shape error: linear input " + shape_str(sx) + " vs weight " +
            shape_str(sw));
  int K = sw[1], N = sw[0];
  long M = t.numel(x) / K;
  Shape sy = sx;
  sy.back() = N;
  bool rq = t.rq(x) || t.rq(w) || (b >= 0 && t.rq(b));
  int y = t.make(sy, rq);
  gemm(false, true, int(M), N, K, T(1), t.v(x), K, t.v(w), K, T(0), t.vm(y),
       N);
  if (b >= 0) {
    check(t.shape(b) == Shape{N}, "shape error: linear bias");
    detail::add_rowwise(t.vm(y), t.v(b), M, N);
  }
  if (rq) {
    t.nodes[y].back = [x, w, b, y, M, K, N](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(x)) {
        gemm(false, false, int(M), K, N, T(1), gy, N, tp.v(w), K, T(1),
             tp.g(x), K);
      }
      if (tp.rq(w)) {
        gemm(true, false, N, K, int(M), T(1), gy, N, tp.v(x), K, T(1),
             tp.g(w), K);
      }
      if (b >= 0 && tp.rq(b)) {
        detail::colsum_accum(gy, M, N, tp.g(b));
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// 1-D convolution over frames: x [B, T, C_in], w [C_out, K, C_in], b [C_out]
// -> y [B, T', C_out] with T' = (T + 2*pad - K)/stride + 1.
//
// Lowered to one GEMM via column gathering.  The weight layout [C_out, K,
// C_in] makes each gathered column a run of K contiguous frame slices, so
// the gather is K memcpys per output position.
// ---------------------------------------------------------------------------

template <class T>
int conv1d(Tape<T>& t, int x, int w, int b, int stride, int pad) {
  Shape sx = t.shape(x), sw = t.shape(w);
  check(sx.size() == 3 && sw.size() == 3 && sx[2] == sw[2],
        "shape error: conv1d input " + shape_str(sx) + " vs weight " +
            shape_str(sw));
  int B = sx[0], Tlen = sx[1], Ci = sx[2];
  int Co = sw[0], K = sw[1];
  // Output length floor((T + 2p - K)/s) + 1; the first window must fit the
  // padded signal, otherwise the op would invent padding beyond `pad`.
  if (Tlen + 2 * pad < K) {
    throw Error("shape error: conv1d output would be empty");
  }
  int Tout = (Tlen + 2 * pad - K) / stride + 1;
  if (Tout < 1) throw Error("shape error: conv1d output would be empty");

  long rows = long(B) * Tout;
  int patch = K * Ci;
  std::vector<T> cols(size_t(rows) * patch, T(0));
  const T* px = t.v(x);
  for (int bi = 0; bi < B; ++bi) {
    const T* xb = px + size_t(bi) * Tlen * Ci;
    for (int to = 0; to < Tout; ++to) {
      T* dst = cols.data() + (size_t(bi) * Tout + to) * patch;
      int t0 = to * stride - pad;
      for (int k = 0; k < K; ++k) {
        int ti = t0 + k;
        if (ti >= 0 && ti < Tlen) {
          std::memcpy(dst + size_t(k) * Ci, xb + size_t(ti) * Ci,
                      sizeof(T) * Ci);
        }
      }
    }
  }

  bool rq = t.rq(x) || t.rq(w) || (b >= 0 && t.rq(b));
  int y = t.make({B, Tout, Co}, rq);
  gemm(false, true, int(rows), Co, patch, T(1), cols.data(), patch, t.v(w),
       patch, T(0), t.vm(y), Co);
  if (b >= 0) {
    check(t.shape(b) == Shape{Co}, "shape error: conv1d bias");
    detail::add_rowwise(t.vm(y), t.v(b), rows, Co);
  }

  if (rq) {
    auto saved = std::make_shared<std::vector<T>>(std::move(cols));
    t.nodes[y].back = [x, w, b, y, B, Tlen, Ci, Co, K, Tout, stride, pad,
                       rows, patch, saved](Tape<T>& tp) {
      const T* gy = tp.g(y);
      if (tp.rq(w)) {
        gemm(true, false, Co, patch, int(rows), T(1), gy, Co, saved->data(),
             patch, T(1), tp.g(w), patch);
      }
      if (b >= 0 && tp.rq(b)) {
        detail::colsum_accum(gy, rows, Co, tp.g(b));
      }
      if (tp.rq(x)) {
        std::vector<T> dcols(size_t(rows) * patch);
        gemm(false, false, int(rows), patch, Co, T(1), gy, Co, tp.v(w), patch,
             T(0), dcols.data(), patch);
        T* gx = tp.g(x);
        for (int bi = 0; bi < B; ++bi) {
          T* gxb = gx + size_t(bi) * Tlen * Ci;
          for (int to = 0; to < Tout; ++to) {
            const T* src = dcols.data() + (size_t(bi) * Tout + to) * patch;
            int t0 = to * stride - pad;
            for (int k = 0; k < K; ++k) {
              int ti = t0 + k;
              if (ti >= 0 && ti < Tlen) {
                const T* s2 = src + size_t(k) * Ci;
                T* d = gxb + size_t(ti) * Ci;
                for (int c = 0; c < Ci; ++c) d[c] += s2[c];
              }
            }
          }
        }
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization over channels: x [..., C] folded to rows x C.
// Training mode normalizes with batch statistics and (optionally) updates
// running buffers in place; eval mode consumes the running buffers.
// ---------------------------------------------------------------------------

template <class T>
int batchnorm(Tape<T>& t, int x, int gamma, int beta,
              std::vector<T>* running_mean, std::vector<T>* running_var,
              bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  Shape sx = t.shape(x);
  int C = sx.back();
  long N = t.numel(x) / C;
  check(t.shape(gamma) == Shape{C} && t.shape(beta) == Shape{C},
        "shape error: batchnorm parameter size");

  std::vector<T> mean(C, T(0)), var(C, T(0));
  const T* px = t.v(x);
  if (training) {
    for (long r = 0; r < N; ++r) {
      const T* xr = px + r * C;
      for (int c = 0; c < C; ++c) mean[c] += xr[c];
    }
    for (int c = 0; c < C; ++c) mean[c] /= T(N);
    for (long r = 0; r < N; ++r) {
      const T* xr = px + r * C;
      for (int c = 0; c < C; ++c) {
        T d = xr[c] - mean[c];
        var[c] += d * d;
      }
    }
    for (int c = 0; c < C; ++c) var[c] /= T(N);
    if (running_mean && running_var) {
      check(long(running_mean->size()) == C && long(running_var->size()) == C,
            "shape error: batchnorm running buffers");
      T unbias = N > 1 ? T(N) / T(N - 1) : T(1);
      for (int c = 0; c < C; ++c) {
        (*running_mean)[c] =
            (T(1) - momentum) * (*running_mean)[c] + momentum * mean[c];
        (*running_var)[c] =
            (T(1) - momentum) * (*running_var)[c] + momentum * var[c] * unbias;
      }
    }
  } else {
    check(running_mean && running_var,
          "state error: batchnorm eval mode needs running statistics");
    mean.assign(running_mean->begin(), running_mean->end());
    var.assign(running_var->begin(), running_var->end());
  }

  std::vector<T> invstd(C);
  for (int c = 0; c < C; ++c) invstd[c] = T(1) / std::sqrt(var[c] + eps);

  bool rq = t.rq(x) || t.rq(gamma) || t.rq(beta);
  int y = t.make(sx, rq);
  std::vector<T> xhat(size_t(N) * C);
  const T* pg = t.v(gamma);
  const T* pb = t.v(beta);
  T* py = t.vm(y);
  for (long r = 0; r < N; ++r) {
    const T* xr = px + r * C;
    T* hr = xhat.data() + r * C;
    T* yr = py + r * C;
    for (int c = 0; c < C; ++c) {
      hr[c] = (xr[c] - mean[c]) * invstd[c];
      yr[c] = pg[c] * hr[c] + pb[c];
    }
  }

  if (rq) {
    auto hsave = std::make_shared<std::vector<T>>(std::move(xhat));
    auto isave = std::make_shared<std::vector<T>>(std::move(invstd));
    t.nodes[y].back = [x, gamma, beta, y, N, C, training, hsave,
                       isave](Tape<T>& tp) {
      const T* gy = tp.g(y);
      const T* hat = hsave->data();
      const T* istd = isave->data();
      const T* pg2 = tp.v(gamma);
      if (tp.rq(gamma)) {
        T* gg = tp.g(gamma);
        for (long r = 0; r < N; ++r) {
          const T* gyr = gy + r * C;
          const T* hr = hat + r * C;
          for (int c = 0; c < C; ++c) gg[c] += gyr[c] * hr[c];
        }
      }
      if (tp.rq(beta)) {
        detail::colsum_accum(gy, N, C, tp.g(beta));
      }
      if (tp.rq(x)) {
        T* gx = tp.g(x);
        if (training) {
          // d xhat = gy * gamma; batch statistics couple all rows:
          // gx = invstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
          std::vector<T> s1(C, T(0)), s2(C, T(0));
          for (long r = 0; r < N; ++r) {
            const T* gyr = gy + r * C;
            const T* hr = hat + r * C;
            for (int c = 0; c < C; ++c) {
              T dh = gyr[c] * pg2[c];
              s1[c] += dh;
              s2[c] += dh * hr[c];
            }
          }
          for (int c = 0; c < C; ++c) {
            s1[c] /= T(N);
            s2[c] /= T(N);
          }
          for (long r = 0; r < N; ++r) {
            const T* gyr = gy + r * C;
            const T* hr = hat + r * C;
            T* gxr = gx + r * C;
            for (int c = 0; c < C; ++c) {
              T dh = gyr[c] * pg2[c];
              gxr[c] += istd[c] * (dh - s1[c] - hr[c] * s2[c]);
            }
          }
        } else {
          for (long r = 0; r < N; ++r) {
            const T* gyr = gy + r * C;
            T* gxr = gx + r * C;
            for (int c = 0; c < C; ++c) gxr[c] += gyr[c] * pg2[c] * istd[c];
          }
        }
      }
    };
  }
  return y;
}

// ---------------------------------------------------------------------------
// LSTM layer over a full sequence: x [T, B, I] -> h [T, B, H].
//
// Gate blocks in the 4H dimension are ordered (input, forget, cell, output).
// Zero initial state.  The input projection for all steps is one large GEMM;
// the per-step recurrent products run in transposed form ([4H, H] x [H, B]),
// which is the fast shape when B is small.  The backward pass replays the
// recurrence from saved gate activations and cell states, then folds the
// weight/bias/input gradients into batched GEMMs.
// ---------------------------------------------------------------------------

template <class T>
int lstm(Tape<T>& t, int x, int wih, int whh, int bih, int bhh) {
  Shape sx = t.shape(x), si = t.shape(wih), sh = t.shape(whh);
  check(sx.size() == 3 && si.size() == 2 && sh.size() == 2,
        "shape error: lstm tensor ranks");
  int Tt = sx[0], B = sx[1], I = sx[2];
  int H = sh[1];
  check(si[0] == 4 * H && si[1] == I && sh[0] == 4 * H,
        "shape error: lstm weights " + shape_str(si) + "/" + shape_str(sh) +
            " vs input " + shape_str(sx));
  check(t.shape(bih) == Shape{4 * H} && t.shape(bhh) == Shape{4 * H},
        "shape error: lstm biases");

  long TB = long(Tt) * B;
  // Input projection for every step at once, both biases folded in.
  std::vector<T> gin(size_t(TB) * 4 * H);
  gemm(false, true, int(TB), 4 * H, I, T(1), t.v(x), I, t.v(wih), I, T(0),
       gin.data(), 4 * H);
  {
    std::vector<T> bsum(4 * H);
    const T* p1 = t.v(bih);
    const T* p2 = t.v(bhh);
    for (int j = 0; j < 4 * H; ++j) bsum[j] = p1[j] + p2[j];
    detail::add_rowwise(gin.data(), bsum.data(), TB, 4 * H);
  }

  bool rq = t.rq(x) || t.rq(wih) || t.rq(whh) || t.rq(bih) || t.rq(bhh);
  int y = t.make({Tt, B, H}, rq);
  T* hout = t.vm(y);

  // Saved activations, all in [rows, B] transposed layout per step.
  auto gates = std::make_shared<std::vector<T>>(size_t(Tt) * 4 * H * B);
  auto cells = std::make_shared<std::vector<T>>(size_t(Tt) * H * B);
  auto tanhc = std::make_shared<std::vector<T>>(size_t(Tt) * H * B);

  std::vector<T> hT(size_t(H) * B, T(0));  // h_{t-1}^T
  std::vector<T> cT(size_t(H) * B, T(0));  // c_{t-1}^T
  const T* pwhh = t.v(whh);
  for (int ti = 0; ti < Tt; ++ti) {
    T* gT = gates->data() + size_t(ti) * 4 * H * B;
    detail::transpose2d(gin.data() + size_t(ti) * B * 4 * H, B, 4 * H, gT);
    if (ti > 0) {
      gemm(false, false, 4 * H, B, H, T(1), pwhh, H, hT.data(), B, T(1), gT,
           B);
    }
    long HB = long(H) * B;
    T* gi = gT;
    T* gf = gT + HB;
    T* gg = gT + 2 * HB;
    T* go = gT + 3 * HB;
    for (long j = 0; j < HB; ++j) gi[j] = fast_sigmoid(gi[j]);
    for (long j = 0; j < HB; ++j) gf[j] = fast_sigmoid(gf[j]);
    for (long j = 0; j < HB; ++j) gg[j] = fast_tanh(gg[j]);
    for (long j = 0; j < HB; ++j) go[j] = fast_sigmoid(go[j]);

    T* cSave = cells->data() + size_t(ti) * HB;
    T* tcSave = tanhc->data() + size_t(ti) * HB;
    for (long j = 0; j < HB; ++j) {
      T c_new = gf[j] * cT[j] + gi[j] * gg[j];
      cSave[j] = c_new;
      T tc = fast_tanh(c_new);
      tcSave[j] = tc;
      cT[j] = c_new;
      hT[j] = go[j] * tc;
    }
    detail::transpose2d(hT.data(), H, B, hout + size_t(ti) * B * H);
  }

  if (rq) {
    t.nodes[y].back = [x, wih, whh, bih, bhh, y, Tt, B, I, H, gates, cells,
                       tanhc](Tape<T>& tp) {
      long TB = long(Tt) * B;
      long HB = long(H) * B;
      const T* gy = tp.g(y);
      const T* pwhh = tp.v(whh);
      std::vector<T> dG2d(size_t(TB) * 4 * H);  // [T*B, 4H], row = (t, b)
      std::vector<T> dhT(HB, T(0)), dcT(HB, T(0));
      std::vector<T> dh_ext(HB), dgT(size_t(4) * H * B);
      for (int ti = Tt - 1; ti >= 0; --ti) {
        detail::transpose2d(gy + size_t(ti) * B * H, B, H, dh_ext.data());
        for (long j = 0; j < HB; ++j) dhT[j] += dh_ext[j];
        const T* gT = gates->data() + size_t(ti) * 4 * HB;
        const T* gi = gT;
        const T* gf = gT + HB;
        const T* gg = gT + 2 * HB;
        const T* go = gT + 3 * HB;
        const T* tc = tanhc->data() + size_t(ti) * HB;
        const T* cprev =
            ti > 0 ? cells->data() + size_t(ti - 1) * HB : nullptr;
        T* dgi = dgT.data();
        T* dgf = dgT.data() + HB;
        T* dgg = dgT.data() + 2 * HB;
        T* dgo = dgT.data() + 3 * HB;
        for (long j = 0; j < HB; ++j) {
          T dh = dhT[j];
          T dc = dcT[j] + dh * go[j] * (T(1) - tc[j] * tc[j]);
          T cp = cprev ? cprev[j] : T(0);
          dgi[j] = dc * gg[j] * gi[j] * (T(1) - gi[j]);
          dgf[j] = dc * cp * gf[j] * (T(1) - gf[j]);
          dgg[j] = dc * gi[j] * (T(1) - gg[j] * gg[j]);
          dgo[j] = dh * tc[j] * go[j] * (T(1) - go[j]);
          dcT[j] = dc * gf[j];  // flows to step t-1
        }
        detail::transpose2d(dgT.data(), 4 * H, B,
                            dG2d.data() + size_t(ti) * B * 4 * H);
        if (ti > 0) {
          gemm(true, false, H, B, 4 * H, T(1), pwhh, H, dgT.data(), B, T(0),
               dhT.data(), B);
        }
      }

      if (tp.rq(x)) {
        gemm(false, false, int(TB), I, 4 * H, T(1), dG2d.data(), 4 * H,
             tp.v(wih), I, T(1), tp.g(x), I);
      }
      if (tp.rq(wih)) {
        gemm(true, false, 4 * H, I, int(TB), T(1), dG2d.data(), 4 * H,
             tp.v(x), I, T(1), tp.g(wih), I);
      }
      if (tp.rq(whh)) {
        // h values shifted one step: rows (0, b) are the zero initial state.
        std::vector<T> hshift(size_t(TB) * H, T(0));
        std::memcpy(hshift.data() + size_t(B) * H, tp.v(y),
                    sizeof(T) * size_t(Tt - 1) * B * H);
        gemm(true, false, 4 * H, H, int(TB), T(1), dG2d.data(), 4 * H,
             hshift.data(), H, T(1), tp.g(whh), H);
      }
      if (tp.rq(bih)) {
        detail::colsum_accum(dG2d.data(), TB, 4 * H, tp.g(bih));
      }
      if (tp.rq(bhh)) {
        detail::colsum_accum(dG2d.data(), TB, 4 * H, tp.g(bhh));
      }
    };
  }
  return y;
}

}  // namespace dvae
