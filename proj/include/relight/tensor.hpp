#pragma once

// Dense float32 tensors with define-by-run reverse-mode autodiff.
//
// Ops record a backward closure on the thread's active Graph whenever an
// input requires gradients. Backward walks the tape in reverse, visiting each
// node once. Reductions accumulate in double; everything else is float32.
// All kernels use a fixed reduction order, so repeated forward passes are
// bit-identical regardless of thread count.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "relight/core.hpp"

namespace relight {

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad, false);
    if (int64_t(data.size()) != t.numel())
      throw ShapeError(cat("Tensor::from_data: ", data.size(), " values for shape ",
                           shape_str(t.shape())));
    t.impl_->data = std::move(data);
    return t;
  }
  static Tensor scalar(float v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return int(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[i]; }
  int64_t numel() const { return int64_t(impl_->data.size()); }

  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  std::vector<float>& values() { return impl_->data; }
  const std::vector<float>& values() const { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<float>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
  }
  const std::vector<float>& grad_view() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }
  void accumulate_grad_at(int64_t i, float g) { grad()[i] += g; }

  float item() const {
    if (numel() != 1) throw ShapeError(cat("Tensor::item: tensor has shape ", shape_str(shape())));
    return impl_->data[0];
  }

  // Identity of the underlying buffer; used to dedupe parameters.
  uintptr_t id() const { return reinterpret_cast<uintptr_t>(impl_.get()); }
  bool same_as(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };

  Tensor(std::vector<int> shape, bool requires_grad, bool fill_zero = true) {
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    int64_t n = 1;
    for (int d : impl_->shape) {
      if (d <= 0) throw ShapeError(cat("Tensor: bad dimension in shape ", shape_str(impl_->shape)));
      n *= d;
    }
    if (fill_zero) impl_->data.assign(size_t(n), 0.0f);
    else impl_->data.resize(size_t(n));
    impl_->requires_grad = requires_grad;
  }

  std::shared_ptr<Impl> impl_;
};

// ---------------------------------------------------------------- graph

// Tape of recorded operations. One graph is active per thread at a time;
// independent graphs on different threads do not interact.
class Graph {
 public:
  Graph() {
    prev_ = current_;
    current_ = this;
  }
  ~Graph() { current_ = prev_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current() { return current_; }

  void add_node(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }
  size_t size() const { return nodes_.size(); }
  void reset() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, once per node.
  // The tape is consumed.
  void backward(Tensor loss) {
    if (loss.numel() != 1)
      throw ShapeError(cat("backward: loss must be scalar, got shape ", shape_str(loss.shape())));
    loss.grad()[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  Graph* prev_ = nullptr;
  static thread_local Graph* current_;
};

inline thread_local Graph* Graph::current_ = nullptr;

// Marks `out` as produced from `inputs` and records `backward` if a graph is
// active and any input carries gradients. Custom fused ops use this directly.
inline void track(Tensor& out, std::initializer_list<Tensor> inputs,
                  std::function<void()> backward) {
  Graph* g = Graph::current();
  if (!g) return;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  if (!needs) return;
  out.set_requires_grad(true);
  g->add_node(std::move(backward));
}

// ---------------------------------------------------------------- helpers

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(cat(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* /*name*/, const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor y = Tensor::zeros(x.shape());
  const float* xd = x.data();
  float* yd = y.data();
  int64_t n = x.numel();
  parallel_for(n, [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) yd[i] = fwd(xd[i]);
  });
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc, bwd]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    const float* xd = xc.data();
    const float* yd = yc.data();
    float* xg = xc.grad().data();
    int64_t n = xc.numel();
    for (int64_t i = 0; i < n; ++i) xg[i] += g[i] * bwd(xd[i], yd[i]);
  });
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor relu(const Tensor& x) {
  return detail::unary_op("relu", x, [](float v) { return v > 0 ? v : 0.0f; },
                          [](float v, float) { return v > 0 ? 1.0f : 0.0f; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op("sigmoid", x,
                          [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
                          [](float, float y) { return y * (1.0f - y); });
}

inline Tensor leaky_relu(const Tensor& x, float slope = 0.2f) {
  return detail::unary_op("leaky_relu", x,
                          [slope](float v) { return v > 0 ? v : slope * v; },
                          [slope](float v, float) { return v > 0 ? 1.0f : slope; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op("exp", x, [](float v) { return std::exp(v); },
                          [](float, float y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op("log", x, [](float v) { return std::log(v); },
                          [](float v, float) { return 1.0f / v; });
}

inline Tensor tanh_t(const Tensor& x) {
  return detail::unary_op("tanh", x, [](float v) { return std::tanh(v); },
                          [](float, float y) { return 1.0f - y * y; });
}

inline Tensor abs_t(const Tensor& x) {
  return detail::unary_op("abs", x, [](float v) { return std::abs(v); },
                          [](float v, float) { return v > 0 ? 1.0f : (v < 0 ? -1.0f : 0.0f); });
}

// y = a*x + b
inline Tensor affine(const Tensor& x, float a, float b = 0.0f) {
  return detail::unary_op("affine", x, [a, b](float v) { return a * v + b; },
                          [a](float, float) { return a; });
}

inline Tensor clamp(const Tensor& x, float lo, float hi) {
  return detail::unary_op("clamp", x,
                          [lo, hi](float v) { return clampf(v, lo, hi); },
                          [lo, hi](float v, float) { return (v > lo && v < hi) ? 1.0f : 0.0f; });
}

// Clamp with per-element bounds (bounds are not differentiated).
inline Tensor clamp_per_element(const Tensor& x, const Tensor& lo, const Tensor& hi) {
  detail::check_same_shape("clamp_per_element", x, lo);
  detail::check_same_shape("clamp_per_element", x, hi);
  Tensor y = Tensor::zeros(x.shape());
  const float* xd = x.data();
  const float* ld = lo.data();
  const float* hd = hi.data();
  float* yd = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yd[i] = clampf(xd[i], ld[i], hd[i]);
  Tensor xc = x, yc = y, lc = lo, hc = hi;
  track(y, {x}, [xc, yc, lc, hc]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    const float* xd = xc.data();
    const float* ld = lc.data();
    const float* hd = hc.data();
    float* xg = xc.grad().data();
    for (int64_t i = 0; i < xc.numel(); ++i)
      if (xd[i] > ld[i] && xd[i] < hd[i]) xg[i] += g[i];
  });
  return y;
}

namespace detail {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, BwdA bwd_a,
                 BwdB bwd_b) {
  check_same_shape(name, a, b);
  Tensor y = Tensor::zeros(a.shape());
  const float* ad = a.data();
  const float* bd = b.data();
  float* yd = y.data();
  int64_t n = a.numel();
  parallel_for(n, [&](int64_t beg, int64_t end) {
    for (int64_t i = beg; i < end; ++i) yd[i] = fwd(ad[i], bd[i]);
  });
  Tensor ac = a, bc = b, yc = y;
  track(y, {a, b}, [ac, bc, yc, bwd_a, bwd_b]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    const float* ad = ac.data();
    const float* bd = bc.data();
    int64_t n = ac.numel();
    if (ac.requires_grad()) {
      float* ag = ac.grad().data();
      for (int64_t i = 0; i < n; ++i) ag[i] += g[i] * bwd_a(ad[i], bd[i]);
    }
    if (bc.requires_grad()) {
      float* bg = bc.grad().data();
      for (int64_t i = 0; i < n; ++i) bg[i] += g[i] * bwd_b(ad[i], bd[i]);
    }
  });
  return y;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op("add", a, b, [](float x, float y) { return x + y; },
                           [](float, float) { return 1.0f; }, [](float, float) { return 1.0f; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op("sub", a, b, [](float x, float y) { return x - y; },
                           [](float, float) { return 1.0f; }, [](float, float) { return -1.0f; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op("mul", a, b, [](float x, float y) { return x * y; },
                           [](float, float y) { return y; }, [](float x, float) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op("div", a, b, [](float x, float y) { return x / y; },
                           [](float, float y) { return 1.0f / y; },
                           [](float x, float y) { return -x / (y * y); });
}

// ---------------------------------------------------------------- reductions

// Sum of all elements; double accumulator, sequential order.
inline Tensor sum(const Tensor& x) {
  double acc = 0;
  const float* xd = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) acc += xd[i];
  Tensor y = Tensor::scalar(float(acc));
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    float g = yc.grad_view()[0];
    float* xg = xc.grad().data();
    for (int64_t i = 0; i < xc.numel(); ++i) xg[i] += g;
  });
  return y;
}

inline Tensor mean(const Tensor& x) { return affine(sum(x), 1.0f / float(x.numel())); }

// Row sums of a [R, C] tensor -> [R].
inline Tensor row_sum(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError(cat("row_sum: need rank-2 tensor, got ", shape_str(x.shape())));
  int R = x.dim(0), C = x.dim(1);
  Tensor y = Tensor::zeros({R});
  const float* xd = x.data();
  float* yd = y.data();
  for (int r = 0; r < R; ++r) {
    double acc = 0;
    for (int c = 0; c < C; ++c) acc += xd[int64_t(r) * C + c];
    yd[r] = float(acc);
  }
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc, R, C]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* xg = xc.grad().data();
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) xg[int64_t(r) * C + c] += g[r];
  });
  return y;
}

// Copy-reshape (keeps autodiff simple; no aliased views).
inline Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  Tensor y = Tensor::from_data(std::move(new_shape), x.values());
  if (y.numel() != x.numel())
    throw ShapeError(cat("reshape: cannot reshape ", shape_str(x.shape()), " to ",
                         shape_str(y.shape())));
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* xg = xc.grad().data();
    for (int64_t i = 0; i < xc.numel(); ++i) xg[i] += g[i];
  });
  return y;
}

// ---------------------------------------------------------------- matmul

// [M,K] x [K,N] -> [M,N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(cat("matmul: incompatible shapes ", shape_str(a.shape()), " x ",
                         shape_str(b.shape())));
  int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor y = Tensor::zeros({M, N});
  const float* ad = a.data();
  const float* bd = b.data();
  float* yd = y.data();
  parallel_for(M, [&](int64_t rb, int64_t re) {
    for (int64_t m = rb; m < re; ++m) {
      float* out = yd + m * N;
      const float* arow = ad + m * K;
      for (int k = 0; k < K; ++k) {
        float av = arow[k];
        if (av == 0.0f) continue;
        const float* brow = bd + int64_t(k) * N;
        for (int n = 0; n < N; ++n) out[n] += av * brow[n];
      }
    }
  });
  Tensor ac = a, bc = b, yc = y;
  track(y, {a, b}, [ac, bc, yc, M, K, N]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    const float* ad = ac.data();
    const float* bd = bc.data();
    if (ac.requires_grad()) {
      float* ag = ac.grad().data();
      parallel_for(M, [&](int64_t rb, int64_t re) {
        for (int64_t m = rb; m < re; ++m)
          for (int k = 0; k < K; ++k) {
            const float* brow = bd + int64_t(k) * N;
            const float* grow = g + m * N;
            double acc = 0;
            for (int n = 0; n < N; ++n) acc += double(grow[n]) * brow[n];
            ag[m * K + k] += float(acc);
          }
      });
    }
    if (bc.requires_grad()) {
      float* bg = bc.grad().data();
      parallel_for(K, [&](int64_t kb, int64_t ke) {
        for (int64_t k = kb; k < ke; ++k)
          for (int n = 0; n < N; ++n) {
            double acc = 0;
            for (int m = 0; m < M; ++m) acc += double(ad[int64_t(m) * K + k]) * g[int64_t(m) * N + n];
            bg[k * N + n] += float(acc);
          }
      });
    }
  });
  return y;
}

// x: [M,N], bias: [N] -> x + bias per row
inline Tensor bias_add_rows(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw ShapeError(cat("bias_add_rows: shapes ", shape_str(x.shape()), " + ",
                         shape_str(bias.shape())));
  int M = x.dim(0), N = x.dim(1);
  Tensor y = Tensor::zeros({M, N});
  const float* xd = x.data();
  const float* bd = bias.data();
  float* yd = y.data();
  for (int64_t m = 0; m < M; ++m)
    for (int n = 0; n < N; ++n) yd[m * N + n] = xd[m * N + n] + bd[n];
  Tensor xc = x, bc = bias, yc = y;
  track(y, {x, bias}, [xc, bc, yc, M, N]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    if (xc.requires_grad()) {
      float* xg = xc.grad().data();
      for (int64_t i = 0; i < int64_t(M) * N; ++i) xg[i] += g[i];
    }
    if (bc.requires_grad()) {
      float* bg = bc.grad().data();
      for (int n = 0; n < N; ++n) {
        double acc = 0;
        for (int m = 0; m < M; ++m) acc += g[int64_t(m) * N + n];
        bg[n] += float(acc);
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------- positional encoding

// [S,D] -> [S, D*(1 + 2F)]: per input dim, (x, sin(2^k pi x), cos(2^k pi x)).
inline Tensor positional_encoding(const Tensor& x, int freqs = 6) {
  if (x.rank() != 2) throw ShapeError(cat("positional_encoding: need [S,D], got ", shape_str(x.shape())));
  int S = x.dim(0), D = x.dim(1);
  int W = D * (1 + 2 * freqs);
  Tensor y = Tensor::zeros({S, W});
  const float* xd = x.data();
  float* yd = y.data();
  parallel_for(S, [&](int64_t sb, int64_t se) {
    for (int64_t s = sb; s < se; ++s)
      for (int d = 0; d < D; ++d) {
        float v = xd[s * D + d];
        float* out = yd + s * W + int64_t(d) * (1 + 2 * freqs);
        out[0] = v;
        float scale = kPi;
        for (int k = 0; k < freqs; ++k) {
          out[1 + 2 * k] = std::sin(scale * v);
          out[2 + 2 * k] = std::cos(scale * v);
          scale *= 2.0f;
        }
      }
  });
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc, S, D, freqs, W]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    const float* xd = xc.data();
    float* xg = xc.grad().data();
    for (int64_t s = 0; s < S; ++s)
      for (int d = 0; d < D; ++d) {
        float v = xd[s * D + d];
        const float* go = g + s * W + int64_t(d) * (1 + 2 * freqs);
        double acc = go[0];
        float scale = kPi;
        for (int k = 0; k < freqs; ++k) {
          acc += double(go[1 + 2 * k]) * scale * std::cos(scale * v);
          acc -= double(go[2 + 2 * k]) * scale * std::sin(scale * v);
          scale *= 2.0f;
        }
        xg[s * D + d] += float(acc);
      }
  });
  return y;
}

// ---------------------------------------------------------------- convolution

// x: [Cin,H,W], w: [Cout,Cin,k,k], b: [Cout]; zero padding k/2, odd k.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw ShapeError(cat("conv2d: ranks x", shape_str(x.shape()), " w", shape_str(w.shape()),
                         " b", shape_str(b.shape())));
  int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin || w.dim(3) != k || b.dim(0) != Cout || k % 2 == 0)
    throw ShapeError(cat("conv2d: shape mismatch x", shape_str(x.shape()), " w",
                         shape_str(w.shape())));
  int p = k / 2;
  int Ho = (H + 2 * p - k) / stride + 1;
  int Wo = (W + 2 * p - k) / stride + 1;
  Tensor y = Tensor::zeros({Cout, Ho, Wo});
  const float* xd = x.data();
  const float* wd = w.data();
  const float* bd = b.data();
  float* yd = y.data();
  parallel_for(int64_t(Cout) * Ho, [&](int64_t rb, int64_t re) {
    for (int64_t r = rb; r < re; ++r) {
      int co = int(r / Ho), oy = int(r % Ho);
      for (int ox = 0; ox < Wo; ++ox) {
        float acc = bd[co];
        int iy0 = oy * stride - p, ix0 = ox * stride - p;
        for (int ci = 0; ci < Cin; ++ci) {
          const float* xp = xd + (int64_t(ci) * H) * W;
          const float* wp = wd + ((int64_t(co) * Cin + ci) * k) * k;
          for (int ky = 0; ky < k; ++ky) {
            int iy = iy0 + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ix0 + kx;
              if (ix < 0 || ix >= W) continue;
              acc += wp[ky * k + kx] * xp[int64_t(iy) * W + ix];
            }
          }
        }
        yd[(int64_t(co) * Ho + oy) * Wo + ox] = acc;
      }
    }
  });
  Tensor xc = x, wc = w, bc = b, yc = y;
  track(y, {x, w, b}, [xc, wc, bc, yc, Cin, H, W, Cout, k, p, stride, Ho, Wo]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    const float* xd = xc.data();
    const float* wd = wc.data();
    if (xc.requires_grad()) {
      float* xg = xc.grad().data();
      parallel_for(int64_t(Cin) * H, [&](int64_t rb, int64_t re) {
        for (int64_t r = rb; r < re; ++r) {
          int ci = int(r / H), iy = int(r % H);
          for (int ix = 0; ix < W; ++ix) {
            double acc = 0;
            for (int ky = 0; ky < k; ++ky) {
              int oy_num = iy + p - ky;
              if (oy_num % stride != 0) continue;
              int oy = oy_num / stride;
              if (oy < 0 || oy >= Ho) continue;
              for (int kx = 0; kx < k; ++kx) {
                int ox_num = ix + p - kx;
                if (ox_num % stride != 0) continue;
                int ox = ox_num / stride;
                if (ox < 0 || ox >= Wo) continue;
                for (int co = 0; co < Cout; ++co)
                  acc += double(wd[((int64_t(co) * Cin + ci) * k + ky) * k + kx]) *
                         g[(int64_t(co) * Ho + oy) * Wo + ox];
              }
            }
            xg[(int64_t(ci) * H + iy) * W + ix] += float(acc);
          }
        }
      });
    }
    if (wc.requires_grad()) {
      float* wg = wc.grad().data();
      parallel_for(int64_t(Cout) * Cin, [&](int64_t rb, int64_t re) {
        for (int64_t r = rb; r < re; ++r) {
          int co = int(r / Cin), ci = int(r % Cin);
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              double acc = 0;
              for (int oy = 0; oy < Ho; ++oy) {
                int iy = oy * stride - p + ky;
                if (iy < 0 || iy >= H) continue;
                for (int ox = 0; ox < Wo; ++ox) {
                  int ix = ox * stride - p + kx;
                  if (ix < 0 || ix >= W) continue;
                  acc += double(xd[(int64_t(ci) * H + iy) * W + ix]) *
                         g[(int64_t(co) * Ho + oy) * Wo + ox];
                }
              }
              wg[((int64_t(co) * Cin + ci) * k + ky) * k + kx] += float(acc);
            }
        }
      });
    }
    if (bc.requires_grad()) {
      float* bg = bc.grad().data();
      for (int co = 0; co < Cout; ++co) {
        double acc = 0;
        for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) acc += g[int64_t(co) * Ho * Wo + i];
        bg[co] += float(acc);
      }
    }
  });
  return y;
}

// Partial convolution (masked, renormalized by in-bounds valid coverage) plus
// the updated mask. The mask is a [1,H,W] 0/1 raster and is not differentiated.
// Renormalization counts only in-bounds taps, so a full mask reproduces plain
// zero-padded conv2d exactly.
struct PartialConvOut {
  Tensor value;
  Tensor mask;
};

inline PartialConvOut partial_conv2d(const Tensor& x, const Tensor& mask, const Tensor& w,
                                     const Tensor& b, int stride = 1) {
  if (x.rank() != 3 || mask.rank() != 3 || mask.dim(0) != 1 || mask.dim(1) != x.dim(1) ||
      mask.dim(2) != x.dim(2))
    throw ShapeError(cat("partial_conv2d: mask ", shape_str(mask.shape()), " vs x ",
                         shape_str(x.shape())));
  int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin || b.dim(0) != Cout || k % 2 == 0)
    throw ShapeError(cat("partial_conv2d: shape mismatch x", shape_str(x.shape()), " w",
                         shape_str(w.shape())));
  int p = k / 2;
  int Ho = (H + 2 * p - k) / stride + 1;
  int Wo = (W + 2 * p - k) / stride + 1;
  Tensor y = Tensor::zeros({Cout, Ho, Wo});
  Tensor mask_out = Tensor::zeros({1, Ho, Wo});
  // Coverage ratio per output position, shared with backward.
  auto ratio = std::make_shared<std::vector<float>>(size_t(Ho) * Wo, 0.0f);
  const float* xd = x.data();
  const float* md = mask.data();
  const float* wd = w.data();
  const float* bd = b.data();
  float* yd = y.data();
  float* mo = mask_out.data();
  float* rd = ratio->data();
  parallel_for(Ho, [&](int64_t rb, int64_t re) {
    for (int64_t oy = rb; oy < re; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        int iy0 = int(oy) * stride - p, ix0 = ox * stride - p;
        int in_bounds = 0, valid = 0;
        for (int ky = 0; ky < k; ++ky) {
          int iy = iy0 + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < k; ++kx) {
            int ix = ix0 + kx;
            if (ix < 0 || ix >= W) continue;
            ++in_bounds;
            if (md[int64_t(iy) * W + ix] > 0.5f) ++valid;
          }
        }
        float r = valid > 0 ? float(in_bounds) / float(valid) : 0.0f;
        rd[oy * Wo + ox] = r;
        mo[oy * Wo + ox] = valid > 0 ? 1.0f : 0.0f;
      }
    }
  });
  parallel_for(int64_t(Cout) * Ho, [&](int64_t rb, int64_t re) {
    for (int64_t r = rb; r < re; ++r) {
      int co = int(r / Ho), oy = int(r % Ho);
      for (int ox = 0; ox < Wo; ++ox) {
        float rr = rd[int64_t(oy) * Wo + ox];
        if (rr == 0.0f) {
          yd[(int64_t(co) * Ho + oy) * Wo + ox] = 0.0f;
          continue;
        }
        int iy0 = oy * stride - p, ix0 = ox * stride - p;
        float acc = 0;
        for (int ci = 0; ci < Cin; ++ci) {
          const float* xp = xd + int64_t(ci) * H * W;
          const float* wp = wd + (int64_t(co) * Cin + ci) * k * k;
          for (int ky = 0; ky < k; ++ky) {
            int iy = iy0 + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ix0 + kx;
              if (ix < 0 || ix >= W) continue;
              if (md[int64_t(iy) * W + ix] <= 0.5f) continue;
              acc += wp[ky * k + kx] * xp[int64_t(iy) * W + ix];
            }
          }
        }
        yd[(int64_t(co) * Ho + oy) * Wo + ox] = acc * rr + bd[co];
      }
    }
  });
  Tensor xc = x, mc = mask, wc = w, bc = b, yc = y;
  track(y, {x, w, b},
        [xc, mc, wc, bc, yc, ratio, Cin, H, W, Cout, k, p, stride, Ho, Wo]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    const float* xd = xc.data();
    const float* md = mc.data();
    const float* wd = wc.data();
    const float* rd = ratio->data();
    if (xc.requires_grad()) {
      float* xg = xc.grad().data();
      parallel_for(int64_t(Cin) * H, [&](int64_t rb, int64_t re) {
        for (int64_t r = rb; r < re; ++r) {
          int ci = int(r / H), iy = int(r % H);
          for (int ix = 0; ix < W; ++ix) {
            if (md[int64_t(iy) * W + ix] <= 0.5f) continue;
            double acc = 0;
            for (int ky = 0; ky < k; ++ky) {
              int oy_num = iy + p - ky;
              if (oy_num % stride != 0) continue;
              int oy = oy_num / stride;
              if (oy < 0 || oy >= Ho) continue;
              for (int kx = 0; kx < k; ++kx) {
                int ox_num = ix + p - kx;
                if (ox_num % stride != 0) continue;
                int ox = ox_num / stride;
                if (ox < 0 || ox >= Wo) continue;
                float rr = rd[int64_t(oy) * Wo + ox];
                if (rr == 0.0f) continue;
                for (int co = 0; co < Cout; ++co)
                  acc += double(wd[((int64_t(co) * Cin + ci) * k + ky) * k + kx]) * rr *
                         g[(int64_t(co) * Ho + oy) * Wo + ox];
              }
            }
            xg[(int64_t(ci) * H + iy) * W + ix] += float(acc);
          }
        }
      });
    }
    if (wc.requires_grad()) {
      float* wg = wc.grad().data();
      parallel_for(int64_t(Cout) * Cin, [&](int64_t rb, int64_t re) {
        for (int64_t r = rb; r < re; ++r) {
          int co = int(r / Cin), ci = int(r % Cin);
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              double acc = 0;
              for (int oy = 0; oy < Ho; ++oy) {
                int iy = oy * stride - p + ky;
                if (iy < 0 || iy >= H) continue;
                for (int ox = 0; ox < Wo; ++ox) {
                  int ix = ox * stride - p + kx;
                  if (ix < 0 || ix >= W) continue;
                  if (md[int64_t(iy) * W + ix] <= 0.5f) continue;
                  float rr = rd[int64_t(oy) * Wo + ox];
                  if (rr == 0.0f) continue;
                  acc += double(xd[(int64_t(ci) * H + iy) * W + ix]) * rr *
                         g[(int64_t(co) * Ho + oy) * Wo + ox];
                }
              }
              wg[((int64_t(co) * Cin + ci) * k + ky) * k + kx] += float(acc);
            }
        }
      });
    }
    if (bc.requires_grad()) {
      float* bg = bc.grad().data();
      for (int co = 0; co < Cout; ++co) {
        double acc = 0;
        for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i)
          if (rd[i] > 0.0f) acc += g[int64_t(co) * Ho * Wo + i];
        bg[co] += float(acc);
      }
    }
  });
  return {y, mask_out};
}

// [C*4, H, W] -> [C, 2H, 2W]
inline Tensor depth_to_space(const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) % 4 != 0)
    throw ShapeError(cat("depth_to_space: need [4C,H,W], got ", shape_str(x.shape())));
  int C = x.dim(0) / 4, H = x.dim(1), W = x.dim(2);
  Tensor y = Tensor::zeros({C, 2 * H, 2 * W});
  const float* xd = x.data();
  float* yd = y.data();
  for (int c = 0; c < C; ++c)
    for (int sy = 0; sy < 2; ++sy)
      for (int sx = 0; sx < 2; ++sx) {
        const float* src = xd + int64_t(c * 4 + sy * 2 + sx) * H * W;
        for (int yy = 0; yy < H; ++yy)
          for (int xx = 0; xx < W; ++xx)
            yd[(int64_t(c) * 2 * H + (2 * yy + sy)) * 2 * W + (2 * xx + sx)] =
                src[int64_t(yy) * W + xx];
      }
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc, C, H, W]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* xg = xc.grad().data();
    for (int c = 0; c < C; ++c)
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          float* dst = xg + int64_t(c * 4 + sy * 2 + sx) * H * W;
          for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx)
              dst[int64_t(yy) * W + xx] +=
                  g[(int64_t(c) * 2 * H + (2 * yy + sy)) * 2 * W + (2 * xx + sx)];
        }
  });
  return y;
}

// Concatenate [Ci,H,W] tensors along channels.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  int H = parts[0].dim(1), W = parts[0].dim(2);
  int C = 0;
  for (const auto& t : parts) {
    if (t.rank() != 3 || t.dim(1) != H || t.dim(2) != W)
      throw ShapeError(cat("concat_channels: mismatched part ", shape_str(t.shape())));
    C += t.dim(0);
  }
  Tensor y = Tensor::zeros({C, H, W});
  float* yd = y.data();
  int64_t off = 0;
  for (const auto& t : parts) {
    std::memcpy(yd + off, t.data(), sizeof(float) * t.numel());
    off += t.numel();
  }
  Tensor yc = y;
  auto parts_copy = parts;
  bool needs = false;
  for (const auto& t : parts) needs = needs || t.requires_grad();
  if (Graph::current() && needs) {
    y.set_requires_grad(true);
    Graph::current()->add_node([parts_copy, yc]() mutable {
      if (!yc.has_grad()) return;
      const float* g = yc.grad_view().data();
      int64_t off = 0;
      for (auto& t : parts_copy) {
        if (t.requires_grad()) {
          float* tg = t.grad().data();
          for (int64_t i = 0; i < t.numel(); ++i) tg[i] += g[off + i];
        }
        off += t.numel();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- grid sampling

// Bilinear sample of map [C,H,W] at coords [S,2] (u,v in [0,1]^2, texel-center
// convention, clamp to border) -> [S,C]. Differentiates through the map and,
// when coords require grad, through the coordinates.
inline Tensor grid_sample_2d(const Tensor& map, const Tensor& coords) {
  if (map.rank() != 3 || coords.rank() != 2 || coords.dim(1) != 2)
    throw ShapeError(cat("grid_sample_2d: map ", shape_str(map.shape()), " coords ",
                         shape_str(coords.shape())));
  int C = map.dim(0), H = map.dim(1), W = map.dim(2);
  int S = coords.dim(0);
  Tensor y = Tensor::zeros({S, C});
  const float* md = map.data();
  const float* cd = coords.data();
  float* yd = y.data();
  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  parallel_for(S, [&](int64_t sb, int64_t se) {
    for (int64_t s = sb; s < se; ++s) {
      float fx = cd[s * 2 + 0] * W - 0.5f;
      float fy = cd[s * 2 + 1] * H - 0.5f;
      int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
      float tx = fx - x0, ty = fy - y0;
      int x0c = clampi(x0, W - 1), x1c = clampi(x0 + 1, W - 1);
      int y0c = clampi(y0, H - 1), y1c = clampi(y0 + 1, H - 1);
      for (int c = 0; c < C; ++c) {
        const float* plane = md + int64_t(c) * H * W;
        float v00 = plane[int64_t(y0c) * W + x0c], v10 = plane[int64_t(y0c) * W + x1c];
        float v01 = plane[int64_t(y1c) * W + x0c], v11 = plane[int64_t(y1c) * W + x1c];
        yd[s * C + c] = (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty;
      }
    }
  });
  Tensor mc = map, cc = coords, yc = y;
  track(y, {map, coords}, [mc, cc, yc, C, H, W, S, clampi]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    const float* md = mc.data();
    const float* cd = cc.data();
    float* mg = mc.requires_grad() ? mc.grad().data() : nullptr;
    float* cg = cc.requires_grad() ? cc.grad().data() : nullptr;
    for (int64_t s = 0; s < S; ++s) {
      float fx = cd[s * 2 + 0] * W - 0.5f;
      float fy = cd[s * 2 + 1] * H - 0.5f;
      int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
      float tx = fx - x0, ty = fy - y0;
      int x0c = clampi(x0, W - 1), x1c = clampi(x0 + 1, W - 1);
      int y0c = clampi(y0, H - 1), y1c = clampi(y0 + 1, H - 1);
      double du = 0, dv = 0;
      for (int c = 0; c < C; ++c) {
        float gv = g[s * C + c];
        if (gv == 0.0f && !cg) continue;
        const float* plane = md + int64_t(c) * H * W;
        if (mg) {
          float* gplane = mg + int64_t(c) * H * W;
          gplane[int64_t(y0c) * W + x0c] += gv * (1 - tx) * (1 - ty);
          gplane[int64_t(y0c) * W + x1c] += gv * tx * (1 - ty);
          gplane[int64_t(y1c) * W + x0c] += gv * (1 - tx) * ty;
          gplane[int64_t(y1c) * W + x1c] += gv * tx * ty;
        }
        if (cg) {
          float v00 = plane[int64_t(y0c) * W + x0c], v10 = plane[int64_t(y0c) * W + x1c];
          float v01 = plane[int64_t(y1c) * W + x0c], v11 = plane[int64_t(y1c) * W + x1c];
          du += double(gv) * ((v10 - v00) * (1 - ty) + (v11 - v01) * ty);
          dv += double(gv) * ((v01 - v00) * (1 - tx) + (v11 - v10) * tx);
        }
      }
      if (cg) {
        cg[s * 2 + 0] += float(du * W);
        cg[s * 2 + 1] += float(dv * H);
      }
    }
  });
  return y;
}

// Trilinear sample of grid [C,D,H,W] at coords [S,3] (x,y,z in [0,1]^3 mapping
// to W,H,D axes; clamp to border) -> [S,C]. Gradients flow to the grid only.
inline Tensor grid_sample_3d(const Tensor& grid, const Tensor& coords) {
  if (grid.rank() != 4 || coords.rank() != 2 || coords.dim(1) != 3)
    throw ShapeError(cat("grid_sample_3d: grid ", shape_str(grid.shape()), " coords ",
                         shape_str(coords.shape())));
  if (coords.requires_grad())
    throw Error("grid_sample_3d: coordinate gradients are not supported");
  int C = grid.dim(0), D = grid.dim(1), H = grid.dim(2), W = grid.dim(3);
  int S = coords.dim(0);
  Tensor y = Tensor::zeros({S, C});
  const float* gd = grid.data();
  const float* cd = coords.data();
  float* yd = y.data();
  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  parallel_for(S, [&](int64_t sb, int64_t se) {
    for (int64_t s = sb; s < se; ++s) {
      float fx = cd[s * 3 + 0] * W - 0.5f;
      float fy = cd[s * 3 + 1] * H - 0.5f;
      float fz = cd[s * 3 + 2] * D - 0.5f;
      int x0 = int(std::floor(fx)), y0 = int(std::floor(fy)), z0 = int(std::floor(fz));
      float tx = fx - x0, ty = fy - y0, tz = fz - z0;
      int xs[2] = {clampi(x0, W - 1), clampi(x0 + 1, W - 1)};
      int ys[2] = {clampi(y0, H - 1), clampi(y0 + 1, H - 1)};
      int zs[2] = {clampi(z0, D - 1), clampi(z0 + 1, D - 1)};
      float wx[2] = {1 - tx, tx}, wy[2] = {1 - ty, ty}, wz[2] = {1 - tz, tz};
      for (int c = 0; c < C; ++c) {
        const float* plane = gd + int64_t(c) * D * H * W;
        float acc = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              acc += wz[dz] * wy[dy] * wx[dx] *
                     plane[(int64_t(zs[dz]) * H + ys[dy]) * W + xs[dx]];
        yd[s * C + c] = acc;
      }
    }
  });
  Tensor gc = grid, cc = coords, yc = y;
  track(y, {grid}, [gc, cc, yc, C, D, H, W, S, clampi]() mutable {
    if (!yc.has_grad() || !gc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    const float* cd = cc.data();
    float* gg = gc.grad().data();
    for (int64_t s = 0; s < S; ++s) {
      float fx = cd[s * 3 + 0] * W - 0.5f;
      float fy = cd[s * 3 + 1] * H - 0.5f;
      float fz = cd[s * 3 + 2] * D - 0.5f;
      int x0 = int(std::floor(fx)), y0 = int(std::floor(fy)), z0 = int(std::floor(fz));
      float tx = fx - x0, ty = fy - y0, tz = fz - z0;
      int xs[2] = {clampi(x0, W - 1), clampi(x0 + 1, W - 1)};
      int ys[2] = {clampi(y0, H - 1), clampi(y0 + 1, H - 1)};
      int zs[2] = {clampi(z0, D - 1), clampi(z0 + 1, D - 1)};
      float wx[2] = {1 - tx, tx}, wy[2] = {1 - ty, ty}, wz[2] = {1 - tz, tz};
      for (int c = 0; c < C; ++c) {
        float gv = g[s * C + c];
        if (gv == 0.0f) continue;
        float* plane = gg + int64_t(c) * D * H * W;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              plane[(int64_t(zs[dz]) * H + ys[dy]) * W + xs[dx]] +=
                  gv * wz[dz] * wy[dy] * wx[dx];
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------- scatter / volume ops

// Places values [S(,C)] at row positions given by indices into a [R(,C)]
// output prefilled with `fill`. Indices must be unique.
inline Tensor scatter_rows(const Tensor& values, const std::vector<int>& indices, int rows,
                           float fill) {
  int S = values.dim(0);
  if (int(indices.size()) != S)
    throw ShapeError(cat("scatter_rows: ", indices.size(), " indices for ", S, " values"));
  int C = values.rank() == 2 ? values.dim(1) : 1;
  Tensor y = values.rank() == 2 ? Tensor::full({rows, C}, fill) : Tensor::full({rows}, fill);
  const float* vd = values.data();
  float* yd = y.data();
  for (int s = 0; s < S; ++s)
    for (int c = 0; c < C; ++c) yd[int64_t(indices[s]) * C + c] = vd[int64_t(s) * C + c];
  Tensor vc = values, yc = y;
  auto idx = std::make_shared<std::vector<int>>(indices);
  track(y, {values}, [vc, yc, idx, C]() mutable {
    if (!yc.has_grad() || !vc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* vg = vc.grad().data();
    for (size_t s = 0; s < idx->size(); ++s)
      for (int c = 0; c < C; ++c)
        vg[int64_t(s) * C + c] += g[int64_t((*idx)[s]) * C + c];
  });
  return y;
}

// Emission-absorption weights per ray row: given activated densities
// sigma [R,N] and interval lengths dbar (constant), returns
// w_n = T_n (1 - exp(-sigma_n dbar_n)) with T_n = exp(-sum_{j<n} sigma_j dbar_j).
inline Tensor volume_weights(const Tensor& sigma, const Tensor& dbar) {
  detail::check_same_shape("volume_weights", sigma, dbar);
  if (sigma.rank() != 2)
    throw ShapeError(cat("volume_weights: need [R,N], got ", shape_str(sigma.shape())));
  int R = sigma.dim(0), N = sigma.dim(1);
  Tensor w = Tensor::zeros({R, N});
  const float* sd = sigma.data();
  const float* dd = dbar.data();
  float* wd = w.data();
  parallel_for(R, [&](int64_t rb, int64_t re) {
    for (int64_t r = rb; r < re; ++r) {
      double tau = 0;
      for (int n = 0; n < N; ++n) {
        double sdb = double(sd[r * N + n]) * dd[r * N + n];
        double T = std::exp(-tau);
        wd[r * N + n] = float(T * (1.0 - std::exp(-sdb)));
        tau += sdb;
      }
    }
  });
  Tensor sc = sigma, dc = dbar, wc = w;
  track(w, {sigma}, [sc, dc, wc, R, N]() mutable {
    if (!wc.has_grad() || !sc.requires_grad()) return;
    const float* g = wc.grad_view().data();
    const float* sd = sc.data();
    const float* dd = dc.data();
    const float* wd = wc.data();
    float* sg = sc.grad().data();
    parallel_for(R, [&](int64_t rb, int64_t re) {
      for (int64_t r = rb; r < re; ++r) {
        // dL/dsigma_j = dbar_j * (T_j exp(-sigma_j dbar_j) g_j - sum_{n>j} w_n g_n)
        // computed with a reverse suffix accumulation of w_n g_n.
        double suffix = 0;
        std::vector<double> wg(N);
        for (int n = 0; n < N; ++n) wg[n] = double(wd[r * N + n]) * g[r * N + n];
        double tau = 0;
        std::vector<double> Ts(N);
        for (int n = 0; n < N; ++n) {
          Ts[n] = std::exp(-tau);
          tau += double(sd[r * N + n]) * dd[r * N + n];
        }
        for (int j = N - 1; j >= 0; --j) {
          double sdb = double(sd[r * N + j]) * dd[r * N + j];
          double own = Ts[j] * std::exp(-sdb) * g[r * N + j];
          sg[r * N + j] += float(dd[r * N + j] * (own - suffix));
          suffix += wg[j];
        }
      }
    });
  });
  return w;
}

// Row-wise concatenation [S,A] ++ [S,B] -> [S,A+B].
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError(cat("concat_rows: ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  int S = a.dim(0), A = a.dim(1), B = b.dim(1);
  Tensor y = Tensor::zeros({S, A + B});
  float* yd = y.data();
  const float* ad = a.data();
  const float* bd = b.data();
  for (int s = 0; s < S; ++s) {
    std::copy_n(ad + int64_t(s) * A, A, yd + int64_t(s) * (A + B));
    std::copy_n(bd + int64_t(s) * B, B, yd + int64_t(s) * (A + B) + A);
  }
  Tensor ac = a, bc = b, yc = y;
  track(y, {a, b}, [ac, bc, yc, S, A, B]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    if (ac.requires_grad()) {
      float* ag = ac.grad().data();
      for (int s = 0; s < S; ++s)
        for (int i = 0; i < A; ++i) ag[int64_t(s) * A + i] += g[int64_t(s) * (A + B) + i];
    }
    if (bc.requires_grad()) {
      float* bg = bc.grad().data();
      for (int s = 0; s < S; ++s)
        for (int i = 0; i < B; ++i) bg[int64_t(s) * B + i] += g[int64_t(s) * (A + B) + A + i];
    }
  });
  return y;
}

// Selects rows of x by index: y[i] = x[indices[i]]. Duplicate indices
// accumulate on backward.
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
  if (x.rank() != 2) throw ShapeError(cat("gather_rows: need [S,C], got ", shape_str(x.shape())));
  int C = x.dim(1), R = int(indices.size());
  Tensor y = Tensor::zeros({R, C});
  const float* xd = x.data();
  float* yd = y.data();
  for (int r = 0; r < R; ++r)
    std::copy_n(xd + int64_t(indices[size_t(r)]) * C, C, yd + int64_t(r) * C);
  Tensor xc = x, yc = y;
  auto idx = std::make_shared<std::vector<int>>(indices);
  track(y, {x}, [xc, yc, idx, C]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* xg = xc.grad().data();
    for (size_t r = 0; r < idx->size(); ++r)
      for (int c = 0; c < C; ++c)
        xg[int64_t((*idx)[r]) * C + c] += g[int64_t(r) * C + c];
  });
  return y;
}

// [H*W, C] row-major spatial order -> planar [C,H,W].
inline Tensor rows_to_planar(const Tensor& x, int H, int W) {
  if (x.rank() != 2 || x.dim(0) != H * W)
    throw ShapeError(cat("rows_to_planar: ", shape_str(x.shape()), " for ", H, "x", W));
  int C = x.dim(1);
  Tensor y = Tensor::zeros({C, H, W});
  const float* xd = x.data();
  float* yd = y.data();
  for (int64_t i = 0; i < int64_t(H) * W; ++i)
    for (int c = 0; c < C; ++c) yd[int64_t(c) * H * W + i] = xd[i * C + c];
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc, H, W, C]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* xg = xc.grad().data();
    for (int64_t i = 0; i < int64_t(H) * W; ++i)
      for (int c = 0; c < C; ++c) xg[i * C + c] += g[int64_t(c) * H * W + i];
  });
  return y;
}

// Forward differences along x: y[c,i,j] = x[c,i,j+1] - x[c,i,j] -> [C,H,W-1].
inline Tensor spatial_grad_x(const Tensor& x) {
  if (x.rank() != 3 || x.dim(2) < 2)
    throw ShapeError(cat("spatial_grad_x: need [C,H,W>=2], got ", shape_str(x.shape())));
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor y = Tensor::zeros({C, H, W - 1});
  const float* xd = x.data();
  float* yd = y.data();
  parallel_for(int64_t(C) * H, [&](int64_t rb, int64_t re) {
    for (int64_t r = rb; r < re; ++r)
      for (int j = 0; j < W - 1; ++j)
        yd[r * (W - 1) + j] = xd[r * W + j + 1] - xd[r * W + j];
  });
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc, C, H, W]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* xg = xc.grad().data();
    for (int64_t r = 0; r < int64_t(C) * H; ++r)
      for (int j = 0; j < W - 1; ++j) {
        xg[r * W + j + 1] += g[r * (W - 1) + j];
        xg[r * W + j] -= g[r * (W - 1) + j];
      }
  });
  return y;
}

// Forward differences along y: [C,H,W] -> [C,H-1,W].
inline Tensor spatial_grad_y(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) < 2)
    throw ShapeError(cat("spatial_grad_y: need [C,H>=2,W], got ", shape_str(x.shape())));
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor y = Tensor::zeros({C, H - 1, W});
  const float* xd = x.data();
  float* yd = y.data();
  parallel_for(C, [&](int64_t cb, int64_t ce) {
    for (int64_t c = cb; c < ce; ++c)
      for (int i = 0; i < H - 1; ++i)
        for (int j = 0; j < W; ++j)
          yd[(c * (H - 1) + i) * W + j] = xd[(c * H + i + 1) * W + j] - xd[(c * H + i) * W + j];
  });
  Tensor xc = x, yc = y;
  track(y, {x}, [xc, yc, C, H, W]() mutable {
    if (!yc.has_grad() || !xc.requires_grad()) return;
    const float* g = yc.grad_view().data();
    float* xg = xc.grad().data();
    for (int64_t c = 0; c < C; ++c)
      for (int i = 0; i < H - 1; ++i)
        for (int j = 0; j < W; ++j) {
          xg[(c * H + i + 1) * W + j] += g[(c * (H - 1) + i) * W + j];
          xg[(c * H + i) * W + j] -= g[(c * (H - 1) + i) * W + j];
        }
  });
  return y;
}

// y[r,k] = sum_n w[r,n] * v[r,n,k]  (w: [R,N], v: [R,N,K]) -> [R,K]
inline Tensor weighted_reduce(const Tensor& w, const Tensor& v) {
  if (w.rank() != 2 || v.rank() != 3 || v.dim(0) != w.dim(0) || v.dim(1) != w.dim(1))
    throw ShapeError(cat("weighted_reduce: w ", shape_str(w.shape()), " v ",
                         shape_str(v.shape())));
  int R = w.dim(0), N = w.dim(1), K = v.dim(2);
  Tensor y = Tensor::zeros({R, K});
  const float* wd = w.data();
  const float* vd = v.data();
  float* yd = y.data();
  parallel_for(R, [&](int64_t rb, int64_t re) {
    for (int64_t r = rb; r < re; ++r)
      for (int k = 0; k < K; ++k) {
        double acc = 0;
        for (int n = 0; n < N; ++n)
          acc += double(wd[r * N + n]) * vd[(r * N + n) * K + k];
        yd[r * K + k] = float(acc);
      }
  });
  Tensor wc = w, vc = v, yc = y;
  track(y, {w, v}, [wc, vc, yc, R, N, K]() mutable {
    if (!yc.has_grad()) return;
    const float* g = yc.grad_view().data();
    const float* wd = wc.data();
    const float* vd = vc.data();
    if (wc.requires_grad()) {
      float* wg = wc.grad().data();
      for (int64_t r = 0; r < R; ++r)
        for (int n = 0; n < N; ++n) {
          double acc = 0;
          for (int k = 0; k < K; ++k)
            acc += double(g[r * K + k]) * vd[(r * N + n) * K + k];
          wg[r * N + n] += float(acc);
        }
    }
    if (vc.requires_grad()) {
      float* vg = vc.grad().data();
      for (int64_t r = 0; r < R; ++r)
        for (int n = 0; n < N; ++n)
          for (int k = 0; k < K; ++k)
            vg[(r * N + n) * K + k] += g[r * K + k] * wd[r * N + n];
    }
  });
  return y;
}

}  // namespace relight
