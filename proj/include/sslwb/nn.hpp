#pragma once

#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "sslwb/rng.hpp"
#include "sslwb/tensor.hpp"

namespace sslwb {

// Minimal training substrate: named parameters plus layers with explicit
// forward/backward passes. Activations live in per-call trace structs so a
// step can run several forward passes (student views, supervised view) before
// backpropagating. All gradients accumulate with += into Param::grad.

enum class InitKind { zeros, ones, normal, he };

template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  InitKind init = InitKind::zeros;
  double init_scale = 0.0;  // stddev for normal, fan_in for he
};

template <class T>
class ParamSet {
 public:
  Param<T>* create(const std::string& name, std::vector<std::size_t> shape,
                   InitKind init, double scale = 0.0) {
    require(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    store_.emplace_back();
    Param<T>& p = store_.back();
    p.name = name;
    p.value = Tensor<T>(shape);
    p.grad = Tensor<T>(shape);
    p.init = init;
    p.init_scale = scale;
    index_[name] = &p;
    return &p;
  }

  Param<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }
  const Param<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }

  std::size_t size() const { return store_.size(); }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& p : store_) n += p.value.numel();
    return n;
  }

  template <class Fn>
  void for_each(Fn&& fn) {
    for (auto& p : store_) fn(p);
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    for (const auto& p : store_) fn(p);
  }

  void zero_grads() {
    for (auto& p : store_) p.grad.set_zero();
  }

  /// Initialization depends only on (seed, parameter name), so a parameter is
  /// initialized identically no matter which other modules share the model.
  void initialize(std::uint64_t seed) {
    for (auto& p : store_) {
      RngStream rng = RngStream::derived(seed, "init", p.name);
      switch (p.init) {
        case InitKind::zeros: p.value.set_zero(); break;
        case InitKind::ones: p.value.fill(T(1)); break;
        case InitKind::normal:
          for (auto& v : p.value.data)
            v = static_cast<T>(rng.normal() * p.init_scale);
          break;
        case InitKind::he: {
          double stddev = std::sqrt(2.0 / p.init_scale);
          for (auto& v : p.value.data) v = static_cast<T>(rng.normal() * stddev);
          break;
        }
      }
    }
  }

 private:
  std::deque<Param<T>> store_;  // stable addresses
  std::unordered_map<std::string, Param<T>*> index_;
};

// ---------------------------------------------------------------------------
// Layers. Convention: flat token/feature matrices [rows, cols].

template <class T>
struct Dense {
  Param<T>* w = nullptr;  // [in, out]
  Param<T>* b = nullptr;  // [out], optional
  std::size_t in = 0, out = 0;

  void init(ParamSet<T>& ps, const std::string& prefix, std::size_t in_dim,
            std::size_t out_dim, bool bias = true, InitKind kind = InitKind::he,
            double scale = -1.0) {
    in = in_dim;
    out = out_dim;
    w = ps.create(prefix + ".w", {in, out}, kind,
                  scale < 0 ? static_cast<double>(in) : scale);
    if (bias) b = ps.create(prefix + ".b", {out}, InitKind::zeros);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::size_t r = x.numel() / in;
    Tensor<T> y({r, out});
    y.mat(r, out).noalias() = x.mat(r, in) * w->value.mat(in, out);
    if (b) {
      auto ym = y.mat(r, out);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < out; ++j) ym(i, j) += b->value[j];
    }
    return y;
  }

  /// Accumulates parameter grads; returns dx unless want_dx is false.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool want_dx = true) const {
    const std::size_t r = x.numel() / in;
    w->grad.mat(in, out).noalias() += x.mat(r, in).transpose() * dy.mat(r, out);
    if (b) {
      auto dym = dy.mat(r, out);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < out; ++j) b->grad[j] += dym(i, j);
    }
    Tensor<T> dx;
    if (want_dx) {
      dx = Tensor<T>({r, in});
      dx.mat(r, in).noalias() = dy.mat(r, out) * w->value.mat(in, out).transpose();
    }
    return dx;
  }
};

template <class T>
struct LayerNorm {
  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  std::size_t dim = 0;
  T eps = T(1e-5);

  void init(ParamSet<T>& ps, const std::string& prefix, std::size_t d) {
    dim = d;
    gamma = ps.create(prefix + ".gamma", {d}, InitKind::ones);
    beta = ps.create(prefix + ".beta", {d}, InitKind::zeros);
  }

  struct Cache {
    Tensor<T> xhat;
    std::vector<T> rstd;
  };

  Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
    const std::size_t r = x.numel() / dim;
    Tensor<T> y({r, dim});
    c.xhat = Tensor<T>({r, dim});
    c.rstd.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
      const T* xi = &x.data[i * dim];
      T mean = T(0);
      for (std::size_t j = 0; j < dim; ++j) mean += xi[j];
      mean /= static_cast<T>(dim);
      T var = T(0);
      for (std::size_t j = 0; j < dim; ++j) {
        T d0 = xi[j] - mean;
        var += d0 * d0;
      }
      var /= static_cast<T>(dim);
      T rstd = T(1) / std::sqrt(var + eps);
      c.rstd[i] = rstd;
      for (std::size_t j = 0; j < dim; ++j) {
        T xh = (xi[j] - mean) * rstd;
        c.xhat.at(i, j) = xh;
        y.at(i, j) = gamma->value[j] * xh + beta->value[j];
      }
    }
    return y;
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy) const {
    const std::size_t r = dy.numel() / dim;
    Tensor<T> dx({r, dim});
    for (std::size_t i = 0; i < r; ++i) {
      T sum_dxh = T(0), sum_dxh_xh = T(0);
      for (std::size_t j = 0; j < dim; ++j) {
        T dxh = dy.at(i, j) * gamma->value[j];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * c.xhat.at(i, j);
        gamma->grad[j] += dy.at(i, j) * c.xhat.at(i, j);
        beta->grad[j] += dy.at(i, j);
      }
      const T invd = T(1) / static_cast<T>(dim);
      for (std::size_t j = 0; j < dim; ++j) {
        T dxh = dy.at(i, j) * gamma->value[j];
        dx.at(i, j) =
            c.rstd[i] * (dxh - sum_dxh * invd - c.xhat.at(i, j) * sum_dxh_xh * invd);
      }
    }
    return dx;
  }
};

template <class T>
struct Gelu {
  // tanh approximation
  static Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    const T c0 = static_cast<T>(std::sqrt(2.0 / M_PI));
    for (std::size_t i = 0; i < x.numel(); ++i) {
      T v = x[i];
      y[i] = T(0.5) * v * (T(1) + std::tanh(c0 * (v + T(0.044715) * v * v * v)));
    }
    return y;
  }
  static Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx(x.shape);
    const T c0 = static_cast<T>(std::sqrt(2.0 / M_PI));
    for (std::size_t i = 0; i < x.numel(); ++i) {
      T v = x[i];
      T u = c0 * (v + T(0.044715) * v * v * v);
      T th = std::tanh(u);
      T sech2 = T(1) - th * th;
      T du = c0 * (T(1) + T(3) * T(0.044715) * v * v);
      dx[i] = dy[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * du);
    }
    return dx;
  }
};

template <class T>
struct Relu {
  static Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
  }
  static Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention over flat tokens [batch * n_tokens, dim].

template <class T>
using StridedMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
               Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
               0, Eigen::OuterStride<>>;

template <class T>
struct MultiHeadAttention {
  Dense<T> wq, wk, wv, wo;
  std::size_t dim = 0, heads = 0, head_dim = 0;

  void init(ParamSet<T>& ps, const std::string& prefix, std::size_t d, std::size_t h) {
    require(d % h == 0, "attention dim must be divisible by head count");
    dim = d;
    heads = h;
    head_dim = d / h;
    wq.init(ps, prefix + ".wq", d, d, true, InitKind::normal, 0.02);
    wk.init(ps, prefix + ".wk", d, d, true, InitKind::normal, 0.02);
    wv.init(ps, prefix + ".wv", d, d, true, InitKind::normal, 0.02);
    wo.init(ps, prefix + ".wo", d, d, true, InitKind::normal, 0.02);
  }

  struct Cache {
    Tensor<T> x, q, k, v, probs, ctx;  // probs: [batch*heads, n, n]
    std::size_t batch = 0, n = 0;
  };

  Tensor<T> forward(const Tensor<T>& x, std::size_t batch, std::size_t n,
                    Cache& c) const {
    c.x = x;
    c.batch = batch;
    c.n = n;
    c.q = wq.forward(x);
    c.k = wk.forward(x);
    c.v = wv.forward(x);
    c.probs = Tensor<T>({batch * heads, n, n});
    c.ctx = Tensor<T>({batch * n, dim});
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const long sn = static_cast<long>(n), shd = static_cast<long>(head_dim);
#pragma omp parallel for schedule(static)
    for (long bh = 0; bh < static_cast<long>(batch * heads); ++bh) {
      const std::size_t b = static_cast<std::size_t>(bh) / heads;
      const std::size_t h = static_cast<std::size_t>(bh) % heads;
      const std::size_t row0 = b * n, col0 = h * head_dim;
      ConstStridedMap<T> qm(&c.q.data[row0 * dim + col0], sn, shd,
                            Eigen::OuterStride<>(static_cast<long>(dim)));
      ConstStridedMap<T> km(&c.k.data[row0 * dim + col0], sn, shd,
                            Eigen::OuterStride<>(static_cast<long>(dim)));
      ConstStridedMap<T> vm(&c.v.data[row0 * dim + col0], sn, shd,
                            Eigen::OuterStride<>(static_cast<long>(dim)));
      MatMap<T> pm(&c.probs.data[static_cast<std::size_t>(bh) * n * n], sn, sn);
      pm.noalias() = qm * km.transpose() * scale;
      for (long i = 0; i < sn; ++i) {
        T mx = pm(i, 0);
        for (long j = 1; j < sn; ++j) mx = std::max(mx, pm(i, j));
        T denom = T(0);
        for (long j = 0; j < sn; ++j) {
          T e = std::exp(pm(i, j) - mx);
          pm(i, j) = e;
          denom += e;
        }
        for (long j = 0; j < sn; ++j) pm(i, j) /= denom;
      }
      StridedMap<T> cm(&c.ctx.data[row0 * dim + col0], sn, shd,
                       Eigen::OuterStride<>(static_cast<long>(dim)));
      cm.noalias() = pm * vm;
    }
    return wo.forward(c.ctx);
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy) const {
    const std::size_t batch = c.batch, n = c.n;
    Tensor<T> dctx = wo.backward(c.ctx, dy);
    Tensor<T> dq({batch * n, dim}), dk({batch * n, dim}), dv({batch * n, dim});
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const long sn = static_cast<long>(n), shd = static_cast<long>(head_dim);
#pragma omp parallel for schedule(static)
    for (long bh = 0; bh < static_cast<long>(batch * heads); ++bh) {
      const std::size_t b = static_cast<std::size_t>(bh) / heads;
      const std::size_t h = static_cast<std::size_t>(bh) % heads;
      const std::size_t row0 = b * n, col0 = h * head_dim;
      const Eigen::OuterStride<> stride(static_cast<long>(dim));
      ConstStridedMap<T> qm(&c.q.data[row0 * dim + col0], sn, shd, stride);
      ConstStridedMap<T> km(&c.k.data[row0 * dim + col0], sn, shd, stride);
      ConstStridedMap<T> vm(&c.v.data[row0 * dim + col0], sn, shd, stride);
      ConstMatMap<T> pm(&c.probs.data[static_cast<std::size_t>(bh) * n * n], sn, sn);
      ConstStridedMap<T> dcm(&dctx.data[row0 * dim + col0], sn, shd, stride);
      StridedMap<T> dqm(&dq.data[row0 * dim + col0], sn, shd, stride);
      StridedMap<T> dkm(&dk.data[row0 * dim + col0], sn, shd, stride);
      StridedMap<T> dvm(&dv.data[row0 * dim + col0], sn, shd, stride);

      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dprobs =
          dcm * vm.transpose();
      dvm.noalias() = pm.transpose() * dcm;
      // softmax backward per row
      for (long i = 0; i < sn; ++i) {
        T dot = T(0);
        for (long j = 0; j < sn; ++j) dot += dprobs(i, j) * pm(i, j);
        for (long j = 0; j < sn; ++j)
          dprobs(i, j) = pm(i, j) * (dprobs(i, j) - dot);
      }
      dqm.noalias() = dprobs * km * scale;
      dkm.noalias() = dprobs.transpose() * qm * scale;
    }
    Tensor<T> dx = wq.backward(c.x, dq);
    Tensor<T> dxk = wk.backward(c.x, dk);
    Tensor<T> dxv = wv.backward(c.x, dv);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dxk[i] + dxv[i];
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Pre-norm transformer block.

template <class T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Dense<T> fc1, fc2;
  std::size_t dim = 0;

  void init(ParamSet<T>& ps, const std::string& prefix, std::size_t d, std::size_t heads,
            std::size_t mlp_ratio) {
    dim = d;
    ln1.init(ps, prefix + ".ln1", d);
    attn.init(ps, prefix + ".attn", d, heads);
    ln2.init(ps, prefix + ".ln2", d);
    fc1.init(ps, prefix + ".fc1", d, d * mlp_ratio, true, InitKind::normal, 0.02);
    fc2.init(ps, prefix + ".fc2", d * mlp_ratio, d, true, InitKind::normal, 0.02);
  }

  struct Cache {
    typename LayerNorm<T>::Cache ln1c, ln2c;
    typename MultiHeadAttention<T>::Cache attnc;
    Tensor<T> x_mid, x2, h_pre;
  };

  // y = xm + fc2(gelu(fc1(ln2(xm)))) with xm = x + attn(ln1(x))
  Tensor<T> forward(const Tensor<T>& x, std::size_t batch, std::size_t n,
                    Cache& c) const {
    Tensor<T> x1 = ln1.forward(x, c.ln1c);
    Tensor<T> a = attn.forward(x1, batch, n, c.attnc);
    c.x_mid = x;
    for (std::size_t i = 0; i < a.numel(); ++i) c.x_mid[i] += a[i];
    c.x2 = ln2.forward(c.x_mid, c.ln2c);
    c.h_pre = fc1.forward(c.x2);
    Tensor<T> h = Gelu<T>::forward(c.h_pre);
    Tensor<T> y = fc2.forward(h);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += c.x_mid[i];
    return y;
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy) const {
    Tensor<T> h = Gelu<T>::forward(c.h_pre);  // cheap to recompute
    Tensor<T> dh = fc2.backward(h, dy);
    Tensor<T> dhpre = Gelu<T>::backward(c.h_pre, dh);
    Tensor<T> dx2 = fc1.backward(c.x2, dhpre);
    Tensor<T> dxm = ln2.backward(c.ln2c, dx2);
    for (std::size_t i = 0; i < dxm.numel(); ++i) dxm[i] += dy[i];
    Tensor<T> dx1 = attn.backward(c.attnc, dxm);
    Tensor<T> dx = ln1.backward(c.ln1c, dx1);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dxm[i];
    return dx;
  }
};

// ---------------------------------------------------------------------------
// 3x3 (or 1x1) convolution over channels-last activations [B,H,W,C].

template <class T>
struct Conv2d {
  Param<T>* w = nullptr;  // [k*k*cin, cout]
  Param<T>* b = nullptr;  // [cout]
  std::size_t cin = 0, cout = 0, ksize = 3, stride = 1, pad = 1;

  void init(ParamSet<T>& ps, const std::string& prefix, std::size_t in_ch,
            std::size_t out_ch, std::size_t k, std::size_t s) {
    cin = in_ch;
    cout = out_ch;
    ksize = k;
    stride = s;
    pad = k / 2;
    w = ps.create(prefix + ".w", {k * k * cin, cout}, InitKind::he,
                  static_cast<double>(k * k * cin));
    b = ps.create(prefix + ".b", {out_ch}, InitKind::zeros);
  }

  std::size_t out_extent(std::size_t in_extent) const {
    return (in_extent + 2 * pad - ksize) / stride + 1;
  }

  void im2col(const Tensor<T>& x, Tensor<T>& cols) const {
    const std::size_t bsz = x.dim(0), h = x.dim(1), wch = x.dim(2);
    const std::size_t oh = out_extent(h), ow = out_extent(wch);
    const std::size_t patch = ksize * ksize * cin;
#pragma omp parallel for schedule(static)
    for (long b0 = 0; b0 < static_cast<long>(bsz); ++b0) {
      const std::size_t bb = static_cast<std::size_t>(b0);
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T* dst = &cols.data[((bb * oh + oy) * ow + ox) * patch];
          for (std::size_t ky = 0; ky < ksize; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            for (std::size_t kx = 0; kx < ksize; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              T* d = dst + (ky * ksize + kx) * cin;
              if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 ||
                  ix >= static_cast<long>(wch)) {
                for (std::size_t ci = 0; ci < cin; ++ci) d[ci] = T(0);
              } else {
                const T* s =
                    &x.data[((bb * h + static_cast<std::size_t>(iy)) * wch +
                             static_cast<std::size_t>(ix)) * cin];
                for (std::size_t ci = 0; ci < cin; ++ci) d[ci] = s[ci];
              }
            }
          }
        }
      }
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::size_t bsz = x.dim(0), oh = out_extent(x.dim(1)),
                      ow = out_extent(x.dim(2));
    const std::size_t patch = ksize * ksize * cin;
    Tensor<T> cols({bsz * oh * ow, patch});
    im2col(x, cols);
    Tensor<T> y({bsz, oh, ow, cout});
    y.mat(bsz * oh * ow, cout).noalias() =
        cols.mat(bsz * oh * ow, patch) * w->value.mat(patch, cout);
    auto ym = y.mat(bsz * oh * ow, cout);
    for (std::size_t i = 0; i < bsz * oh * ow; ++i)
      for (std::size_t j = 0; j < cout; ++j) ym(i, j) += b->value[j];
    return y;
  }

  /// `x` is the cached layer input; cols are rebuilt rather than cached.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool want_dx = true) const {
    const std::size_t bsz = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t oh = out_extent(h), ow = out_extent(wd);
    const std::size_t rows = bsz * oh * ow, patch = ksize * ksize * cin;
    Tensor<T> cols({rows, patch});
    im2col(x, cols);
    w->grad.mat(patch, cout).noalias() +=
        cols.mat(rows, patch).transpose() * dy.mat(rows, cout);
    auto dym = dy.mat(rows, cout);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cout; ++j) b->grad[j] += dym(i, j);
    Tensor<T> dx;
    if (!want_dx) return dx;
    Tensor<T> dcols({rows, patch});
    dcols.mat(rows, patch).noalias() = dy.mat(rows, cout) * w->value.mat(patch, cout).transpose();
    dx = Tensor<T>({bsz, h, wd, cin});
#pragma omp parallel for schedule(static)
    for (long b0 = 0; b0 < static_cast<long>(bsz); ++b0) {
      const std::size_t bb = static_cast<std::size_t>(b0);
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T* src = &dcols.data[((bb * oh + oy) * ow + ox) * patch];
          for (std::size_t ky = 0; ky < ksize; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < ksize; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              const T* s = src + (ky * ksize + kx) * cin;
              T* d = &dx.data[((bb * h + static_cast<std::size_t>(iy)) * wd +
                               static_cast<std::size_t>(ix)) * cin];
              for (std::size_t ci = 0; ci < cin; ++ci) d[ci] += s[ci];
            }
          }
        }
      }
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Group normalization over channels-last activations (per sample, per group).

template <class T>
struct GroupNorm {
  Param<T>* gamma = nullptr;  // [C]
  Param<T>* beta = nullptr;   // [C]
  std::size_t channels = 0, groups = 0;
  T eps = T(1e-5);

  void init(ParamSet<T>& ps, const std::string& prefix, std::size_t c, std::size_t g) {
    require(c % g == 0, "channels must be divisible by group count");
    channels = c;
    groups = g;
    gamma = ps.create(prefix + ".gamma", {c}, InitKind::ones);
    beta = ps.create(prefix + ".beta", {c}, InitKind::zeros);
  }

  struct Cache {
    Tensor<T> xhat;
    std::vector<T> rstd;  // [B * groups]
  };

  Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
    const std::size_t bsz = x.dim(0), px = x.dim(1) * x.dim(2);
    const std::size_t cg = channels / groups;
    Tensor<T> y(x.shape);
    c.xhat = Tensor<T>(x.shape);
    c.rstd.assign(bsz * groups, T(0));
#pragma omp parallel for schedule(static)
    for (long b0 = 0; b0 < static_cast<long>(bsz); ++b0) {
      const std::size_t bb = static_cast<std::size_t>(b0);
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t c0 = g * cg;
        T mean = T(0);
        for (std::size_t p = 0; p < px; ++p)
          for (std::size_t ci = 0; ci < cg; ++ci)
            mean += x.data[(bb * px + p) * channels + c0 + ci];
        const T m = static_cast<T>(px * cg);
        mean /= m;
        T var = T(0);
        for (std::size_t p = 0; p < px; ++p)
          for (std::size_t ci = 0; ci < cg; ++ci) {
            T d0 = x.data[(bb * px + p) * channels + c0 + ci] - mean;
            var += d0 * d0;
          }
        var /= m;
        T rstd = T(1) / std::sqrt(var + eps);
        c.rstd[bb * groups + g] = rstd;
        for (std::size_t p = 0; p < px; ++p)
          for (std::size_t ci = 0; ci < cg; ++ci) {
            const std::size_t off = (bb * px + p) * channels + c0 + ci;
            T xh = (x.data[off] - mean) * rstd;
            c.xhat.data[off] = xh;
            y.data[off] = gamma->value[c0 + ci] * xh + beta->value[c0 + ci];
          }
      }
    }
    return y;
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy) const {
    const std::size_t bsz = dy.dim(0), px = dy.dim(1) * dy.dim(2);
    const std::size_t cg = channels / groups;
    Tensor<T> dx(dy.shape);
    Tensor<T> dgamma({channels}), dbeta({channels});
#pragma omp parallel for schedule(static)
    for (long b0 = 0; b0 < static_cast<long>(bsz); ++b0) {
      const std::size_t bb = static_cast<std::size_t>(b0);
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t c0 = g * cg;
        const T m = static_cast<T>(px * cg);
        T sum_dxh = T(0), sum_dxh_xh = T(0);
        for (std::size_t p = 0; p < px; ++p)
          for (std::size_t ci = 0; ci < cg; ++ci) {
            const std::size_t off = (bb * px + p) * channels + c0 + ci;
            T dxh = dy.data[off] * gamma->value[c0 + ci];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * c.xhat.data[off];
          }
        const T rstd = c.rstd[bb * groups + g];
        for (std::size_t p = 0; p < px; ++p)
          for (std::size_t ci = 0; ci < cg; ++ci) {
            const std::size_t off = (bb * px + p) * channels + c0 + ci;
            T dxh = dy.data[off] * gamma->value[c0 + ci];
            dx.data[off] =
                rstd * (dxh - sum_dxh / m - c.xhat.data[off] * sum_dxh_xh / m);
          }
      }
    }
    // affine grads in a deterministic sample order
    for (std::size_t bb = 0; bb < bsz; ++bb)
      for (std::size_t p = 0; p < px; ++p)
        for (std::size_t ci = 0; ci < channels; ++ci) {
          const std::size_t off = (bb * px + p) * channels + ci;
          dgamma[ci] += dy.data[off] * c.xhat.data[off];
          dbeta[ci] += dy.data[off];
        }
    for (std::size_t ci = 0; ci < channels; ++ci) {
      gamma->grad[ci] += dgamma[ci];
      beta->grad[ci] += dbeta[ci];
    }
    return dx;
  }
};

}  // namespace sslwb
