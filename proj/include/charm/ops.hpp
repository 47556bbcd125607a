#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "charm/tape.hpp"
#include "charm/tensor.hpp"

// Differentiable primitives. Each op computes its output eagerly and records
// a closure that accumulates parent gradients. Closures read tensors back off
// the tape by id rather than holding copies.

namespace charm {

namespace detail {

inline void require_same_tape(Value a, Value b, const char* where) {
  if (a.tape != b.tape)
    throw std::invalid_argument(std::string(where) + ": values on different tapes");
}

inline long prod(const Shape& s, int from, int to) {
  long p = 1;
  for (int i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace detail

inline Value constant(Tape& t, Tensor x) { return make_leaf(t, std::move(x), false); }

// ---------------------------------------------------------------- elementwise

inline Value add(Value a, Value b) {
  detail::require_same_tape(a, b, "add");
  require_same_shape(a.v(), b.v(), "add");
  Tape& t = *a.tape;
  Tensor out = a.v();
  const double* pb = b.v().data.data();
  for (long i = 0; i < out.numel(); ++i) out.data[i] += pb[i];
  bool rg = a.needs_grad() || b.needs_grad();
  int aid = a.id, bid = b.id;
  return Value{&t, t.record(std::move(out), rg, {aid, bid}, [aid, bid](Tape& t, int self) {
                 const Tensor& g = t.grad(self);
                 for (int pid : {aid, bid}) {
                   if (!t.needs_grad(pid)) continue;
                   Tensor& gp = t.grad(pid);
                   for (long i = 0; i < g.numel(); ++i) gp.data[i] += g.data[i];
                 }
               })};
}

inline Value mul(Value a, Value b) {
  detail::require_same_tape(a, b, "mul");
  require_same_shape(a.v(), b.v(), "mul");
  Tape& t = *a.tape;
  Tensor out = a.v();
  const double* pb = b.v().data.data();
  for (long i = 0; i < out.numel(); ++i) out.data[i] *= pb[i];
  bool rg = a.needs_grad() || b.needs_grad();
  int aid = a.id, bid = b.id;
  return Value{&t, t.record(std::move(out), rg, {aid, bid}, [aid, bid](Tape& t, int self) {
                 const Tensor& g = t.grad(self);
                 if (t.needs_grad(aid)) {
                   Tensor& ga = t.grad(aid);
                   const Tensor& vb = t.val(bid);
                   for (long i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * vb.data[i];
                 }
                 if (t.needs_grad(bid)) {
                   Tensor& gb = t.grad(bid);
                   const Tensor& va = t.val(aid);
                   for (long i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * va.data[i];
                 }
               })};
}

inline Value scale(Value a, double k) {
  Tape& t = *a.tape;
  Tensor out = a.v();
  for (double& v : out.data) v *= k;
  int aid = a.id;
  return Value{&t, t.record(std::move(out), a.needs_grad(), {aid}, [aid, k](Tape& t, int self) {
                 if (!t.needs_grad(aid)) return;
                 const Tensor& g = t.grad(self);
                 Tensor& ga = t.grad(aid);
                 for (long i = 0; i < g.numel(); ++i) ga.data[i] += k * g.data[i];
               })};
}

inline Value relu(Value a) {
  Tape& t = *a.tape;
  Tensor out = a.v();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  int aid = a.id;
  return Value{&t, t.record(std::move(out), a.needs_grad(), {aid}, [aid](Tape& t, int self) {
                 if (!t.needs_grad(aid)) return;
                 const Tensor& g = t.grad(self);
                 const Tensor& x = t.val(aid);
                 Tensor& ga = t.grad(aid);
                 for (long i = 0; i < g.numel(); ++i)
                   if (x.data[i] > 0.0) ga.data[i] += g.data[i];
               })};
}

inline Value mean_all(Value a) {
  Tape& t = *a.tape;
  long n = a.v().numel();
  double s = 0.0;
  for (double v : a.v().data) s += v;
  int aid = a.id;
  return Value{&t, t.record(Tensor::scalar(s / (double)n), a.needs_grad(), {aid},
                            [aid, n](Tape& t, int self) {
                              if (!t.needs_grad(aid)) return;
                              double g = t.grad(self).data[0] / (double)n;
                              Tensor& ga = t.grad(aid);
                              for (long i = 0; i < n; ++i) ga.data[i] += g;
                            })};
}

// x:[C,H,W] scaled per position by r:[1,H,W] (broadcast over channels)
inline Value scale_by_map(Value x, Value r) {
  detail::require_same_tape(x, r, "scale_by_map");
  const Shape& xs = x.shape();
  const Shape& rs = r.shape();
  if (xs.size() != 3 || rs.size() != 3 || rs[0] != 1 || rs[1] != xs[1] || rs[2] != xs[2])
    throw std::invalid_argument("scale_by_map: expected x [C,H,W] and r [1,H,W]");
  Tape& t = *x.tape;
  const long P = (long)xs[1] * xs[2];
  const int C = xs[0];
  Tensor out = x.v();
  const double* pr = r.v().data.data();
  for (int c = 0; c < C; ++c)
    for (long p = 0; p < P; ++p) out.data[c * P + p] *= pr[p];
  bool rg = x.needs_grad() || r.needs_grad();
  int xid = x.id, rid = r.id;
  return Value{&t, t.record(std::move(out), rg, {xid, rid}, [xid, rid, C, P](Tape& t, int self) {
                 const Tensor& g = t.grad(self);
                 if (t.needs_grad(xid)) {
                   Tensor& gx = t.grad(xid);
                   const double* pr = t.val(rid).data.data();
                   for (int c = 0; c < C; ++c)
                     for (long p = 0; p < P; ++p) gx.data[c * P + p] += g.data[c * P + p] * pr[p];
                 }
                 if (t.needs_grad(rid)) {
                   Tensor& gr = t.grad(rid);
                   const double* px = t.val(xid).data.data();
                   for (int c = 0; c < C; ++c)
                     for (long p = 0; p < P; ++p) gr.data[p] += g.data[c * P + p] * px[c * P + p];
                 }
               })};
}

// ------------------------------------------------------------------- linear

// a:[...,K] x w:[K,M] -> [...,M]; leading dims of a are treated as rows.
inline Value matmul(Value a, Value w) {
  detail::require_same_tape(a, w, "matmul");
  const Shape& as = a.shape();
  const Shape& ws = w.shape();
  if (as.empty() || ws.size() != 2 || as.back() != ws[0])
    throw std::invalid_argument("matmul: inner dimensions do not match");
  const int K = ws[0], M = ws[1];
  const long N = a.v().numel() / K;
  Shape os = as;
  os.back() = M;
  Tensor out(os);
  {
    const double* pa = a.v().data.data();
    const double* pw = w.v().data.data();
    for (long n = 0; n < N; ++n) {
      double* po = &out.data[n * M];
      const double* par = &pa[n * K];
      for (int k = 0; k < K; ++k) {
        const double av = par[k];
        const double* pwr = &pw[(long)k * M];
        for (int m = 0; m < M; ++m) po[m] += av * pwr[m];
      }
    }
  }
  bool rg = a.needs_grad() || w.needs_grad();
  int aid = a.id, wid = w.id;
  return Value{a.tape, a.tape->record(std::move(out), rg, {aid, wid},
                                      [aid, wid, N, K, M](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(aid)) {
      Tensor& ga = t.grad(aid);
      const double* pw = t.val(wid).data.data();
      for (long n = 0; n < N; ++n) {
        double* pgr = &ga.data[n * K];
        const double* pg = &g.data[n * M];
        for (int k = 0; k < K; ++k) {
          const double* pwr = &pw[(long)k * M];
          double acc = 0.0;
          for (int m = 0; m < M; ++m) acc += pg[m] * pwr[m];
          pgr[k] += acc;
        }
      }
    }
    if (t.needs_grad(wid)) {
      Tensor& gw = t.grad(wid);
      const double* pa = t.val(aid).data.data();
      for (long n = 0; n < N; ++n) {
        const double* par = &pa[n * K];
        const double* pg = &g.data[n * M];
        for (int k = 0; k < K; ++k) {
          const double av = par[k];
          double* pgw = &gw.data[(long)k * M];
          for (int m = 0; m < M; ++m) pgw[m] += av * pg[m];
        }
      }
    }
  })};
}

// batched matmul a:[B,M,K] x b:[B,K,N] -> [B,M,N]
inline Value bmm(Value a, Value b) {
  detail::require_same_tape(a, b, "bmm");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw std::invalid_argument("bmm: expected [B,M,K] x [B,K,N]");
  const int B = as[0], M = as[1], K = as[2], N = bs[2];
  Tensor out({B, M, N});
  {
    const double* pa = a.v().data.data();
    const double* pb = b.v().data.data();
    for (int bb = 0; bb < B; ++bb)
      for (int m = 0; m < M; ++m) {
        double* po = &out.data[((long)bb * M + m) * N];
        const double* par = &pa[((long)bb * M + m) * K];
        for (int k = 0; k < K; ++k) {
          const double av = par[k];
          const double* pbr = &pb[((long)bb * K + k) * N];
          for (int n = 0; n < N; ++n) po[n] += av * pbr[n];
        }
      }
  }
  bool rg = a.needs_grad() || b.needs_grad();
  int aid = a.id, bid = b.id;
  return Value{a.tape, a.tape->record(std::move(out), rg, {aid, bid},
                                      [aid, bid, B, M, K, N](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(aid)) {
      Tensor& ga = t.grad(aid);
      const double* pb = t.val(bid).data.data();
      for (int bb = 0; bb < B; ++bb)
        for (int m = 0; m < M; ++m) {
          const double* pg = &g.data[((long)bb * M + m) * N];
          double* pga = &ga.data[((long)bb * M + m) * K];
          for (int k = 0; k < K; ++k) {
            const double* pbr = &pb[((long)bb * K + k) * N];
            double acc = 0.0;
            for (int n = 0; n < N; ++n) acc += pg[n] * pbr[n];
            pga[k] += acc;
          }
        }
    }
    if (t.needs_grad(bid)) {
      Tensor& gb = t.grad(bid);
      const double* pa = t.val(aid).data.data();
      for (int bb = 0; bb < B; ++bb)
        for (int m = 0; m < M; ++m) {
          const double* pg = &g.data[((long)bb * M + m) * N];
          const double* par = &pa[((long)bb * M + m) * K];
          for (int k = 0; k < K; ++k) {
            const double av = par[k];
            double* pgb = &gb.data[((long)bb * K + k) * N];
            for (int n = 0; n < N; ++n) pgb[n] += av * pg[n];
          }
        }
    }
  })};
}

// batched matmul with transposed rhs: a:[B,M,K] x b:[B,N,K] -> [B,M,N]
inline Value bmm_nt(Value a, Value b) {
  detail::require_same_tape(a, b, "bmm_nt");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[2])
    throw std::invalid_argument("bmm_nt: expected [B,M,K] x [B,N,K]");
  const int B = as[0], M = as[1], K = as[2], N = bs[1];
  Tensor out({B, M, N});
  {
    const double* pa = a.v().data.data();
    const double* pb = b.v().data.data();
    for (int bb = 0; bb < B; ++bb)
      for (int m = 0; m < M; ++m) {
        const double* par = &pa[((long)bb * M + m) * K];
        double* po = &out.data[((long)bb * M + m) * N];
        for (int n = 0; n < N; ++n) {
          const double* pbr = &pb[((long)bb * N + n) * K];
          double acc = 0.0;
          for (int k = 0; k < K; ++k) acc += par[k] * pbr[k];
          po[n] = acc;
        }
      }
  }
  bool rg = a.needs_grad() || b.needs_grad();
  int aid = a.id, bid = b.id;
  return Value{a.tape, a.tape->record(std::move(out), rg, {aid, bid},
                                      [aid, bid, B, M, K, N](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(aid)) {
      Tensor& ga = t.grad(aid);
      const double* pb = t.val(bid).data.data();
      for (int bb = 0; bb < B; ++bb)
        for (int m = 0; m < M; ++m) {
          const double* pg = &g.data[((long)bb * M + m) * N];
          double* pga = &ga.data[((long)bb * M + m) * K];
          for (int n = 0; n < N; ++n) {
            const double gv = pg[n];
            const double* pbr = &pb[((long)bb * N + n) * K];
            for (int k = 0; k < K; ++k) pga[k] += gv * pbr[k];
          }
        }
    }
    if (t.needs_grad(bid)) {
      Tensor& gb = t.grad(bid);
      const double* pa = t.val(aid).data.data();
      for (int bb = 0; bb < B; ++bb)
        for (int m = 0; m < M; ++m) {
          const double* pg = &g.data[((long)bb * M + m) * N];
          const double* par = &pa[((long)bb * M + m) * K];
          for (int n = 0; n < N; ++n) {
            const double gv = pg[n];
            double* pgb = &gb.data[((long)bb * N + n) * K];
            for (int k = 0; k < K; ++k) pgb[k] += gv * par[k];
          }
        }
    }
  })};
}

// ------------------------------------------------------------ normalization

// Softmax along one axis, max-subtracted for stability.
inline Value softmax(Value a, int axis) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= (int)s.size()) throw std::invalid_argument("softmax: axis out of range");
  require_finite(a.v(), "softmax input");
  const long outer = detail::prod(s, 0, axis);
  const int n = s[axis];
  const long inner = detail::prod(s, axis + 1, (int)s.size());
  Tensor out(s);
  {
    const double* px = a.v().data.data();
    for (long o = 0; o < outer; ++o)
      for (long i = 0; i < inner; ++i) {
        const long base = o * n * inner + i;
        double mx = px[base];
        for (int k = 1; k < n; ++k) mx = std::max(mx, px[base + k * inner]);
        double sum = 0.0;
        for (int k = 0; k < n; ++k) {
          double e = std::exp(px[base + k * inner] - mx);
          out.data[base + k * inner] = e;
          sum += e;
        }
        const double inv = 1.0 / sum;
        for (int k = 0; k < n; ++k) out.data[base + k * inner] *= inv;
      }
  }
  int aid = a.id;
  return Value{a.tape, a.tape->record(std::move(out), a.needs_grad(), {aid},
                                      [aid, outer, n, inner](Tape& t, int self) {
    if (!t.needs_grad(aid)) return;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.val(self);
    Tensor& ga = t.grad(aid);
    for (long o = 0; o < outer; ++o)
      for (long i = 0; i < inner; ++i) {
        const long base = o * n * inner + i;
        double dot = 0.0;
        for (int k = 0; k < n; ++k) dot += g.data[base + k * inner] * y.data[base + k * inner];
        for (int k = 0; k < n; ++k) {
          const long ix = base + k * inner;
          ga.data[ix] += y.data[ix] * (g.data[ix] - dot);
        }
      }
  })};
}

// SoftMin over a plain vector: softmax of the negated inputs. Used for the
// fragile-modality sampling distribution; not a tape op (sampling is discrete).
inline std::vector<double> softmin(const std::vector<double>& x) {
  if (x.empty()) throw std::invalid_argument("softmin: empty input");
  double mx = -x[0];
  for (double v : x) mx = std::max(mx, -v);
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw std::invalid_argument("softmin: non-finite input");
    out[i] = std::exp(-x[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Per-position layer normalization across the channel axis of x:[C,H,W].
inline Value layer_norm_chan(Value x, Value gamma, Value beta, double eps = 1e-5) {
  detail::require_same_tape(x, gamma, "layer_norm_chan");
  detail::require_same_tape(x, beta, "layer_norm_chan");
  const Shape& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("layer_norm_chan: expected [C,H,W]");
  const int C = s[0];
  const long P = (long)s[1] * s[2];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw std::invalid_argument("layer_norm_chan: gamma/beta must be [C]");
  Tensor out(s);
  {
    const double* px = x.v().data.data();
    const double* pg = gamma.v().data.data();
    const double* pb = beta.v().data.data();
    for (long p = 0; p < P; ++p) {
      double mu = 0.0;
      for (int c = 0; c < C; ++c) mu += px[c * P + p];
      mu /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        double d = px[c * P + p] - mu;
        var += d * d;
      }
      var /= C;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int c = 0; c < C; ++c)
        out.data[c * P + p] = (px[c * P + p] - mu) * inv * pg[c] + pb[c];
    }
  }
  bool rg = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
  int xid = x.id, gid = gamma.id, bid = beta.id;
  return Value{x.tape, x.tape->record(std::move(out), rg, {xid, gid, bid},
                                      [xid, gid, bid, C, P, eps](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.val(xid);
    const Tensor& gv = t.val(gid);
    const bool nx = t.needs_grad(xid), ng = t.needs_grad(gid), nb = t.needs_grad(bid);
    Tensor* gx = nx ? &t.grad(xid) : nullptr;
    Tensor* gg = ng ? &t.grad(gid) : nullptr;
    Tensor* gb = nb ? &t.grad(bid) : nullptr;
    std::vector<double> xhat(C);
    for (long p = 0; p < P; ++p) {
      double mu = 0.0;
      for (int c = 0; c < C; ++c) mu += xv.data[c * P + p];
      mu /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        double d = xv.data[c * P + p] - mu;
        var += d * d;
      }
      var /= C;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int c = 0; c < C; ++c) xhat[c] = (xv.data[c * P + p] - mu) * inv;
      if (gg || gb) {
        for (int c = 0; c < C; ++c) {
          const double gc = g.data[c * P + p];
          if (gg) gg->data[c] += gc * xhat[c];
          if (gb) gb->data[c] += gc;
        }
      }
      if (gx) {
        double mean_u = 0.0, mean_ux = 0.0;
        for (int c = 0; c < C; ++c) {
          const double u = g.data[c * P + p] * gv.data[c];
          mean_u += u;
          mean_ux += u * xhat[c];
        }
        mean_u /= C;
        mean_ux /= C;
        for (int c = 0; c < C; ++c) {
          const double u = g.data[c * P + p] * gv.data[c];
          gx->data[c * P + p] += inv * (u - mean_u - xhat[c] * mean_ux);
        }
      }
    }
  })};
}

// -------------------------------------------------------------- convolution

// x:[Cin,H,W], w:[Cout,Cin/groups,kh,kw], optional bias:[Cout].
// H' = floor((H + 2*pad - kh)/stride) + 1, likewise W'.
inline Value conv2d(Value x, Value w, std::optional<Value> bias, int stride, int pad, int groups) {
  detail::require_same_tape(x, w, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4) throw std::invalid_argument("conv2d: expected x [C,H,W], w [O,I,kh,kw]");
  const int Cin = xs[0], H = xs[1], W = xs[2];
  const int Cout = ws[0], Cg = ws[1], kh = ws[2], kw = ws[3];
  if (groups <= 0 || Cin % groups != 0 || Cout % groups != 0)
    throw std::invalid_argument("conv2d: groups must divide input and output channels");
  if (Cg != Cin / groups) throw std::invalid_argument("conv2d: kernel channel count mismatch");
  if (stride <= 0 || pad < 0) throw std::invalid_argument("conv2d: bad stride/padding");
  if (H + 2 * pad < kh || W + 2 * pad < kw) throw std::invalid_argument("conv2d: kernel does not fit");
  if (bias && bias->shape() != Shape{Cout}) throw std::invalid_argument("conv2d: bias must be [Cout]");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int Ocg = Cout / groups;
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0 && groups == 1);

  Tensor out({Cout, Ho, Wo});
  {
    const double* px = x.v().data.data();
    const double* pw = w.v().data.data();
    const double* pb = bias ? bias->v().data.data() : nullptr;
    if (pointwise) {
      const long P = (long)H * W;
      for (int oc = 0; oc < Cout; ++oc) {
        double* po = &out.data[oc * P];
        if (pb) std::fill(po, po + P, pb[oc]);
        for (int ic = 0; ic < Cin; ++ic) {
          const double wv = pw[(long)oc * Cin + ic];
          const double* pxr = &px[ic * P];
          for (long p = 0; p < P; ++p) po[p] += wv * pxr[p];
        }
      }
    } else {
      for (int g = 0; g < groups; ++g)
        for (int ocg = 0; ocg < Ocg; ++ocg) {
          const int oc = g * Ocg + ocg;
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              double acc = pb ? pb[oc] : 0.0;
              for (int icg = 0; icg < Cg; ++icg) {
                const int ic = g * Cg + icg;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  const double* pxr = &px[((long)ic * H + iy) * W];
                  const double* pwr = &pw[(((long)oc * Cg + icg) * kh + ky) * kw];
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    acc += pxr[ix] * pwr[kx];
                  }
                }
              }
              out.data[((long)oc * Ho + oy) * Wo + ox] = acc;
            }
        }
    }
  }

  bool rg = x.needs_grad() || w.needs_grad() || (bias && bias->needs_grad());
  int xid = x.id, wid = w.id, bid = bias ? bias->id : -1;
  std::vector<int> parents = {xid, wid};
  if (bid >= 0) parents.push_back(bid);
  return Value{x.tape, x.tape->record(std::move(out), rg, parents,
                                      [=](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.val(xid);
    const Tensor& wv = t.val(wid);
    const bool nx = t.needs_grad(xid), nw = t.needs_grad(wid);
    const bool nb = bid >= 0 && t.needs_grad(bid);
    Tensor* gx = nx ? &t.grad(xid) : nullptr;
    Tensor* gw = nw ? &t.grad(wid) : nullptr;
    Tensor* gb = nb ? &t.grad(bid) : nullptr;
    if (pointwise) {
      const long P = (long)H * W;
      for (int oc = 0; oc < Cout; ++oc) {
        const double* pg = &g.data[oc * P];
        if (gb) {
          double acc = 0.0;
          for (long p = 0; p < P; ++p) acc += pg[p];
          gb->data[oc] += acc;
        }
        for (int ic = 0; ic < Cin; ++ic) {
          if (gx) {
            const double wvv = wv.data[(long)oc * Cin + ic];
            double* pgx = &gx->data[ic * P];
            for (long p = 0; p < P; ++p) pgx[p] += wvv * pg[p];
          }
          if (gw) {
            const double* pxr = &xv.data[ic * P];
            double acc = 0.0;
            for (long p = 0; p < P; ++p) acc += pg[p] * pxr[p];
            gw->data[(long)oc * Cin + ic] += acc;
          }
        }
      }
    } else {
      for (int grp = 0; grp < groups; ++grp)
        for (int ocg = 0; ocg < Ocg; ++ocg) {
          const int oc = grp * Ocg + ocg;
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const double gv = g.data[((long)oc * Ho + oy) * Wo + ox];
              if (gv == 0.0) continue;
              if (gb) gb->data[oc] += gv;
              for (int icg = 0; icg < Cg; ++icg) {
                const int ic = grp * Cg + icg;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  const long xrow = ((long)ic * H + iy) * W;
                  const long wrow = (((long)oc * Cg + icg) * kh + ky) * kw;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    if (gx) gx->data[xrow + ix] += gv * wv.data[wrow + kx];
                    if (gw) gw->data[wrow + kx] += gv * xv.data[xrow + ix];
                  }
                }
              }
            }
        }
    }
  })};
}

// Bilinear upsampling by an integer factor (half-pixel alignment).
inline Value upsample_bilinear(Value x, int factor) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("upsample_bilinear: expected [C,H,W]");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  if (factor == 1) return x;
  const int C = s[0], H = s[1], W = s[2];
  const int Ho = H * factor, Wo = W * factor;

  auto taps = [factor](int n, int out_n) {
    std::vector<int> i0(out_n), i1(out_n);
    std::vector<double> w1(out_n);
    for (int o = 0; o < out_n; ++o) {
      double src = (o + 0.5) / factor - 0.5;
      int lo = (int)std::floor(src);
      double f = src - lo;
      int a = std::clamp(lo, 0, n - 1);
      int b = std::clamp(lo + 1, 0, n - 1);
      i0[o] = a;
      i1[o] = b;
      w1[o] = f;
    }
    return std::make_tuple(i0, i1, w1);
  };
  auto [y0, y1, wy] = taps(H, Ho);
  auto [x0, x1, wx] = taps(W, Wo);
  auto ty = std::make_shared<std::tuple<std::vector<int>, std::vector<int>, std::vector<double>>>(y0, y1, wy);
  auto tx = std::make_shared<std::tuple<std::vector<int>, std::vector<int>, std::vector<double>>>(x0, x1, wx);

  Tensor out({C, Ho, Wo});
  {
    const double* px = x.v().data.data();
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy) {
        const int a = y0[oy], b = y1[oy];
        const double fy = wy[oy];
        const double* r0 = &px[((long)c * H + a) * W];
        const double* r1 = &px[((long)c * H + b) * W];
        double* po = &out.data[((long)c * Ho + oy) * Wo];
        for (int ox = 0; ox < Wo; ++ox) {
          const double fx = wx[ox];
          const double v0 = r0[x0[ox]] * (1 - fx) + r0[x1[ox]] * fx;
          const double v1 = r1[x0[ox]] * (1 - fx) + r1[x1[ox]] * fx;
          po[ox] = v0 * (1 - fy) + v1 * fy;
        }
      }
  }
  int xid = x.id;
  return Value{x.tape, x.tape->record(std::move(out), x.needs_grad(), {xid},
                                      [xid, C, H, W, Ho, Wo, ty, tx](Tape& t, int self) {
    if (!t.needs_grad(xid)) return;
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xid);
    const auto& [y0, y1, wy] = *ty;
    const auto& [x0, x1, wx] = *tx;
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy) {
        const int a = y0[oy], b = y1[oy];
        const double fy = wy[oy];
        double* r0 = &gx.data[((long)c * H + a) * W];
        double* r1 = &gx.data[((long)c * H + b) * W];
        const double* pg = &g.data[((long)c * Ho + oy) * Wo];
        for (int ox = 0; ox < Wo; ++ox) {
          const double fx = wx[ox];
          const double gv = pg[ox];
          r0[x0[ox]] += gv * (1 - fx) * (1 - fy);
          r0[x1[ox]] += gv * fx * (1 - fy);
          r1[x0[ox]] += gv * (1 - fx) * fy;
          r1[x1[ox]] += gv * fx * fy;
        }
      }
  })};
}

// ---------------------------------------------------------------- structural

using IndexMap = std::shared_ptr<const std::vector<long>>;

// out[i] = x[(*map)[i]]; backward scatter-adds, so the map may repeat indices.
inline Value gather(Value x, IndexMap map, Shape out_shape) {
  const long n = shape_numel(out_shape);
  if ((long)map->size() != n) throw std::invalid_argument("gather: map size mismatch");
  const long xn = x.v().numel();
  Tensor out(std::move(out_shape));
  {
    const double* px = x.v().data.data();
    const auto& m = *map;
    for (long i = 0; i < n; ++i) {
      if (m[i] < 0 || m[i] >= xn) throw std::invalid_argument("gather: index out of range");
      out.data[i] = px[m[i]];
    }
  }
  int xid = x.id;
  return Value{x.tape, x.tape->record(std::move(out), x.needs_grad(), {xid},
                                      [xid, map, n](Tape& t, int self) {
    if (!t.needs_grad(xid)) return;
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xid);
    const auto& m = *map;
    for (long i = 0; i < n; ++i) gx.data[m[i]] += g.data[i];
  })};
}

inline Value concat(const std::vector<Value>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input list");
  const Shape& s0 = xs[0].shape();
  if (axis < 0 || axis >= (int)s0.size()) throw std::invalid_argument("concat: axis out of range");
  int total = 0;
  for (const Value& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < (int)s.size(); ++d)
      if (d != axis && s[d] != s0[d]) throw std::invalid_argument("concat: shape mismatch");
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  const long outer = detail::prod(s0, 0, axis);
  const long inner = detail::prod(s0, axis + 1, (int)s0.size());
  Tensor out(os);
  std::vector<long> blocks;  // per-input axis extent * inner
  {
    long off = 0;
    for (const Value& v : xs) {
      const long blk = (long)v.shape()[axis] * inner;
      blocks.push_back(blk);
      const double* px = v.v().data.data();
      for (long o = 0; o < outer; ++o)
        std::copy(px + o * blk, px + (o + 1) * blk, out.data.begin() + o * total * inner + off);
      off += blk;
    }
  }
  bool rg = false;
  std::vector<int> pids;
  for (const Value& v : xs) {
    rg = rg || v.needs_grad();
    pids.push_back(v.id);
  }
  const long row = (long)total * inner;
  return Value{xs[0].tape, xs[0].tape->record(std::move(out), rg, pids,
                                              [pids, blocks, outer, row](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    long off = 0;
    for (size_t i = 0; i < pids.size(); ++i) {
      if (t.needs_grad(pids[i])) {
        Tensor& gp = t.grad(pids[i]);
        for (long o = 0; o < outer; ++o) {
          const double* pg = &g.data[o * row + off];
          double* pp = &gp.data[o * blocks[i]];
          for (long k = 0; k < blocks[i]; ++k) pp[k] += pg[k];
        }
      }
      off += blocks[i];
    }
  })};
}

// ------------------------------------------------------------------- losses

// logits:[K,H,W], labels: H*W class ids. Mean of -log softmax(logits)[label]
// over non-ignored pixels, computed with log-sum-exp.
inline Value cross_entropy(Value logits, const std::vector<int>& labels, int ignore_id) {
  const Shape& s = logits.shape();
  if (s.size() != 3) throw std::invalid_argument("cross_entropy: expected logits [K,H,W]");
  const int K = s[0];
  const long P = (long)s[1] * s[2];
  if ((long)labels.size() != P) throw std::invalid_argument("cross_entropy: label count mismatch");
  long n_valid = 0;
  double loss = 0.0;
  {
    const double* pl = logits.v().data.data();
    for (long p = 0; p < P; ++p) {
      const int lab = labels[p];
      if (lab == ignore_id) continue;
      if (lab < 0 || lab >= K) throw std::invalid_argument("cross_entropy: label out of range");
      ++n_valid;
      double mx = pl[p];
      for (int k = 1; k < K; ++k) mx = std::max(mx, pl[k * P + p]);
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(pl[k * P + p] - mx);
      loss += mx + std::log(sum) - pl[(long)lab * P + p];
    }
  }
  if (n_valid == 0) throw std::invalid_argument("cross_entropy: all pixels ignored");
  loss /= (double)n_valid;
  int lid = logits.id;
  auto labs = std::make_shared<std::vector<int>>(labels);
  return Value{logits.tape, logits.tape->record(Tensor::scalar(loss), logits.needs_grad(), {lid},
                                                [lid, labs, K, P, ignore_id, n_valid](Tape& t, int self) {
    if (!t.needs_grad(lid)) return;
    const double g = t.grad(self).data[0] / (double)n_valid;
    const Tensor& lv = t.val(lid);
    Tensor& gl = t.grad(lid);
    for (long p = 0; p < P; ++p) {
      const int lab = (*labs)[p];
      if (lab == ignore_id) continue;
      double mx = lv.data[p];
      for (int k = 1; k < K; ++k) mx = std::max(mx, lv.data[k * P + p]);
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(lv.data[k * P + p] - mx);
      const double inv = 1.0 / sum;
      for (int k = 0; k < K; ++k) {
        double sm = std::exp(lv.data[k * P + p] - mx) * inv;
        gl.data[k * P + p] += g * (sm - (k == lab ? 1.0 : 0.0));
      }
    }
  })};
}

// Mean over positions of KL(p || q) where p,q:[C,...] hold per-position
// channel distributions. Inputs are floored at 1e-12 inside the logs.
inline Value kl_div_mean(Value p, Value q) {
  detail::require_same_tape(p, q, "kl_div_mean");
  require_same_shape(p.v(), q.v(), "kl_div_mean");
  const Shape& s = p.shape();
  const int C = s[0];
  const long N = p.v().numel() / C;
  const double floor = 1e-12;
  double acc = 0.0;
  {
    const double* pp = p.v().data.data();
    const double* pq = q.v().data.data();
    for (long i = 0; i < N; ++i)
      for (int c = 0; c < C; ++c) {
        const double pv = pp[c * N + i];
        const double qv = pq[c * N + i];
        acc += pv * (std::log(std::max(pv, floor)) - std::log(std::max(qv, floor)));
      }
  }
  acc /= (double)N;
  bool rg = p.needs_grad() || q.needs_grad();
  int pid = p.id, qid = q.id;
  return Value{p.tape, p.tape->record(Tensor::scalar(acc), rg, {pid, qid},
                                      [pid, qid, C, N, floor](Tape& t, int self) {
    const double g = t.grad(self).data[0] / (double)N;
    const Tensor& pv = t.val(pid);
    const Tensor& qv = t.val(qid);
    if (t.needs_grad(pid)) {
      Tensor& gp = t.grad(pid);
      for (long i = 0; i < N * C; ++i) {
        const double pf = std::max(pv.data[i], floor);
        const double qf = std::max(qv.data[i], floor);
        gp.data[i] += g * (std::log(pf) - std::log(qf) + (pv.data[i] >= floor ? 1.0 : 0.0));
      }
    }
    if (t.needs_grad(qid)) {
      Tensor& gq = t.grad(qid);
      for (long i = 0; i < N * C; ++i) {
        const double qf = std::max(qv.data[i], floor);
        if (qv.data[i] >= floor) gq.data[i] -= g * pv.data[i] / qf;
      }
    }
  })};
}

}  // namespace charm
