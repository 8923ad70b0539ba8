#pragma once

#include <random>

#include "fluxamba/ops.hpp"

namespace flux {

struct ConvSpec {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dil_h = 1, dil_w = 1;
  int groups = 1;

  static ConvSpec uniform(int stride, int pad, int dil = 1, int groups = 1) {
    return {stride, stride, pad, pad, dil, dil, groups};
  }
};

inline int conv_out_extent(int in, int pad, int dil, int k, int stride) {
  return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

// x [B,Cin,H,W], w [Cout,Cin/g,Kh,Kw], optional bias [Cout].
// Cross-correlation, the usual deep-learning convention.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias,
                     const ConvSpec& cs = {}) {
  if (x.shape.size() != 4 || w.shape.size() != 4)
    throw ShapeError("conv2d: expects rank-4 input " + shape_str(x.shape) +
                     " and weight " + shape_str(w.shape));
  int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
  int Cout = w.shape[0], Cg = w.shape[1], Kh = w.shape[2], Kw = w.shape[3];
  int g = cs.groups;
  if (Cin % g != 0 || Cout % g != 0 || Cg != Cin / g)
    throw ShapeError("conv2d: channel/group mismatch, Cin=" +
                     std::to_string(Cin) + " Cout=" + std::to_string(Cout) +
                     " groups=" + std::to_string(g) + " w-Cin/g=" +
                     std::to_string(Cg));
  if (bias && (bias->shape.size() != 1 || bias->shape[0] != Cout))
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape) +
                     " for Cout=" + std::to_string(Cout));
  if (cs.dil_h < 1 || cs.dil_w < 1) throw ConfigError("conv2d: dilation >= 1");
  int OH = conv_out_extent(H, cs.pad_h, cs.dil_h, Kh, cs.stride_h);
  int OW = conv_out_extent(W, cs.pad_w, cs.dil_w, Kw, cs.stride_w);
  if (OH < 1 || OW < 1)
    throw ShapeError("conv2d: empty output for input " + shape_str(x.shape));
  int ocg = Cout / g;
  Tensor out({B, Cout, OH, OW}, promote(x, w));
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < Cout; ++oc) {
      int gi = oc / ocg;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double s = bias ? bias->at(oc) : 0.0;
          for (int icg = 0; icg < Cg; ++icg) {
            int ic = gi * Cg + icg;
            for (int kh = 0; kh < Kh; ++kh) {
              int ih = oh * cs.stride_h - cs.pad_h + kh * cs.dil_h;
              if (ih < 0 || ih >= H) continue;
              for (int kw = 0; kw < Kw; ++kw) {
                int iw = ow * cs.stride_w - cs.pad_w + kw * cs.dil_w;
                if (iw < 0 || iw >= W) continue;
                s += x.at(((static_cast<size_t>(b) * Cin + ic) * H + ih) * W + iw) *
                     w.at(((static_cast<size_t>(oc) * Cg + icg) * Kh + kh) * Kw + kw);
              }
            }
          }
          out.store(((static_cast<size_t>(b) * Cout + oc) * OH + oh) * OW + ow, s);
        }
    }
  count_flops_add(2ull * B * Kh * Kw * Cg * Cout * OH * OW);
  const Tensor* bptr = bias;
  if (grad_enabled({&x, &w, bptr})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    bool tx = tp->tracked(x), tw = tp->tracked(w);
    bool tb = bias && tp->tracked(*bias);
    Tensor bcopy = bias ? *bias : Tensor();
    tp->push(out.id(), [=]() {
      auto& go = tp->grad_buffer(out);
      std::vector<double>* gx = tx ? &tp->grad_buffer(x) : nullptr;
      std::vector<double>* gw = tw ? &tp->grad_buffer(w) : nullptr;
      std::vector<double>* gb = tb ? &tp->grad_buffer(bcopy) : nullptr;
      for (int b = 0; b < B; ++b)
        for (int oc = 0; oc < Cout; ++oc) {
          int gi = oc / ocg;
          for (int oh = 0; oh < OH; ++oh)
            for (int ow = 0; ow < OW; ++ow) {
              double g0 =
                  go[((static_cast<size_t>(b) * Cout + oc) * OH + oh) * OW + ow];
              if (g0 == 0.0) continue;
              if (gb) (*gb)[oc] += g0;
              for (int icg = 0; icg < Cg; ++icg) {
                int ic = gi * Cg + icg;
                for (int kh = 0; kh < Kh; ++kh) {
                  int ih = oh * cs.stride_h - cs.pad_h + kh * cs.dil_h;
                  if (ih < 0 || ih >= H) continue;
                  for (int kw = 0; kw < Kw; ++kw) {
                    int iw = ow * cs.stride_w - cs.pad_w + kw * cs.dil_w;
                    if (iw < 0 || iw >= W) continue;
                    size_t xi =
                        ((static_cast<size_t>(b) * Cin + ic) * H + ih) * W + iw;
                    size_t wi =
                        ((static_cast<size_t>(oc) * Cg + icg) * Kh + kh) * Kw + kw;
                    if (gx) (*gx)[xi] += g0 * w.at(wi);
                    if (gw) (*gw)[wi] += g0 * x.at(xi);
                  }
                }
              }
            }
        }
    });
  }
  return out;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     const ConvSpec& cs = {}) {
  return conv2d(x, w, &bias, cs);
}

enum class PoolAxis { height, width, both };

// Axis-separated average pooling; both == global average pooling.
inline Tensor pool_axis_avg(const Tensor& x, PoolAxis axis) {
  if (x.shape.size() != 4) throw ShapeError("pool_axis_avg: rank-4 required");
  int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int OH = axis == PoolAxis::width ? H : 1;
  int OW = axis == PoolAxis::height ? W : 1;
  double denom = axis == PoolAxis::height ? H : axis == PoolAxis::width ? W
                                                                        : H * W;
  Tensor out({B, C, OH, OW}, x.dtype);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double s = 0;
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              if (OH == H && h != oh) continue;
              if (OW == W && w != ow) continue;
              s += x.at(((static_cast<size_t>(b) * C + c) * H + h) * W + w);
            }
          out.store(((static_cast<size_t>(b) * C + c) * OH + oh) * OW + ow,
                    s / denom);
        }
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [=]() {
      auto& go = tp->grad_buffer(out);
      auto& gx = tp->grad_buffer(x);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              int oh = OH == H ? h : 0;
              int ow = OW == W ? w : 0;
              gx[((static_cast<size_t>(b) * C + c) * H + h) * W + w] +=
                  go[((static_cast<size_t>(b) * C + c) * OH + oh) * OW + ow] /
                  denom;
            }
    });
  }
  return out;
}

inline Tensor global_avg_pool(const Tensor& x) {
  return pool_axis_avg(x, PoolAxis::both);
}

enum class StripOrient { horizontal, vertical };

// Full-extent strip average, depthwise 1D conv (kernel 3, padding 1) along
// the remaining axis, broadcast back. Weight [C,1,3,1]; optional bias [C].
inline Tensor strip_pool(const Tensor& x, StripOrient o, const Tensor& w1d,
                         const Tensor* bias = nullptr) {
  if (x.shape.size() != 4) throw ShapeError("strip_pool: rank-4 required");
  int C = x.shape[1];
  if (w1d.shape != Shape{C, 1, 3, 1})
    throw ShapeError("strip_pool: weight must be [C,1,3,1], got " +
                     shape_str(w1d.shape));
  Tensor pooled = pool_axis_avg(
      x, o == StripOrient::horizontal ? PoolAxis::width : PoolAxis::height);
  ConvSpec cs;
  cs.groups = C;
  Tensor kernel = w1d;
  if (o == StripOrient::horizontal) {
    cs.pad_h = 1;  // pooled is [B,C,H,1], conv along H
  } else {
    kernel = reshape(w1d, {C, 1, 1, 3});
    cs.pad_w = 1;  // pooled is [B,C,1,W], conv along W
  }
  Tensor conved = conv2d(pooled, kernel, bias, cs);
  // broadcast back over the collapsed axis
  Tensor ones = o == StripOrient::horizontal
                    ? Tensor::full({1, 1, 1, x.shape[3]}, 1.0, x.dtype)
                    : Tensor::full({1, 1, x.shape[2], 1}, 1.0, x.dtype);
  return mul(conved, ones);
}

// Normalizes over `axes` (per remaining-index slice). gamma/beta span the
// normalized extents, in axis order.
inline Tensor layer_norm(const Tensor& x, const std::vector<int>& axes,
                         const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  size_t rank = x.shape.size();
  std::vector<bool> norm_dim(rank, false);
  size_t m = 1;
  for (int a : axes) {
    int ax = a < 0 ? a + static_cast<int>(rank) : a;
    if (ax < 0 || ax >= static_cast<int>(rank)) throw ShapeError("layer_norm: bad axis");
    norm_dim[ax] = true;
    m *= static_cast<size_t>(x.shape[ax]);
  }
  if (gamma.size() != m || beta.size() != m)
    throw ShapeError("layer_norm: gamma/beta must match normalized extent " +
                     std::to_string(m));
  size_t n = x.size();
  size_t slices = n / m;
  // slice id and within-slice (gamma) id for every element
  std::vector<size_t> sid(n), gid(n);
  {
    auto st = strides_of(x.shape);
    std::vector<int> idx(rank, 0);
    for (size_t i = 0; i < n; ++i) {
      size_t s = 0, gq = 0;
      for (size_t d = 0; d < rank; ++d) {
        if (norm_dim[d])
          gq = gq * static_cast<size_t>(x.shape[d]) + static_cast<size_t>(idx[d]);
        else
          s = s * static_cast<size_t>(x.shape[d]) + static_cast<size_t>(idx[d]);
      }
      sid[i] = s;
      gid[i] = gq;
      for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
        if (++idx[d] < x.shape[d]) break;
        idx[d] = 0;
      }
    }
  }
  std::vector<double> mu(slices, 0.0), var(slices, 0.0);
  for (size_t i = 0; i < n; ++i) mu[sid[i]] += x.at(i);
  for (auto& v : mu) v /= static_cast<double>(m);
  for (size_t i = 0; i < n; ++i) {
    double d = x.at(i) - mu[sid[i]];
    var[sid[i]] += d * d;
  }
  for (auto& v : var) v /= static_cast<double>(m);
  Tensor out(x.shape, x.dtype);
  std::vector<double> inv_sd(slices);
  for (size_t s = 0; s < slices; ++s) inv_sd[s] = 1.0 / std::sqrt(var[s] + eps);
  for (size_t i = 0; i < n; ++i) {
    double xh = (x.at(i) - mu[sid[i]]) * inv_sd[sid[i]];
    out.store(i, gamma.at(gid[i]) * xh + beta.at(gid[i]));
  }
  if (grad_enabled({&x, &gamma, &beta})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    bool tx = tp->tracked(x), tg = tp->tracked(gamma), tb = tp->tracked(beta);
    tp->push(out.id(), [=]() {
      auto& go = tp->grad_buffer(out);
      std::vector<double>* gx = tx ? &tp->grad_buffer(x) : nullptr;
      std::vector<double>* gg = tg ? &tp->grad_buffer(gamma) : nullptr;
      std::vector<double>* gb = tb ? &tp->grad_buffer(beta) : nullptr;
      std::vector<double> sum_gy(slices, 0.0), sum_gyxh(slices, 0.0);
      std::vector<double> xh(n);
      for (size_t i = 0; i < n; ++i) {
        xh[i] = (x.at(i) - mu[sid[i]]) * inv_sd[sid[i]];
        double gyg = go[i] * gamma.at(gid[i]);
        sum_gy[sid[i]] += gyg;
        sum_gyxh[sid[i]] += gyg * xh[i];
      }
      for (size_t i = 0; i < n; ++i) {
        if (gg) (*gg)[gid[i]] += go[i] * xh[i];
        if (gb) (*gb)[gid[i]] += go[i];
        if (gx) {
          double gyg = go[i] * gamma.at(gid[i]);
          size_t s = sid[i];
          (*gx)[i] += inv_sd[s] * (gyg - sum_gy[s] / static_cast<double>(m) -
                                   xh[i] * sum_gyxh[s] / static_cast<double>(m));
        }
      }
    });
  }
  return out;
}

enum class NormMode { train, eval };

// Running stats are mutated in place in train mode (not differentiated).
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var, NormMode mode,
                         double momentum = 0.1, double eps = 1e-5) {
  if (x.shape.size() != 4) throw ShapeError("batch_norm: rank-4 required");
  int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (gamma.size() != static_cast<size_t>(C) || beta.size() != static_cast<size_t>(C))
    throw ShapeError("batch_norm: gamma/beta must be [C]");
  if (mode == NormMode::train && B < 2)
    throw ConfigError("batch_norm: train mode requires batch >= 2");
  size_t plane = static_cast<size_t>(H) * W;
  size_t m = static_cast<size_t>(B) * plane;
  std::vector<double> mu(C), var(C);
  if (mode == NormMode::train) {
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int b = 0; b < B; ++b)
        for (size_t i = 0; i < plane; ++i)
          s += x.at((static_cast<size_t>(b) * C + c) * plane + i);
      mu[c] = s / static_cast<double>(m);
      double v = 0;
      for (int b = 0; b < B; ++b)
        for (size_t i = 0; i < plane; ++i) {
          double d = x.at((static_cast<size_t>(b) * C + c) * plane + i) - mu[c];
          v += d * d;
        }
      var[c] = v / static_cast<double>(m);
      running_mean.store(c, (1.0 - momentum) * running_mean.at(c) + momentum * mu[c]);
      running_var.store(c, (1.0 - momentum) * running_var.at(c) + momentum * var[c]);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[c] = running_mean.at(c);
      var[c] = running_var.at(c);
    }
  }
  std::vector<double> inv_sd(C);
  for (int c = 0; c < C; ++c) inv_sd[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor out(x.shape, x.dtype);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (size_t i = 0; i < plane; ++i) {
        size_t idx = (static_cast<size_t>(b) * C + c) * plane + i;
        out.store(idx, gamma.at(c) * (x.at(idx) - mu[c]) * inv_sd[c] + beta.at(c));
      }
  if (grad_enabled({&x, &gamma, &beta})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    bool tx = tp->tracked(x), tg = tp->tracked(gamma), tb = tp->tracked(beta);
    bool train = mode == NormMode::train;
    tp->push(out.id(), [=]() {
      auto& go = tp->grad_buffer(out);
      std::vector<double>* gx = tx ? &tp->grad_buffer(x) : nullptr;
      std::vector<double>* gg = tg ? &tp->grad_buffer(gamma) : nullptr;
      std::vector<double>* gb = tb ? &tp->grad_buffer(beta) : nullptr;
      for (int c = 0; c < C; ++c) {
        double sum_gy = 0, sum_gyxh = 0;
        for (int b = 0; b < B; ++b)
          for (size_t i = 0; i < plane; ++i) {
            size_t idx = (static_cast<size_t>(b) * C + c) * plane + i;
            double xh = (x.at(idx) - mu[c]) * inv_sd[c];
            sum_gy += go[idx];
            sum_gyxh += go[idx] * xh;
          }
        if (gg) (*gg)[c] += sum_gyxh;
        if (gb) (*gb)[c] += sum_gy;
        if (gx)
          for (int b = 0; b < B; ++b)
            for (size_t i = 0; i < plane; ++i) {
              size_t idx = (static_cast<size_t>(b) * C + c) * plane + i;
              double xh = (x.at(idx) - mu[c]) * inv_sd[c];
              if (train)
                (*gx)[idx] += gamma.at(c) * inv_sd[c] *
                              (go[idx] - sum_gy / static_cast<double>(m) -
                               xh * sum_gyxh / static_cast<double>(m));
              else
                (*gx)[idx] += gamma.at(c) * inv_sd[c] * go[idx];
            }
      }
    });
  }
  return out;
}

enum class AttnAxis { height, width };

// Scaled dot-product attention along one spatial axis only. wq/wk/wv/wo are
// [C,C]; scale 1/sqrt(C/heads).
inline Tensor multi_head_axial_attention(const Tensor& x, AttnAxis axis, int heads,
                                         const Tensor& wq, const Tensor& wk,
                                         const Tensor& wv, const Tensor& wo) {
  if (x.shape.size() != 4) throw ShapeError("axial_attention: rank-4 required");
  int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (C % heads != 0)
    throw ConfigError("axial_attention: C=" + std::to_string(C) +
                      " not divisible by heads=" + std::to_string(heads));
  for (const Tensor* wt : {&wq, &wk, &wv, &wo})
    if (wt->shape != Shape{C, C})
      throw ShapeError("axial_attention: projection must be [C,C]");
  int L = axis == AttnAxis::height ? H : W;
  int G = axis == AttnAxis::height ? W : H;  // independent lines
  int d = C / heads;
  double sc = 1.0 / std::sqrt(static_cast<double>(d));
  // -> [B*G, L, C]
  Tensor seq = axis == AttnAxis::height ? permute(x, {0, 3, 2, 1})
                                        : permute(x, {0, 2, 3, 1});
  seq = reshape(seq, {B * G, L, C});
  auto split_heads = [&](const Tensor& t) {
    Tensor r = reshape(t, {B * G, L, heads, d});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {B * G * heads, L, d});
  };
  Tensor q = split_heads(matmul(seq, wq));
  Tensor k = split_heads(matmul(seq, wk));
  Tensor v = split_heads(matmul(seq, wv));
  Tensor attn = softmax(scale(matmul(q, transpose_last2(k)), sc), -1);
  Tensor ctx = matmul(attn, v);
  ctx = reshape(ctx, {B * G, heads, L, d});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {B * G, L, C});
  Tensor o = matmul(ctx, wo);
  o = reshape(o, axis == AttnAxis::height ? Shape{B, W, H, C} : Shape{B, H, W, C});
  return axis == AttnAxis::height ? permute(o, {0, 3, 2, 1})
                                  : permute(o, {0, 3, 1, 2});
}

// Bilinear sampling at continuous source coordinates (border clamp).
// cy/cx: [B,OH,OW] in input pixel space. Differentiable w.r.t. x and coords.
inline Tensor grid_sample(const Tensor& x, const Tensor& cy, const Tensor& cx) {
  if (x.shape.size() != 4) throw ShapeError("grid_sample: rank-4 required");
  int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (cy.shape.size() != 3 || cy.shape != cx.shape || cy.shape[0] != B)
    throw ShapeError("grid_sample: coords must be [B,OH,OW]");
  int OH = cy.shape[1], OW = cy.shape[2];
  Tensor out({B, C, OH, OW}, x.dtype);
  auto xat = [&](int b, int c, int h, int w) {
    return x.at(((static_cast<size_t>(b) * C + c) * H + h) * W + w);
  };
  for (int b = 0; b < B; ++b)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        size_t ci = (static_cast<size_t>(b) * OH + oh) * OW + ow;
        if (!std::isfinite(cy.at(ci)) || !std::isfinite(cx.at(ci)))
          throw NumericError("grid_sample: non-finite sampling coordinates");
        double sy = std::min(std::max(cy.at(ci), 0.0), static_cast<double>(H - 1));
        double sx = std::min(std::max(cx.at(ci), 0.0), static_cast<double>(W - 1));
        int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
        int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
        double fy = sy - y0, fx = sx - x0;
        for (int c = 0; c < C; ++c) {
          double v = (1 - fy) * (1 - fx) * xat(b, c, y0, x0) +
                     (1 - fy) * fx * xat(b, c, y0, x1) +
                     fy * (1 - fx) * xat(b, c, y1, x0) + fy * fx * xat(b, c, y1, x1);
          out.store(((static_cast<size_t>(b) * C + c) * OH + oh) * OW + ow, v);
        }
      }
  if (grad_enabled({&x, &cy, &cx})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    bool txx = tp->tracked(x), ty = tp->tracked(cy), txc = tp->tracked(cx);
    tp->push(out.id(), [=]() {
      auto& go = tp->grad_buffer(out);
      std::vector<double>* gx = txx ? &tp->grad_buffer(x) : nullptr;
      std::vector<double>* gy = ty ? &tp->grad_buffer(cy) : nullptr;
      std::vector<double>* gc = txc ? &tp->grad_buffer(cx) : nullptr;
      for (int b = 0; b < B; ++b)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow) {
            size_t ci = (static_cast<size_t>(b) * OH + oh) * OW + ow;
            double ry = cy.at(ci), rx = cx.at(ci);
            double sy = std::min(std::max(ry, 0.0), static_cast<double>(H - 1));
            double sx = std::min(std::max(rx, 0.0), static_cast<double>(W - 1));
            bool iny = ry > 0.0 && ry < H - 1;
            bool inx = rx > 0.0 && rx < W - 1;
            int y0 = static_cast<int>(std::floor(sy)),
                x0 = static_cast<int>(std::floor(sx));
            int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
            double fy = sy - y0, fx = sx - x0;
            for (int c = 0; c < C; ++c) {
              double g0 =
                  go[((static_cast<size_t>(b) * C + c) * OH + oh) * OW + ow];
              if (g0 == 0.0) continue;
              auto xi = [&](int h, int w) {
                return ((static_cast<size_t>(b) * C + c) * H + h) * W + w;
              };
              if (gx) {
                (*gx)[xi(y0, x0)] += g0 * (1 - fy) * (1 - fx);
                (*gx)[xi(y0, x1)] += g0 * (1 - fy) * fx;
                (*gx)[xi(y1, x0)] += g0 * fy * (1 - fx);
                (*gx)[xi(y1, x1)] += g0 * fy * fx;
              }
              double v00 = x.at(xi(y0, x0)), v01 = x.at(xi(y0, x1));
              double v10 = x.at(xi(y1, x0)), v11 = x.at(xi(y1, x1));
              if (gy && iny)
                (*gy)[ci] += g0 * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
              if (gc && inx)
                (*gc)[ci] += g0 * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
            }
          }
    });
  }
  return out;
}

// Align-corners=false source grid for integer upscaling.
inline void upsample_grid(int B, int H, int W, int s, DType dt, Tensor& cy,
                          Tensor& cx) {
  int OH = H * s, OW = W * s;
  cy = Tensor({B, OH, OW}, dt);
  cx = Tensor({B, OH, OW}, dt);
  for (int b = 0; b < B; ++b)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        size_t i = (static_cast<size_t>(b) * OH + oh) * OW + ow;
        cy.store(i, (oh + 0.5) / s - 0.5);
        cx.store(i, (ow + 0.5) / s - 0.5);
      }
}

inline Tensor interpolate_bilinear(const Tensor& x, int s) {
  if (s < 1) throw ConfigError("interpolate_bilinear: scale >= 1");
  if (s == 1) return add_scalar(x, 0.0);  // keeps the graph connected
  Tensor cy, cx;
  upsample_grid(x.shape[0], x.shape[2], x.shape[3], s, x.dtype, cy, cx);
  return grid_sample(x, cy, cx);
}

// Inverted dropout; eval mode is identity. Deterministic per rng state.
inline Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng,
                      NormMode mode) {
  if (mode == NormMode::eval || rate <= 0.0) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> mask(x.size());
  double keep = 1.0 - rate;
  for (auto& mv : mask) mv = u(rng) < keep ? 1.0 / keep : 0.0;
  Tensor out(x.shape, x.dtype);
  for (size_t i = 0; i < x.size(); ++i) out.store(i, x.at(i) * mask[i]);
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [x, out, mask, tp]() {
      auto& go = tp->grad_buffer(out);
      auto& gx = tp->grad_buffer(x);
      for (size_t i = 0; i < x.size(); ++i) gx[i] += go[i] * mask[i];
    });
  }
  return out;
}

// ---- label-side helpers (never differentiated) ----

inline Tensor max_pool2d(const Tensor& x, int k) {
  if (x.shape.size() != 4) throw ShapeError("max_pool2d: rank-4 required");
  int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (H % k != 0 || W % k != 0) throw ShapeError("max_pool2d: extent not divisible");
  int OH = H / k, OW = W / k;
  Tensor out({B, C, OH, OW}, x.dtype);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double m = -1e300;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              m = std::max(m, x.at(((static_cast<size_t>(b) * C + c) * H +
                                    oh * k + dy) * W + ow * k + dx));
          out.store(((static_cast<size_t>(b) * C + c) * OH + oh) * OW + ow, m);
        }
  return out;
}

inline Tensor reflect_pad2d(const Tensor& x, int pt, int pb, int pl, int pr) {
  int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  auto refl = [](int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
  };
  Tensor out({B, C, H + pt + pb, W + pl + pr}, x.dtype);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H + pt + pb; ++h)
        for (int w = 0; w < W + pl + pr; ++w)
          out.store(((static_cast<size_t>(b) * C + c) * (H + pt + pb) + h) *
                        (W + pl + pr) + w,
                    x.at(((static_cast<size_t>(b) * C + c) * H + refl(h - pt, H)) *
                             W + refl(w - pl, W)));
  return out;
}

}  // namespace flux
