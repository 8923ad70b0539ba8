#pragma once

#include <algorithm>
#include <cmath>

#include "fluxamba/tensor.hpp"

namespace flux {

namespace detail {

// Strides of `in` aligned right against `out`; 0 stride on broadcast dims.
inline std::vector<size_t> bcast_strides(const Shape& in, const Shape& out,
                                         const char* ctx) {
  if (in.size() > out.size())
    throw ShapeError(std::string(ctx) + ": cannot broadcast " + shape_str(in) +
                     " to " + shape_str(out));
  std::vector<size_t> st(out.size(), 0);
  auto in_st = strides_of(in);
  size_t off = out.size() - in.size();
  for (size_t d = 0; d < in.size(); ++d) {
    if (in[d] == out[d + off])
      st[d + off] = in_st[d];
    else if (in[d] == 1)
      st[d + off] = 0;
    else
      throw ShapeError(std::string(ctx) + ": cannot broadcast " + shape_str(in) +
                       " to " + shape_str(out));
  }
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* ctx) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(ctx) + ": incompatible shapes " +
                       shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Walks every flat index of `shape` handing (out_flat, in_a_flat, in_b_flat).
template <class Fn>
inline void for_each_bcast(const Shape& shape, const std::vector<size_t>& sa,
                           const std::vector<size_t>& sb, Fn&& fn) {
  size_t n = numel(shape);
  size_t rank = shape.size();
  std::vector<int> idx(rank, 0);
  size_t ia = 0, ib = 0;
  for (size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < shape[d]) break;
      ia -= static_cast<size_t>(shape[d]) * sa[d];
      ib -= static_cast<size_t>(shape[d]) * sb[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---- elementwise helpers ----

// f(x) -> y with local derivative df(x, y).
template <class F, class DF>
inline Tensor unary_op(const Tensor& x, F f, DF df, const char* name) {
  Tensor out(x.shape, x.dtype);
  for (size_t i = 0; i < x.size(); ++i) out.store(i, f(x.at(i)));
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [x, out, df, tp]() {
      auto& go = tp->grad_buffer(out);
      auto& gx = tp->grad_buffer(x);
      for (size_t i = 0; i < x.size(); ++i)
        gx[i] += go[i] * df(x.at(i), out.at(i));
    });
  }
  (void)name;
  return out;
}

template <class F, class DFA, class DFB>
inline Tensor binary_op(const Tensor& a, const Tensor& b, F f, DFA dfa, DFB dfb,
                        const char* name) {
  Shape os = detail::broadcast_shape(a.shape, b.shape, name);
  auto sa = detail::bcast_strides(a.shape, os, name);
  auto sb = detail::bcast_strides(b.shape, os, name);
  Tensor out(os, promote(a, b));
  detail::for_each_bcast(os, sa, sb, [&](size_t i, size_t ia, size_t ib) {
    out.store(i, f(a.at(ia), b.at(ib)));
  });
  if (grad_enabled({&a, &b})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    bool ta = tp->tracked(a), tb = tp->tracked(b);
    tp->push(out.id(), [a, b, out, os, sa, sb, dfa, dfb, ta, tb, tp]() {
      auto& go = tp->grad_buffer(out);
      std::vector<double>* ga = ta ? &tp->grad_buffer(a) : nullptr;
      std::vector<double>* gb = tb ? &tp->grad_buffer(b) : nullptr;
      detail::for_each_bcast(os, sa, sb, [&](size_t i, size_t ia, size_t ib) {
        if (ga) (*ga)[ia] += go[i] * dfa(a.at(ia), b.at(ib));
        if (gb) (*gb)[ib] += go[i] * dfb(a.at(ia), b.at(ib));
      });
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; },
                   [](double, double) { return 1.0; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; },
                   [](double, double) { return -1.0; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x * y; },
                   [](double, double y) { return y; },
                   [](double x, double) { return x; }, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, [](double x, double y) { return x / y; },
                   [](double, double y) { return 1.0 / y; },
                   [](double x, double y) { return -x / (y * y); }, "div");
}

inline Tensor scale(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return s * v; },
                  [s](double, double) { return s; }, "scale");
}
inline Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(x, [s](double v) { return v + s; },
                  [](double, double) { return 1.0; }, "add_scalar");
}
inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// ---- activations ----

inline Tensor sigmoid(const Tensor& x) {
  return unary_op(x,
                  [](double v) {
                    return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
                  },
                  [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                  [](double v, double) { return v > 0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor softplus(const Tensor& x) {
  return unary_op(x,
                  [](double v) {
                    return v > 30 ? v : std::log1p(std::exp(-std::abs(v))) +
                                            std::max(v, 0.0);
                  },
                  [](double v, double) {
                    return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
                  },
                  "softplus");
}

inline Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(x,
                  [=](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
                  [=](double v, double) {
                    double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    return cdf + v * pdf;
                  },
                  "gelu");
}

inline Tensor tanh_op(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; }, "tanh");
}

inline Tensor exp_op(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; }, "exp");
}

inline Tensor log_op(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; }, "log");
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(x, [=](double v) { return std::min(std::max(v, lo), hi); },
                  [=](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; },
                  "clamp");
}

// ---- reductions ----

inline Tensor sum(const Tensor& x) {
  double s = 0;
  for (size_t i = 0; i < x.size(); ++i) s += x.at(i);
  Tensor out({1}, x.dtype);
  out.store(0, s);
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [x, out, tp]() {
      double g = tp->grad_buffer(out)[0];
      auto& gx = tp->grad_buffer(x);
      for (size_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- softmax ----

inline Tensor softmax(const Tensor& x, int axis) {
  int rank = static_cast<int>(x.shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: bad axis");
  auto st = strides_of(x.shape);
  size_t n = x.size();
  size_t len = static_cast<size_t>(x.shape[axis]);
  size_t stride = st[axis];
  size_t inner = stride;
  size_t outer = n / (len * inner);
  Tensor out(x.shape, x.dtype);
  for (size_t o = 0; o < outer; ++o)
    for (size_t in = 0; in < inner; ++in) {
      size_t base = o * len * inner + in;
      double m = -1e300;
      for (size_t k = 0; k < len; ++k) m = std::max(m, x.at(base + k * stride));
      double z = 0;
      for (size_t k = 0; k < len; ++k) z += std::exp(x.at(base + k * stride) - m);
      for (size_t k = 0; k < len; ++k)
        out.store(base + k * stride, std::exp(x.at(base + k * stride) - m) / z);
    }
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [x, out, outer, inner, len, stride, tp]() {
      auto& go = tp->grad_buffer(out);
      auto& gx = tp->grad_buffer(x);
      for (size_t o = 0; o < outer; ++o)
        for (size_t in = 0; in < inner; ++in) {
          size_t base = o * len * inner + in;
          double dot = 0;
          for (size_t k = 0; k < len; ++k)
            dot += go[base + k * stride] * out.at(base + k * stride);
          for (size_t k = 0; k < len; ++k) {
            size_t i = base + k * stride;
            gx[i] += out.at(i) * (go[i] - dot);
          }
        }
    });
  }
  return out;
}

// ---- shape ops ----

inline Tensor reshape(const Tensor& x, Shape s) {
  if (numel(s) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape) + " to " + shape_str(s));
  Tensor out(std::move(s), x.dtype);
  for (size_t i = 0; i < x.size(); ++i) out.store(i, x.at(i));
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [x, out, tp]() {
      auto& go = tp->grad_buffer(out);
      auto& gx = tp->grad_buffer(x);
      for (size_t i = 0; i < x.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  size_t rank = x.shape.size();
  if (perm.size() != rank) throw ShapeError("permute: rank mismatch");
  Shape os(rank);
  for (size_t i = 0; i < rank; ++i) os[i] = x.shape[perm[i]];
  auto xs = strides_of(x.shape);
  std::vector<size_t> src_stride(rank);
  for (size_t i = 0; i < rank; ++i) src_stride[i] = xs[perm[i]];
  Tensor out(os, x.dtype);
  size_t n = x.size();
  std::vector<int> idx(rank, 0);
  std::vector<size_t> mapping(n);
  size_t src = 0;
  for (size_t i = 0; i < n; ++i) {
    mapping[i] = src;
    out.store(i, x.at(src));
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < os[d]) break;
      src -= static_cast<size_t>(os[d]) * src_stride[d];
      idx[d] = 0;
    }
  }
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [x, out, mapping, tp]() {
      auto& go = tp->grad_buffer(out);
      auto& gx = tp->grad_buffer(x);
      for (size_t i = 0; i < mapping.size(); ++i) gx[mapping[i]] += go[i];
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input");
  int rank = static_cast<int>(xs[0].shape.size());
  if (axis < 0) axis += rank;
  Shape os = xs[0].shape;
  os[axis] = 0;
  DType dt = xs[0].dtype;
  for (const auto& t : xs) {
    for (int d = 0; d < rank; ++d)
      if (d != axis && t.shape[d] != xs[0].shape[d])
        throw ShapeError("concat: mismatched shape on axis " + std::to_string(d));
    os[axis] += t.shape[axis];
    if (t.dtype == DType::f64) dt = DType::f64;
  }
  Tensor out(os, dt);
  auto ost = strides_of(os);
  size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(os[d]);
  size_t inner = ost[axis];
  size_t off = 0;
  std::vector<size_t> offsets;
  for (const auto& t : xs) {
    offsets.push_back(off);
    size_t chunk = static_cast<size_t>(t.shape[axis]) * inner;
    for (size_t o = 0; o < outer; ++o)
      for (size_t i = 0; i < chunk; ++i)
        out.store(o * static_cast<size_t>(os[axis]) * inner + off + i,
                  t.at(o * chunk + i));
    off += chunk;
  }
  std::vector<const Tensor*> ptrs;
  for (const auto& t : xs) ptrs.push_back(&t);
  bool rec = false;
  {
    Tape* tp = Tape::current();
    if (tp)
      for (const auto& t : xs)
        if (tp->tracked(t)) {
          rec = true;
          tp->register_leaf(t);
        }
  }
  if (rec) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    auto xs_copy = xs;
    size_t axis_total = static_cast<size_t>(os[axis]);
    tp->push(out.id(), [xs_copy, out, offsets, outer, inner, axis_total, tp]() {
      auto& go = tp->grad_buffer(out);
      for (size_t k = 0; k < xs_copy.size(); ++k) {
        if (!tp->tracked(xs_copy[k])) continue;
        auto& gx = tp->grad_buffer(xs_copy[k]);
        size_t chunk = gx.size() / outer;
        for (size_t o = 0; o < outer; ++o)
          for (size_t i = 0; i < chunk; ++i)
            gx[o * chunk + i] += go[o * axis_total * inner + offsets[k] + i];
      }
    });
  }
  return out;
}

inline Tensor slice(const Tensor& x, int axis, int start, int len) {
  int rank = static_cast<int>(x.shape.size());
  if (axis < 0) axis += rank;
  if (start < 0 || start + len > x.shape[axis])
    throw ShapeError("slice: out of range on axis " + std::to_string(axis));
  Shape os = x.shape;
  os[axis] = len;
  auto xst = strides_of(x.shape);
  size_t inner = xst[axis];
  size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(x.shape[d]);
  size_t in_chunk = static_cast<size_t>(x.shape[axis]) * inner;
  size_t out_chunk = static_cast<size_t>(len) * inner;
  Tensor out(os, x.dtype);
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < out_chunk; ++i)
      out.store(o * out_chunk + i,
                x.at(o * in_chunk + static_cast<size_t>(start) * inner + i));
  if (grad_enabled({&x})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    tp->push(out.id(), [x, out, outer, inner, in_chunk, out_chunk, start, tp]() {
      auto& go = tp->grad_buffer(out);
      auto& gx = tp->grad_buffer(x);
      for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < out_chunk; ++i)
          gx[o * in_chunk + static_cast<size_t>(start) * inner + i] +=
              go[o * out_chunk + i];
    });
  }
  return out;
}

// ---- matmul ----

// A [N,M,K] x B [N,K,P] -> [N,M,P]; rank-2 operands are treated as a single
// batch, and a rank-2 B is broadcast across A's batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  auto as = a.shape, bs = b.shape;
  bool a2 = as.size() == 2, b2 = bs.size() == 2;
  if ((as.size() != 2 && as.size() != 3) || (bs.size() != 2 && bs.size() != 3))
    throw ShapeError("matmul: rank must be 2 or 3");
  int N = a2 ? 1 : as[0];
  int M = a2 ? as[0] : as[1];
  int K = a2 ? as[1] : as[2];
  int Kb = b2 ? bs[0] : bs[1];
  int P = b2 ? bs[1] : bs[2];
  int Nb = b2 ? N : bs[0];
  if (K != Kb || (!b2 && Nb != N))
    throw ShapeError("matmul: " + shape_str(as) + " x " + shape_str(bs));
  Shape os = a2 && b2 ? Shape{M, P} : Shape{N, M, P};
  Tensor out(os, promote(a, b));
  auto cell = [&](const Tensor& t, int n, int r, int c, int rows, int cols) {
    (void)rows;
    return t.at((static_cast<size_t>(n) * rows + r) * cols + c);
  };
  for (int n = 0; n < N; ++n)
    for (int m = 0; m < M; ++m)
      for (int p = 0; p < P; ++p) {
        double s = 0;
        for (int k = 0; k < K; ++k)
          s += cell(a, a2 ? 0 : n, m, k, M, K) * cell(b, b2 ? 0 : n, k, p, K, P);
        out.store((static_cast<size_t>(n) * M + m) * P + p, s);
      }
  count_flops_add(2ull * N * M * P * K);
  if (grad_enabled({&a, &b})) {
    Tape* tp = Tape::current();
    tp->mark_output(out);
    bool ta = tp->tracked(a), tb = tp->tracked(b);
    tp->push(out.id(), [=]() {
      auto& go = tp->grad_buffer(out);
      std::vector<double>* ga = ta ? &tp->grad_buffer(a) : nullptr;
      std::vector<double>* gb = tb ? &tp->grad_buffer(b) : nullptr;
      for (int n = 0; n < N; ++n)
        for (int m = 0; m < M; ++m)
          for (int p = 0; p < P; ++p) {
            double g = go[(static_cast<size_t>(n) * M + m) * P + p];
            for (int k = 0; k < K; ++k) {
              size_t ai = ((a2 ? 0 : static_cast<size_t>(n)) * M + m) * K + k;
              size_t bi = ((b2 ? 0 : static_cast<size_t>(n)) * K + k) * P + p;
              if (ga) (*ga)[ai] += g * b.at(bi);
              if (gb) (*gb)[bi] += g * a.at(ai);
            }
          }
    });
  }
  return out;
}

inline Tensor transpose_last2(const Tensor& x) {
  int rank = static_cast<int>(x.shape.size());
  std::vector<int> perm(rank);
  for (int i = 0; i < rank; ++i) perm[i] = i;
  std::swap(perm[rank - 1], perm[rank - 2]);
  return permute(x, perm);
}

}  // namespace flux
