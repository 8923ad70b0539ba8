#pragma once

#include "fluxamba/nn.hpp"

namespace flux {

struct LossWeights {
  double lambda_bce = 0.3;
  double lambda_dice = 0.4;
  double lambda_b = 0.2;
  double w_pos = 5.0;
  double eps = 1.0;  // Dice smoothing
};

constexpr double kProbClamp = 1e-7;

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* ctx) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(ctx) + ": " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

// BCE with a positive-class weight; w_pos = 1 is plain BCE.
inline Tensor weighted_bce(const Tensor& p, const Tensor& y, double w_pos) {
  check_same_shape(p, y, "bce");
  Tensor pc = clamp(p, kProbClamp, 1.0 - kProbClamp);
  Tensor pos = scale(mul(y, log_op(pc)), w_pos);
  Tensor neg_t = mul(add_scalar(neg(y), 1.0), log_op(add_scalar(neg(pc), 1.0)));
  return neg(mean(add(pos, neg_t)));
}
}  // namespace detail

inline Tensor wbce(const Tensor& p, const Tensor& y, double w_pos = 5.0) {
  return detail::weighted_bce(p, y, w_pos);
}

inline Tensor soft_dice(const Tensor& p, const Tensor& y, double eps = 1.0) {
  detail::check_same_shape(p, y, "soft_dice");
  Tensor inter = sum(mul(p, y));
  Tensor denom = add(sum(p), sum(y));
  Tensor ratio = div(add_scalar(scale(inter, 2.0), eps), add_scalar(denom, eps));
  return add_scalar(neg(ratio), 1.0);
}

// Morphological gradient with a 3x3 square element: dilate(y) - erode(y).
// Out-of-bounds neighbors are ignored (replicate-border semantics). Label
// side only; never differentiated.
inline Tensor boundary_gt(const Tensor& y) {
  if (y.shape.size() != 4) throw ShapeError("boundary_gt: rank-4 required");
  int B = y.shape[0], C = y.shape[1], H = y.shape[2], W = y.shape[3];
  Tensor out(y.shape, y.dtype);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          double mx = 0.0, mn = 1.0;
          for (int dh = -1; dh <= 1; ++dh)
            for (int dw = -1; dw <= 1; ++dw) {
              int hh = h + dh, ww = w + dw;
              if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
              double v = y.at(((static_cast<size_t>(b) * C + c) * H + hh) * W + ww);
              mx = std::max(mx, v);
              mn = std::min(mn, v);
            }
          out.store(((static_cast<size_t>(b) * C + c) * H + h) * W + w, mx - mn);
        }
  return out;
}

// Plain BCE between the predicted boundary map and the morphological
// gradient of the max-pool-downsampled mask.
inline Tensor boundary_loss(const Tensor& m_bound, const Tensor& y) {
  if (m_bound.shape.size() != 4 || y.shape.size() != 4)
    throw ShapeError("boundary_loss: rank-4 required");
  int k = y.shape[2] / m_bound.shape[2];
  if (k < 1 || y.shape[2] != m_bound.shape[2] * k ||
      y.shape[3] != m_bound.shape[3] * k)
    throw ShapeError("boundary_loss: mask not an integer multiple of map");
  Tensor yd = k == 1 ? y : max_pool2d(y, k);
  return detail::weighted_bce(m_bound, boundary_gt(yd), 1.0);
}

struct LossBreakdown {
  Tensor total;
  Tensor bce;
  Tensor dice;
  Tensor boundary;
};

inline LossBreakdown total_loss(const Tensor& logits, const Tensor& m_bound,
                                const Tensor& y, const LossWeights& w) {
  Tensor p = sigmoid(logits);
  LossBreakdown out;
  out.bce = wbce(p, y, w.w_pos);
  out.dice = soft_dice(p, y, w.eps);
  out.boundary = boundary_loss(m_bound, y);
  out.total = add(add(scale(out.bce, w.lambda_bce), scale(out.dice, w.lambda_dice)),
                  scale(out.boundary, w.lambda_b));
  return out;
}

}  // namespace flux
