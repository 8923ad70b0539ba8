#pragma once

#include "fluxamba/nn.hpp"

namespace flux {

// ---------------------------------------------------------------------------
// ScaleGate: squeeze-excitation style channel gate, bottleneck ratio 4.

struct ScaleGateWeights {
  Tensor w1, b1;  // [C/4,C,1,1], [C/4]
  Tensor w2, b2;  // [C,C/4,1,1], [C]

  std::vector<Tensor*> params() { return {&w1, &b1, &w2, &b2}; }
};

// -> [B,C,1,1] in (0,1), broadcastable over the spatial axes.
inline Tensor scale_gate(const Tensor& f, const ScaleGateWeights& w) {
  Tensor h = relu(conv2d(global_avg_pool(f), w.w1, &w.b1, ConvSpec{}));
  return sigmoid(conv2d(h, w.w2, &w.b2, ConvSpec{}));
}

// ---------------------------------------------------------------------------
// DySample: content-aware upsampling. A 1x1 conv predicts 2*s*s offset
// channels (y block then x block, sub-pixel order sy*s+sx); offsets are
// 0.25*tanh-bounded and added to the bilinear base grid in input pixel
// space. Zero offsets reproduce interpolate_bilinear exactly.

enum class UpsampleMode { dynamic, bilinear };

struct DySampleWeights {
  Tensor off_w;  // [2*s*s, C, 1, 1]
  Tensor off_b;  // [2*s*s]

  std::vector<Tensor*> params() { return {&off_w, &off_b}; }
};

inline Tensor dyn_upsample(const Tensor& f, int s, const DySampleWeights& w,
                           UpsampleMode mode) {
  if (s != 1 && s != 2 && s != 4 && s != 8)
    throw ConfigError("dyn_upsample: scale must be 1,2,4 or 8, got " +
                      std::to_string(s));
  if (mode == UpsampleMode::bilinear) return interpolate_bilinear(f, s);
  int B = f.shape[0], H = f.shape[2], W = f.shape[3];
  if (w.off_w.shape[0] != 2 * s * s)
    throw ShapeError("dyn_upsample: offset conv must have 2*s*s outputs");
  Tensor off = scale(tanh_op(conv2d(f, w.off_w, &w.off_b, ConvSpec{})), 0.25);
  // [B,2*s*s,H,W] -> [B,2,sy,sx,H,W] -> [B,2,H,sy,W,sx] -> [B,2,OH,OW]
  off = reshape(off, {B, 2, s, s, H, W});
  off = permute(off, {0, 1, 4, 2, 5, 3});
  off = reshape(off, {B, 2, H * s, W * s});
  Tensor oy = reshape(slice(off, 1, 0, 1), {B, H * s, W * s});
  Tensor ox = reshape(slice(off, 1, 1, 1), {B, H * s, W * s});
  Tensor cy, cx;
  upsample_grid(B, H, W, s, f.dtype, cy, cx);
  return grid_sample(f, add(cy, oy), add(cx, ox));
}

// ---------------------------------------------------------------------------
// BMF head: align each stage to H/4 at a shared width, gate, sum, inject a
// boundary-modulated residual from stage 1, then project to logits at full
// resolution.

struct ConvBnHead {
  Tensor conv_w, conv_b;      // [Ce,Ce,3,3], [Ce]
  Tensor bn_g, bn_b;          // [Ce]
  Tensor bn_rm, bn_rv;        // running stats, not trained
  Tensor out_w, out_b;        // [1,Ce,1,1], [1]

  std::vector<Tensor*> params() {
    return {&conv_w, &conv_b, &bn_g, &bn_b, &out_w, &out_b};
  }
};

struct BmfWeights {
  std::vector<Tensor> mlp_w, mlp_b;       // per stage: [Ce,Cs,1,1], [Ce]
  std::vector<ScaleGateWeights> gates;    // per stage, on Ce
  std::vector<DySampleWeights> dysample;  // per stage, scale 1/2/4/8
  Tensor proj_w, proj_b;                  // [Ce,Ce,1,1], [Ce]
  ConvBnHead boundary;
  ConvBnHead seg;
  double dropout_rate = 0.1;

  std::vector<Tensor*> params() {
    std::vector<Tensor*> p;
    for (size_t s = 0; s < mlp_w.size(); ++s) {
      p.push_back(&mlp_w[s]);
      p.push_back(&mlp_b[s]);
      auto g = gates[s].params();
      p.insert(p.end(), g.begin(), g.end());
      auto d = dysample[s].params();
      p.insert(p.end(), d.begin(), d.end());
    }
    p.insert(p.end(), {&proj_w, &proj_b});
    auto b = boundary.params();
    p.insert(p.end(), b.begin(), b.end());
    auto s2 = seg.params();
    p.insert(p.end(), s2.begin(), s2.end());
    return p;
  }
};

struct BmfOut {
  Tensor m_bound;  // [B,1,H/4,W/4] in (0,1)
  Tensor fused;    // [B,Ce,H/4,W/4]
  Tensor logits;   // [B,1,H,W]
};

namespace detail {
inline Tensor conv_bn_relu(const Tensor& x, ConvBnHead& h, NormMode mode) {
  ConvSpec pad1;
  pad1.pad_h = pad1.pad_w = 1;
  Tensor y = conv2d(x, h.conv_w, &h.conv_b, pad1);
  y = batch_norm(y, h.bn_g, h.bn_b, h.bn_rm, h.bn_rv, mode);
  return relu(y);
}
}  // namespace detail

inline BmfOut bmf_forward(const std::vector<Tensor>& stages, BmfWeights& w,
                          NormMode mode, std::mt19937_64& rng,
                          double lambda = 1.0) {
  if (stages.size() != 4) throw ShapeError("bmf_forward: four stages required");
  int H4 = stages[0].shape[2], W4 = stages[0].shape[3];
  for (int s = 0; s < 4; ++s) {
    int scale = 1 << s;
    if (stages[s].shape[2] * scale != H4 || stages[s].shape[3] * scale != W4)
      throw ShapeError("bmf_forward: stage " + std::to_string(s + 1) +
                       " resolution mismatch");
  }
  std::vector<Tensor> aligned;
  for (int s = 0; s < 4; ++s) {
    Tensor f = conv2d(stages[s], w.mlp_w[s], &w.mlp_b[s], ConvSpec{});
    f = dyn_upsample(f, 1 << s, w.dysample[s], UpsampleMode::dynamic);
    aligned.push_back(mul(f, scale_gate(f, w.gates[s])));
  }
  Tensor f_sum = aligned[0];
  for (int s = 1; s < 4; ++s) f_sum = add(f_sum, aligned[s]);

  Tensor m_bound = sigmoid(conv2d(detail::conv_bn_relu(aligned[0], w.boundary, mode),
                                  w.boundary.out_w, &w.boundary.out_b, ConvSpec{}));
  Tensor proj = conv2d(aligned[0], w.proj_w, &w.proj_b, ConvSpec{});
  Tensor fused = add(f_sum, scale(mul(proj, m_bound), lambda));

  Tensor y = detail::conv_bn_relu(fused, w.seg, mode);
  y = dropout(y, w.dropout_rate, rng, mode);
  y = conv2d(y, w.seg.out_w, &w.seg.out_b, ConvSpec{});
  return {m_bound, fused, interpolate_bilinear(y, 4)};
}

}  // namespace flux
