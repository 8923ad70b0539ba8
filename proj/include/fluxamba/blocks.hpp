#pragma once

#include "fluxamba/scan.hpp"

namespace flux {

// ---------------------------------------------------------------------------
// ASG: anisotropic strip gating. Two axis-separated descriptor branches are
// fused into a sigmoid gate applied residually.

struct AsgWeights {
  Tensor coord_h, coord_w;  // [C,1,3,1] depthwise 1D kernels
  Tensor strip_h, strip_w;  // [C,1,3,1]
  Tensor gate_w;            // [C,2C,1,1]
  Tensor gate_b;            // [C]

  std::vector<Tensor*> params() {
    return {&coord_h, &coord_w, &strip_h, &strip_w, &gate_w, &gate_b};
  }
};

struct AsgOut {
  Tensor x;     // gated feature map
  Tensor gate;  // [B,C,H,W] in [0,1]
};

inline AsgOut asg_forward(const Tensor& x, const AsgWeights& w) {
  Tensor f_coord = add(strip_pool(x, StripOrient::horizontal, w.coord_h),
                       strip_pool(x, StripOrient::vertical, w.coord_w));
  Tensor f_strip = add(strip_pool(x, StripOrient::horizontal, w.strip_h),
                       strip_pool(x, StripOrient::vertical, w.strip_w));
  Tensor gate = sigmoid(conv2d(concat({f_coord, f_strip}, 1), w.gate_w,
                               &w.gate_b, ConvSpec{}));
  return {add(x, mul(x, gate)), gate};
}

// ---------------------------------------------------------------------------
// PMF: directional flows Y_k are mixed by a Split-Softmax gate computed from
// a local 3x3 projection plus a global GAP projection. K gate channels, one
// per scan route, broadcast over feature channels.

struct PmfWeights {
  Tensor local_w;   // [K,C,3,3]
  Tensor local_b;   // [K]
  Tensor global_w;  // [K,C,1,1]
  Tensor global_b;  // [K]

  std::vector<Tensor*> params() {
    return {&local_w, &local_b, &global_w, &global_b};
  }
};

// Split-Softmax logits -> [B,K,H,W], rows summing to 1 across K.
inline Tensor pmf_gates(const Tensor& x_asg, const PmfWeights& w) {
  ConvSpec local;
  local.pad_h = local.pad_w = 1;
  Tensor m = add(conv2d(x_asg, w.local_w, &w.local_b, local),
                 conv2d(global_avg_pool(x_asg), w.global_w, &w.global_b,
                        ConvSpec{}));
  return softmax(m, 1);
}

inline Tensor pmf_forward(const Tensor& x_asg, const std::vector<Tensor>& flows,
                          const PmfWeights& w) {
  if (flows.empty()) throw ConfigError("pmf_forward: no directional flows");
  Tensor gates = pmf_gates(x_asg, w);
  if (gates.shape[1] != static_cast<int>(flows.size()))
    throw ConfigError("pmf_forward: " + std::to_string(flows.size()) +
                      " flows for " + std::to_string(gates.shape[1]) +
                      " gate channels");
  Tensor out;
  for (size_t k = 0; k < flows.size(); ++k) {
    Tensor term = mul(flows[k], slice(gates, 1, static_cast<int>(k), 1));
    out = k == 0 ? term : add(out, term);
  }
  return out;
}

// ---------------------------------------------------------------------------
// LMR: parallel depthwise dilated 3x3 convs, 1x1 fusion, gated injection
// against the block input.

struct LmrWeights {
  std::vector<int> dilations = {1, 2, 3};
  std::vector<Tensor> dw;  // per rate: [C,1,3,3]
  Tensor proj_w;           // [C, C*|R|, 1, 1]
  Tensor proj_b;           // [C]
  Tensor gate_w;           // [C,C,1,1]
  Tensor gate_b;           // [C]

  std::vector<Tensor*> params() {
    std::vector<Tensor*> p;
    for (auto& t : dw) p.push_back(&t);
    p.insert(p.end(), {&proj_w, &proj_b, &gate_w, &gate_b});
    return p;
  }
};

inline Tensor lmr_forward(const Tensor& x_pmf, const Tensor& x_base,
                          const LmrWeights& w) {
  if (w.dw.size() != w.dilations.size())
    throw ConfigError("lmr_forward: one kernel per dilation rate");
  int C = x_pmf.shape[1];
  std::vector<Tensor> branches;
  for (size_t i = 0; i < w.dilations.size(); ++i) {
    int r = w.dilations[i];
    branches.push_back(conv2d(x_pmf, w.dw[i], nullptr,
                              ConvSpec::uniform(1, r, r, C)));
  }
  Tensor fused = conv2d(concat(branches, 1), w.proj_w, &w.proj_b, ConvSpec{});
  Tensor gate = sigmoid(conv2d(fused, w.gate_w, &w.gate_b, ConvSpec{}));
  return add(mul(add_scalar(neg(gate), 1.0), x_base), mul(gate, fused));
}

// ---------------------------------------------------------------------------
// GTR: pre-norm axial attention along H then W, then an FFN, each residual.

struct GtrWeights {
  int heads = 4;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;  // [C]
  Tensor h_wq, h_wk, h_wv, h_wo;                    // [C,C]
  Tensor w_wq, w_wk, w_wv, w_wo;                    // [C,C]
  Tensor ffn_w1, ffn_b1;                            // [2C,C,1,1], [2C]
  Tensor ffn_w2, ffn_b2;                            // [C,2C,1,1], [C]

  std::vector<Tensor*> params() {
    return {&ln1_g, &ln1_b, &ln2_g, &ln2_b, &ln3_g, &ln3_b,
            &h_wq,  &h_wk,  &h_wv,  &h_wo,  &w_wq,  &w_wk,
            &w_wv,  &w_wo,  &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2};
  }
};

inline Tensor gtr_forward(const Tensor& x_pmf, const Tensor& x_base,
                          const GtrWeights& w) {
  Tensor x_in = add(x_pmf, x_base);
  Tensor x_h = add(multi_head_axial_attention(layer_norm(x_in, {1}, w.ln1_g, w.ln1_b),
                                              AttnAxis::height, w.heads, w.h_wq,
                                              w.h_wk, w.h_wv, w.h_wo),
                   x_in);
  Tensor x_w = add(multi_head_axial_attention(layer_norm(x_h, {1}, w.ln2_g, w.ln2_b),
                                              AttnAxis::width, w.heads, w.w_wq,
                                              w.w_wk, w.w_wv, w.w_wo),
                   x_h);
  Tensor n = layer_norm(x_w, {1}, w.ln3_g, w.ln3_b);
  Tensor ffn = conv2d(gelu(conv2d(n, w.ffn_w1, &w.ffn_b1, ConvSpec{})),
                      w.ffn_w2, &w.ffn_b2, ConvSpec{});
  return add(ffn, x_w);
}

// ---------------------------------------------------------------------------
// HSR: stage dispatch. Early stages refine locally (LMR), late stages
// globally (GTR).

struct HsrWeights {
  LmrWeights lmr;
  GtrWeights gtr;

  std::vector<Tensor*> params(int stage) {
    return stage <= 2 ? lmr.params() : gtr.params();
  }
};

inline Tensor hsr_forward(const Tensor& x_pmf, const Tensor& x_base, int stage,
                          const HsrWeights& w) {
  if (stage < 1 || stage > 4)
    throw ConfigError("hsr_forward: stage must be 1..4, got " +
                      std::to_string(stage));
  return stage <= 2 ? lmr_forward(x_pmf, x_base, w.lmr)
                    : gtr_forward(x_pmf, x_base, w.gtr);
}

// ---------------------------------------------------------------------------
// HFFU: channel excitation plus spatial projection, summed. Deliberately no
// residual term: hffu(0) == 0.

struct HffuWeights {
  Tensor ch_w;  // [C,C,1,1]
  Tensor ch_b;  // [C]
  Tensor sp_w;  // [1,C,1,1]
  Tensor sp_b;  // [1]

  std::vector<Tensor*> params() { return {&ch_w, &ch_b, &sp_w, &sp_b}; }
};

inline Tensor hffu_forward(const Tensor& x, const HffuWeights& w) {
  Tensor g_ch = sigmoid(conv2d(global_avg_pool(x), w.ch_w, &w.ch_b, ConvSpec{}));
  Tensor g_sp = sigmoid(conv2d(x, w.sp_w, &w.sp_b, ConvSpec{}));
  return add(mul(g_ch, x), mul(g_sp, x));
}

// ---------------------------------------------------------------------------
// SFB: the full block. Routes default to the four-direction basis with
// Split-Softmax gating; other strategy mixes average uniformly.

struct SfbConfig {
  bool enable_asg = true;
  bool enable_pmf = true;
  bool enable_hsr = true;
  bool enable_hffu = true;
  int stage = 1;
  std::vector<ScanStrategy> routes = fs2d_directions();
  bool gate_routes = true;  // false: uniform average of route outputs
};

struct SfbWeights {
  AsgWeights asg;
  PmfWeights pmf;
  std::vector<SsmParams> ssm;  // one per route
  HsrWeights hsr;
  HffuWeights hffu;

  std::vector<Tensor*> params(const SfbConfig& cfg) {
    std::vector<Tensor*> p;
    auto append = [&](std::vector<Tensor*> q) {
      p.insert(p.end(), q.begin(), q.end());
    };
    if (cfg.enable_asg) append(asg.params());
    if (cfg.enable_pmf && cfg.gate_routes) append(pmf.params());
    size_t n_ssm = cfg.enable_pmf ? cfg.routes.size() : 1;
    for (size_t k = 0; k < n_ssm && k < ssm.size(); ++k) {
      auto& s = ssm[k];
      append({&s.a_log, &s.d, &s.w_delta, &s.b_delta, &s.w_b, &s.w_c});
    }
    if (cfg.enable_hsr) append(hsr.params(cfg.stage));
    if (cfg.enable_hffu) append(hffu.params());
    return p;
  }
};

inline Tensor sfb_forward(const Tensor& x_base, const SfbConfig& cfg,
                          const SfbWeights& w) {
  Tensor x_asg = cfg.enable_asg ? asg_forward(x_base, w.asg).x : x_base;

  Tensor x_pmf;
  if (cfg.enable_pmf) {
    if (w.ssm.size() < cfg.routes.size())
      throw ConfigError("sfb_forward: SsmParams per route required");
    DirectionalSequences ds =
        fs2d(x_base, {w.ssm.begin(), w.ssm.begin() + cfg.routes.size()},
             cfg.routes);
    if (cfg.gate_routes) {
      x_pmf = pmf_forward(x_asg, ds.outputs, w.pmf);
    } else {
      x_pmf = ds.outputs[0];
      for (size_t k = 1; k < ds.outputs.size(); ++k)
        x_pmf = add(x_pmf, ds.outputs[k]);
      x_pmf = scale(x_pmf, 1.0 / ds.outputs.size());
    }
  } else {
    int H = x_base.shape[2], W = x_base.shape[3];
    ScanRoute r = make_route(ScanStrategy::HRaster, H, W);
    x_pmf = deserialize(selective_scan(serialize(x_base, r), w.ssm.at(0)), r, H, W);
  }

  Tensor x_hsr = cfg.enable_hsr ? hsr_forward(x_pmf, x_base, cfg.stage, w.hsr)
                                : add(x_pmf, x_base);
  return cfg.enable_hffu ? hffu_forward(x_hsr, w.hffu) : x_hsr;
}

}  // namespace flux
