#pragma once

#include "fluxamba/tensor.hpp"

namespace flux {

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

// Decoupled weight decay: applied to params directly, not through grads.
inline void adamw_step(std::vector<Tensor>& params, const AdamWConfig& cfg,
                       AdamWState& st) {
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i].size(), 0.0);
      st.v[i].assign(params[i].size(), 0.0);
    }
  }
  if (st.m.size() != params.size())
    throw ShapeError("adamw_step: state/param count mismatch");
  st.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, st.step);
  double bc2 = 1.0 - std::pow(cfg.beta2, st.step);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (st.m[i].size() != p.size())
      throw ShapeError("adamw_step: state shape mismatch at param " +
                       std::to_string(i));
    const auto& g = p.grad();
    for (size_t j = 0; j < p.size(); ++j) {
      st.m[i][j] = cfg.beta1 * st.m[i][j] + (1.0 - cfg.beta1) * g[j];
      st.v[i][j] = cfg.beta2 * st.v[i][j] + (1.0 - cfg.beta2) * g[j] * g[j];
      double mhat = st.m[i][j] / bc1;
      double vhat = st.v[i][j] / bc2;
      double upd = p.at(j) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps) -
                   cfg.lr * cfg.weight_decay * p.at(j);
      p.store(j, upd);
    }
  }
}

inline double poly_lr(double base_lr, int epoch, int total_epochs,
                      double power = 0.9) {
  if (epoch < 0 || epoch > total_epochs)
    throw ConfigError("poly_lr: epoch out of range");
  return base_lr * std::pow(1.0 - static_cast<double>(epoch) / total_epochs, power);
}

}  // namespace flux
