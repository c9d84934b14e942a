#pragma once

// Plain SGD (no momentum) and Adam, both with weight decay added to the
// gradient before any moment accumulation. Only trainable non-buffer tensors
// are touched; non-finite gradients abort with the parameter name.

#include <cmath>
#include <cstdint>
#include <vector>

#include "plab/model.hpp"

namespace plab {

inline double lr_at(int epoch, double lr0, double decay) {
  require(epoch >= 0, "lr_at: negative epoch");
  require(lr0 > 0 && decay > 0, "lr_at: rate and decay must be positive");
  return lr0 * std::pow(decay, epoch);
}

namespace detail {
inline void check_grad_finite(const ParamInfo& p) {
  for (double g : p.tensor->grad)
    if (!std::isfinite(g))
      fail(msg("non-finite gradient in parameter '", p.name, "'"));
}
}  // namespace detail

// w <- w - lr * (g + wd * w)
inline void sgd_step(ModelState& st, double lr, double weight_decay) {
  for (ParamInfo& p : st.params) {
    if (!p.trainable || p.buffer || !p.tensor->has_grad()) continue;
    detail::check_grad_finite(p);
    double* w = p.tensor->values.data();
    const double* g = p.tensor->grad.data();
    const std::size_t n = p.tensor->values.size();
    for (std::size_t i = 0; i < n; ++i)
      w[i] -= lr * (g[i] + weight_decay * w[i]);
  }
}

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;
  // Parallel to ModelState::params; empty slots for buffers/frozen tensors.
  std::vector<std::vector<double>> m, v;
};

inline AdamState make_adam_state(const ModelState& st) {
  AdamState as;
  as.m.resize(st.params.size());
  as.v.resize(st.params.size());
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    const ParamInfo& p = st.params[i];
    if (!p.trainable || p.buffer) continue;
    as.m[i].assign(p.tensor->values.size(), 0.0);
    as.v[i].assign(p.tensor->values.size(), 0.0);
  }
  return as;
}

inline void adam_step(ModelState& st, AdamState& as, double lr,
                      double weight_decay) {
  require(as.m.size() == st.params.size(),
          "adam_step: state does not match model");
  ++as.t;
  const double bc1 = 1.0 - std::pow(as.beta1, double(as.t));
  const double bc2 = 1.0 - std::pow(as.beta2, double(as.t));
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    ParamInfo& p = st.params[i];
    if (!p.trainable || p.buffer || !p.tensor->has_grad()) continue;
    detail::check_grad_finite(p);
    require(as.m[i].size() == p.tensor->values.size(),
            msg("adam_step: no moments for '", p.name,
                "' (was it unfrozen after state creation?)"));
    double* w = p.tensor->values.data();
    const double* g = p.tensor->grad.data();
    double* m = as.m[i].data();
    double* v = as.v[i].data();
    const std::size_t n = p.tensor->values.size();
    for (std::size_t k = 0; k < n; ++k) {
      const double gk = g[k] + weight_decay * w[k];
      m[k] = as.beta1 * m[k] + (1.0 - as.beta1) * gk;
      v[k] = as.beta2 * v[k] + (1.0 - as.beta2) * gk * gk;
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + as.eps);
    }
  }
}

}  // namespace plab
