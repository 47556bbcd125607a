#pragma once

#include <map>
#include <string>
#include <vector>

#include "charm/tensor.hpp"

namespace charm {

// Named parameter registry. Modules register their tensors under a stable
// hierarchical name; order of insertion is the serialization order.
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor*>> items;

  void add(const std::string& name, Tensor* t) {
    for (auto& [n, _] : items)
      if (n == name) throw std::logic_error("param registered twice: " + name);
    items.emplace_back(name, t);
  }

  long total_scalars() const {
    long n = 0;
    for (auto& [_, t] : items) n += t->numel();
    return n;
  }
};

struct OptimizerState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::map<std::string, Tensor> m1, m2;  // first/second moment, keyed by name
};

// Bias-corrected Adam over the registry. Parameters with no gradient entry
// (not reached by the tape) are left untouched, as are their moments.
inline void adam_step(ParamRegistry& params, const std::map<std::string, Tensor>& grads,
                      OptimizerState& st) {
  if (st.lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
  st.step += 1;
  const double c1 = 1.0 - std::pow(st.beta1, (double)st.step);
  const double c2 = 1.0 - std::pow(st.beta2, (double)st.step);
  for (auto& [name, p] : params.items) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    if (!g.same_shape(*p))
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
    Tensor& m = st.m1.try_emplace(name, Tensor::zeros(p->shape)).first->second;
    Tensor& v = st.m2.try_emplace(name, Tensor::zeros(p->shape)).first->second;
    for (long i = 0; i < p->numel(); ++i) {
      const double gi = g.data[i];
      m.data[i] = st.beta1 * m.data[i] + (1.0 - st.beta1) * gi;
      v.data[i] = st.beta2 * v.data[i] + (1.0 - st.beta2) * gi * gi;
      const double mh = m.data[i] / c1;
      const double vh = v.data[i] / c2;
      p->data[i] -= st.lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

}  // namespace charm
