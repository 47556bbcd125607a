#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "charm/rng.hpp"
#include "charm/tape.hpp"
#include "charm/tensor.hpp"

// Test-side oracles and helpers. The finite-difference checker here is the
// independent gradient oracle: it only ever calls the forward path.

namespace testsup {

using charm::ParamBinder;
using charm::Rng;
using charm::Tape;
using charm::Tensor;
using charm::Value;

inline double rel_err(double a, double b) {
  const double d = std::fabs(a - b);
  const double m = std::max(std::fabs(a), std::fabs(b));
  if (d < 1e-9) return 0.0;  // both effectively zero
  return d / std::max(m, 1e-12);
}

inline Tensor random_tensor(charm::Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Random tensor kept away from relu kinks so finite differences stay valid.
inline Tensor random_tensor_nonsingular(charm::Shape s, Rng& rng) {
  Tensor t(std::move(s));
  for (double& v : t.data) {
    double x = rng.uniform(-1.0, 1.0);
    v = (x >= 0 ? x + 0.05 : x - 0.05);
  }
  return t;
}

// build: (Tape&, ParamBinder&) -> Value (scalar loss). Params are the master
// tensors the binder will see; they are perturbed in place for the FD probes.
struct FdReport {
  double max_rel_err = 0.0;
  long coords_checked = 0;
};

template <typename BuildFn>
double forward_only(BuildFn&& build) {
  Tape tape;
  ParamBinder bind(tape, false);
  Value loss = build(tape, bind);
  return loss.v().data[0];
}

template <typename BuildFn>
FdReport check_gradients(const std::vector<Tensor*>& params, BuildFn&& build, double tol = 1e-4,
                         double h = 1e-5) {
  // analytic pass
  Tape tape;
  ParamBinder bind(tape, true);
  Value loss = build(tape, bind);
  tape.backward(loss.id);
  std::vector<Tensor> analytic;
  for (Tensor* p : params) {
    const Tensor* g = bind.grad_of(*p);
    analytic.push_back(g ? *g : Tensor::zeros(p->shape));
  }

  FdReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    for (long i = 0; i < p->numel(); ++i) {
      const double keep = p->data[i];
      p->data[i] = keep + h;
      const double up = forward_only(build);
      p->data[i] = keep - h;
      const double dn = forward_only(build);
      p->data[i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      const double ad = analytic[pi].data[i];
      const double e = rel_err(ad, fd);
      rep.max_rel_err = std::max(rep.max_rel_err, e);
      ++rep.coords_checked;
      if (e >= tol) return rep;  // fail fast with the offending error recorded
    }
  }
  return rep;
}

}  // namespace testsup
