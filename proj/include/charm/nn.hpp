#pragma once

#include <string>

#include "charm/ops.hpp"
#include "charm/optimizer.hpp"
#include "charm/rng.hpp"

namespace charm {

struct ConvParams {
  Tensor w;  // [Cout, Cin/groups, kh, kw]
  Tensor b;  // [Cout]
  int stride = 1;
  int pad = 0;
  int groups = 1;

  void init(int cout, int cin_per_group, int kh, int kw, int stride_, int pad_, int groups_,
            Rng& rng) {
    stride = stride_;
    pad = pad_;
    groups = groups_;
    w = Tensor({cout, cin_per_group, kh, kw});
    const double std = std::sqrt(2.0 / ((double)cin_per_group * kh * kw));
    for (double& v : w.data) v = rng.normal() * std;
    b = Tensor::zeros({cout});
  }

  void register_params(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".w", &w);
    reg.add(prefix + ".b", &b);
  }
};

inline Value apply_conv(ParamBinder& P, Value x, const ConvParams& c) {
  return conv2d(x, P(c.w), P(c.b), c.stride, c.pad, c.groups);
}

struct LayerNormParams {
  Tensor gamma, beta;

  void init(int C) {
    gamma = Tensor::full({C}, 1.0);
    beta = Tensor::zeros({C});
  }
  void register_params(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".g", &gamma);
    reg.add(prefix + ".b", &beta);
  }
};

inline Value apply_ln(ParamBinder& P, Value x, const LayerNormParams& n) {
  return layer_norm_chan(x, P(n.gamma), P(n.beta));
}

// Xavier-uniform square projection matrix [in, out]
inline Tensor linear_weight(int in, int out, Rng& rng) {
  Tensor w({in, out});
  const double lim = std::sqrt(6.0 / (double)(in + out));
  for (double& v : w.data) v = rng.uniform(-lim, lim);
  return w;
}

}  // namespace charm
