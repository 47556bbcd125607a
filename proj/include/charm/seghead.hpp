#pragma once

#include <array>
#include <string>

#include "charm/nn.hpp"

// Decoder shared by the CoL and InE predictions: per-scale pointwise
// projection to a common width, bilinear upsampling to stride-4 resolution,
// concat, pointwise fusion, classification, then x4 upsampling.

namespace charm {

struct SegHeadParams {
  std::array<int, 4> in_channels{};
  int dec_channels = 64;
  int num_classes = 0;
  std::array<ConvParams, 4> proj;
  ConvParams fuse;      // 4*C_dec -> C_dec
  ConvParams classify;  // C_dec -> K

  void init(const std::array<int, 4>& channels, int c_dec, int K, Rng& rng) {
    in_channels = channels;
    dec_channels = c_dec;
    num_classes = K;
    for (int i = 0; i < 4; ++i) proj[i].init(c_dec, channels[i], 1, 1, 1, 0, 1, rng);
    fuse.init(c_dec, 4 * c_dec, 1, 1, 1, 0, 1, rng);
    classify.init(K, c_dec, 1, 1, 1, 0, 1, rng);
  }
  void register_params(ParamRegistry& reg, const std::string& p) {
    for (int i = 0; i < 4; ++i) proj[i].register_params(reg, p + ".proj" + std::to_string(i));
    fuse.register_params(reg, p + ".fuse");
    classify.register_params(reg, p + ".cls");
  }
};

inline Value decode(ParamBinder& P, const std::array<Value, 4>& levels, const SegHeadParams& head,
                    int out_h, int out_w) {
  std::vector<Value> up;
  for (int i = 0; i < 4; ++i) {
    const Shape& s = levels[i].shape();
    if (s.size() != 3 || s[0] != head.in_channels[i])
      throw std::invalid_argument("decode: level " + std::to_string(i) + " channel mismatch");
    if (s[1] != out_h / (4 << i) || s[2] != out_w / (4 << i))
      throw std::invalid_argument("decode: level " + std::to_string(i) + " spatial mismatch");
    Value p = apply_conv(P, levels[i], head.proj[i]);
    up.push_back(upsample_bilinear(p, 1 << i));  // to stride-4 resolution
  }
  Value x = concat(up, 0);
  x = apply_conv(P, x, head.fuse);
  x = relu(x);
  x = apply_conv(P, x, head.classify);
  return upsample_bilinear(x, 4);
}

}  // namespace charm
