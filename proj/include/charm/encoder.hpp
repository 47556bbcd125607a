#pragma once

#include <array>
#include <map>
#include <vector>

#include "charm/nn.hpp"

// Shared-weight hierarchical encoder: 4 stages at strides 4/8/16/32, each a
// strided patch-embedding convolution followed by D residual blocks
// (depthwise 3x3 -> pointwise -> layer norm -> relu). One parameter set
// serves every modality.

namespace charm {

struct EncoderConfig {
  int img_channels = 3;
  std::array<int, 4> channels = {16, 32, 64, 128};
  int blocks_per_stage = 2;
};

struct EncoderBlockParams {
  ConvParams dw, pw;
  LayerNormParams ln;

  void init(int C, Rng& rng) {
    dw.init(C, 1, 3, 3, 1, 1, C, rng);
    pw.init(C, C, 1, 1, 1, 0, 1, rng);
    ln.init(C);
  }
  void register_params(ParamRegistry& reg, const std::string& p) {
    dw.register_params(reg, p + ".dw");
    pw.register_params(reg, p + ".pw");
    ln.register_params(reg, p + ".ln");
  }
};

struct EncoderStageParams {
  ConvParams patch;
  std::vector<EncoderBlockParams> blocks;

  void init(int cin, int cout, int patch_k, int n_blocks, Rng& rng) {
    patch.init(cout, cin, patch_k, patch_k, patch_k, 0, 1, rng);
    blocks.resize(n_blocks);
    for (auto& b : blocks) b.init(cout, rng);
  }
  void register_params(ParamRegistry& reg, const std::string& p) {
    patch.register_params(reg, p + ".patch");
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(reg, p + ".blk" + std::to_string(i));
  }
};

struct EncoderParams {
  EncoderConfig cfg;
  std::array<EncoderStageParams, 4> stages;

  void init(const EncoderConfig& c, Rng& rng) {
    cfg = c;
    stages[0].init(c.img_channels, c.channels[0], 4, c.blocks_per_stage, rng);
    for (int i = 1; i < 4; ++i)
      stages[i].init(c.channels[i - 1], c.channels[i], 2, c.blocks_per_stage, rng);
  }
  void register_params(ParamRegistry& reg, const std::string& p) {
    for (int i = 0; i < 4; ++i) stages[i].register_params(reg, p + ".stage" + std::to_string(i));
  }
};

struct FeaturePyramid {
  std::array<Value, 4> levels;  // strides 4, 8, 16, 32
};

inline Value encoder_block_forward(ParamBinder& P, Value x, const EncoderBlockParams& b) {
  Value t = apply_conv(P, x, b.dw);
  t = apply_conv(P, t, b.pw);
  t = apply_ln(P, t, b.ln);
  t = relu(t);
  return add(x, t);
}

inline FeaturePyramid encode(ParamBinder& P, Value image, const EncoderParams& params) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != params.cfg.img_channels)
    throw std::invalid_argument("encode: image channel count mismatch");
  if (s[1] % 32 != 0 || s[2] % 32 != 0)
    throw std::invalid_argument("encode: spatial size must be divisible by 32");
  FeaturePyramid pyr;
  Value x = image;
  for (int i = 0; i < 4; ++i) {
    x = apply_conv(P, x, params.stages[i].patch);
    for (const auto& b : params.stages[i].blocks) x = encoder_block_forward(P, x, b);
    pyr.levels[i] = x;
  }
  return pyr;
}

// Per-modality encoding; packing into one batch is an efficiency detail, the
// semantics are exactly encode() per modality.
inline std::map<int, FeaturePyramid> encode_batch(ParamBinder& P, const std::map<int, Value>& images,
                                                  const EncoderParams& params) {
  if (images.empty()) throw std::invalid_argument("encode_batch: empty modality set");
  std::map<int, FeaturePyramid> out;
  for (const auto& [m, img] : images) out.emplace(m, encode(P, img, params));
  return out;
}

}  // namespace charm
