#pragma once

#include <memory>
#include <string>
#include <vector>

#include "charm/mpu.hpp"
#include "charm/nn.hpp"

// CoL / InE pathway machinery: Semantic Projectors, Robustness Evaluator,
// robustness-weighted initialization, modality reassembly, SoftMin sampling,
// and the ablation fusions.

namespace charm {

// Modality-specific projector: depthwise 11x11 -> 7x7 -> 3x3 (same padding,
// relu between layers) then a 1x1 pointwise, channel-preserving.
struct SpParams {
  ConvParams dw11, dw7, dw3, pw;

  void init(int C, Rng& rng) {
    dw11.init(C, 1, 11, 11, 1, 5, C, rng);
    dw7.init(C, 1, 7, 7, 1, 3, C, rng);
    dw3.init(C, 1, 3, 3, 1, 1, C, rng);
    pw.init(C, C, 1, 1, 1, 0, 1, rng);
  }
  void register_params(ParamRegistry& reg, const std::string& p) {
    dw11.register_params(reg, p + ".dw11");
    dw7.register_params(reg, p + ".dw7");
    dw3.register_params(reg, p + ".dw3");
    pw.register_params(reg, p + ".pw");
  }
};

inline Value semantic_project(ParamBinder& P, Value f, const SpParams& sp) {
  Value x = apply_conv(P, f, sp.dw11);
  x = relu(x);
  x = apply_conv(P, x, sp.dw7);
  x = relu(x);
  x = apply_conv(P, x, sp.dw3);
  x = relu(x);
  return apply_conv(P, x, sp.pw);
}

// Robustness Evaluator: one pointwise conv shared across modalities per
// scale. Raw per-modality scores are normalized per pixel with a softmax
// across the available modality set, so the maps form a probability simplex
// and Eq. 4 stays a convex combination.
struct ReParams {
  ConvParams pw;  // C -> 1

  void init(int C, Rng& rng) { pw.init(1, C, 1, 1, 1, 0, 1, rng); }
  void register_params(ParamRegistry& reg, const std::string& p) { pw.register_params(reg, p); }
};

inline std::vector<Value> robustness(ParamBinder& P, const std::vector<ModalityFeature>& feats,
                                     const ReParams& re) {
  if (feats.empty()) throw std::invalid_argument("robustness: empty modality set");
  const int Mc = (int)feats.size();
  std::vector<Value> raw;
  for (const auto& mf : feats) raw.push_back(apply_conv(P, mf.feature, re.pw));  // [1,H,W]
  if (Mc == 1) {
    // normalization forced: single modality has robustness 1 everywhere
    Tape& t = *raw[0].tape;
    return {constant(t, Tensor::full(raw[0].shape(), 1.0))};
  }
  Value stacked = concat(raw, 0);            // [Mc,H,W]
  Value norm = softmax(stacked, 0);          // per-pixel simplex over modalities
  const int H = norm.shape()[1], W = norm.shape()[2];
  const long hw = (long)H * W;
  std::vector<Value> out;
  for (int m = 0; m < Mc; ++m) {
    auto map = std::make_shared<std::vector<long>>(hw);
    for (long p = 0; p < hw; ++p) (*map)[p] = (long)m * hw + p;
    out.push_back(gather(norm, map, {1, H, W}));
  }
  return out;
}

// Eq. 4: f_se0 = sum_m r_m * f_(m->se), a per-pixel convex combination.
inline Value weighted_init(const std::vector<ModalityFeature>& feats, const std::vector<Value>& r) {
  if (feats.empty() || feats.size() != r.size())
    throw std::invalid_argument("weighted_init: modality sets do not match");
  Value acc = scale_by_map(feats[0].feature, r[0]);
  for (size_t m = 1; m < feats.size(); ++m)
    acc = add(acc, scale_by_map(feats[m].feature, r[m]));
  return acc;
}

struct Reassembled {
  Value f_re;                                       // [C,H,W]
  std::shared_ptr<std::vector<int>> slots;          // per-pixel index into feats
  std::vector<int> modality_ids;                    // per-pixel global modality id
};

// Per-position uniform draw of a source modality; all channels at one pixel
// come from the same source.
inline Reassembled reassemble(const std::vector<ModalityFeature>& feats, Rng& rng) {
  if (feats.empty()) throw std::invalid_argument("reassemble: empty modality set");
  const Shape& s = feats[0].feature.shape();
  const int C = s[0], H = s[1], W = s[2];
  const long hw = (long)H * W;
  const int Mc = (int)feats.size();
  auto slots = std::make_shared<std::vector<int>>(hw);
  for (long p = 0; p < hw; ++p) (*slots)[p] = rng.uniform_int(Mc);
  std::vector<int> mods(hw);
  for (long p = 0; p < hw; ++p) mods[p] = feats[(*slots)[p]].modality;

  Value f_re;
  if (Mc == 1) {
    f_re = feats[0].feature;
  } else {
    std::vector<Value> maps;
    for (const auto& mf : feats) maps.push_back(mf.feature);
    Value stacked = concat(maps, 0);  // [Mc*C, H, W]
    auto map = std::make_shared<std::vector<long>>((long)C * hw);
    for (int c = 0; c < C; ++c)
      for (long p = 0; p < hw; ++p)
        (*map)[(long)c * hw + p] = ((long)(*slots)[p] * C + c) * hw + p;
    f_re = gather(stacked, map, {C, H, W});
  }
  return {f_re, slots, std::move(mods)};
}

// Eq. 5: spatial means of the robustness maps through SoftMin; fragile
// (low-robustness) modalities receive higher sampling probability.
inline std::vector<double> softmin_probs(const std::vector<Value>& r) {
  if (r.empty()) throw std::invalid_argument("softmin_probs: empty modality set");
  std::vector<double> means;
  for (const Value& v : r) {
    double s = 0.0;
    for (double x : v.v().data) s += x;
    means.push_back(s / (double)v.v().numel());
  }
  return softmin(means);
}

// CoL pathway at one scale. feats are the SP outputs f_(m->se). In training
// the MPU context is the reassembled pseudo-context; at inference the full
// per-modality features serve as contexts.
inline Value col_forward(ParamBinder& P, const std::vector<ModalityFeature>& feats,
                         const ReParams& re, const MpuStackParams& mpu, Rng& rng, bool train) {
  if (feats.empty()) throw std::invalid_argument("col_forward: empty modality set");
  std::vector<Value> r = robustness(P, feats, re);
  Value q0 = weighted_init(feats, r);
  MpuContext ctx;
  ctx.features = feats;
  if (train) {
    Reassembled ra = reassemble(feats, rng);
    ctx.reassembly_slots = ra.slots;
  }
  return mpu_stack(P, q0, ctx, mpu);
}

// InE pathway (training only): draw a query modality and a context modality
// independently from the SoftMin distribution; both are complete features.
struct IneDraw {
  int query_slot = -1;
  int context_slot = -1;
};

inline Value ine_forward(ParamBinder& P, const std::vector<ModalityFeature>& feats,
                         const ReParams& re, const MpuStackParams& mpu, Rng& rng,
                         IneDraw* draw_out = nullptr) {
  if (feats.empty()) throw std::invalid_argument("ine_forward: empty modality set");
  std::vector<Value> r = robustness(P, feats, re);
  std::vector<double> probs = softmin_probs(r);
  const int a = rng.sample(probs);
  const int b = rng.sample(probs);
  if (draw_out) *draw_out = {a, b};
  MpuContext ctx;
  ctx.features = {feats[b]};
  return mpu_stack(P, feats[a].feature, ctx, mpu);
}

// Table-2 baseline: plain elementwise mean over available modalities.
inline Value additive_fusion(const std::vector<ModalityFeature>& feats) {
  if (feats.empty()) throw std::invalid_argument("additive_fusion: empty modality set");
  Value acc = feats[0].feature;
  for (size_t m = 1; m < feats.size(); ++m) acc = add(acc, feats[m].feature);
  return scale(acc, 1.0 / (double)feats.size());
}

// Explicit-alignment ablation: channel-softmax each modality per pixel and
// penalize mean KL(modality || average distribution).
inline Value kl_alignment_loss(const std::vector<ModalityFeature>& feats) {
  if (feats.size() < 2) throw std::invalid_argument("kl_alignment_loss: needs >= 2 modalities");
  std::vector<Value> dists;
  for (const auto& mf : feats) dists.push_back(softmax(mf.feature, 0));
  Value avg = dists[0];
  for (size_t m = 1; m < dists.size(); ++m) avg = add(avg, dists[m]);
  avg = scale(avg, 1.0 / (double)dists.size());
  Value acc = kl_div_mean(dists[0], avg);
  for (size_t m = 1; m < dists.size(); ++m) acc = add(acc, kl_div_mean(dists[m], avg));
  return scale(acc, 1.0 / (double)dists.size());
}

}  // namespace charm
