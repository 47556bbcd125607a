#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "charm/encoder.hpp"
#include "charm/fusion.hpp"
#include "charm/seghead.hpp"

// Full CHARM model: shared encoder, per-(modality,scale) semantic projectors,
// per-scale robustness evaluator, per-pathway MPU stacks, shared SegHead.

namespace charm {

struct ModelConfig {
  int img_channels = 3;
  std::array<int, 4> channels = {16, 32, 64, 128};
  int enc_blocks = 2;        // residual blocks per encoder stage
  int mpu_blocks = 2;        // L (alternating plain/shifted)
  int heads = 2;
  std::array<int, 4> windows = {4, 4, 2, 2};
  int c_dec = 64;
  int num_classes = 5;
  int num_modalities = 4;
};

// Table-2 variant switches. use_kl_align replaces MPU by the explicit
// KL-alignment objective, so it requires use_mpu off unless overridden.
struct VariantConfig {
  bool use_mpu = true;
  bool use_col = true;
  bool use_ine = true;
  bool use_kl_align = false;
  bool allow_kl_with_mpu = false;

  void validate() const {
    if (use_kl_align && use_mpu && !allow_kl_with_mpu)
      throw std::invalid_argument("variant: use_kl_align requires use_mpu=false (or explicit override)");
  }
};

struct CharmModel {
  ModelConfig cfg;
  EncoderParams encoder;
  std::array<std::vector<SpParams>, 4> sp;  // [scale][modality]
  std::array<ReParams, 4> re;               // shared across modalities per scale
  std::array<MpuStackParams, 4> col_mpu;
  std::array<MpuStackParams, 4> ine_mpu;
  SegHeadParams head;

  void init(const ModelConfig& c, uint64_t seed) {
    cfg = c;
    Rng rng(derive_seed(seed, 0x0de1));
    EncoderConfig ec;
    ec.img_channels = c.img_channels;
    ec.channels = c.channels;
    ec.blocks_per_stage = c.enc_blocks;
    encoder.init(ec, rng);
    for (int i = 0; i < 4; ++i) {
      sp[i].resize(c.num_modalities);
      for (int m = 0; m < c.num_modalities; ++m) sp[i][m].init(c.channels[i], rng);
      re[i].init(c.channels[i], rng);
      col_mpu[i].init(c.channels[i], c.num_modalities, c.mpu_blocks, c.heads, c.windows[i], rng);
      ine_mpu[i].init(c.channels[i], c.num_modalities, c.mpu_blocks, c.heads, c.windows[i], rng);
    }
    head.init(c.channels, c.c_dec, c.num_classes, rng);
  }

  ParamRegistry registry() {
    ParamRegistry reg;
    encoder.register_params(reg, "enc");
    for (int i = 0; i < 4; ++i) {
      const std::string s = ".s" + std::to_string(i);
      for (int m = 0; m < cfg.num_modalities; ++m)
        sp[i][m].register_params(reg, "sp" + s + ".m" + std::to_string(m));
      re[i].register_params(reg, "re" + s);
      col_mpu[i].register_params(reg, "col" + s);
      ine_mpu[i].register_params(reg, "ine" + s);
    }
    head.register_params(reg, "head");
    return reg;
  }
};

// Optional capture of intermediate features for export/inspection.
struct ForwardDump {
  // keyed like "f_se.s0.rgb-index" -> tensor copies of values
  std::map<std::string, Tensor> tensors;
};

struct ForwardOutput {
  Value logits_col;                  // always present
  Value logits_ine;                  // valid only when ine_used
  Value kl_term;                     // valid only when kl_used
  bool ine_used = false;
  bool kl_used = false;
  std::array<IneDraw, 4> ine_draws;  // per scale
};

// One sample through the model. `images` maps modality id -> [3,H,W] tensor;
// the subset may be any non-empty subset of the registered modalities.
// Per-scale sampling streams are derived from (seed, step, scale), so every
// sample in a training step shares the same reassembly map and InE draws.
inline ForwardOutput charm_forward(ParamBinder& P, const CharmModel& model,
                                   const std::map<int, Tensor>& images, bool train,
                                   const VariantConfig& var, uint64_t seed, long step,
                                   ForwardDump* dump = nullptr) {
  var.validate();
  if (images.empty()) throw std::invalid_argument("forward: empty modality set");
  for (const auto& [m, img] : images)
    if (m < 0 || m >= model.cfg.num_modalities)
      throw std::invalid_argument("forward: unregistered modality " + std::to_string(m));

  // encode every available modality with the shared encoder
  std::vector<std::pair<int, FeaturePyramid>> pyramids;
  for (const auto& [m, img] : images) {
    Value iv = make_leaf(P.tape(), img, false);  // inputs never need gradients
    pyramids.emplace_back(m, encode(P, iv, model.encoder));
  }

  const int H = images.begin()->second.dim(1);
  const int W = images.begin()->second.dim(2);

  std::array<Value, 4> col_feats;
  std::array<Value, 4> ine_feats;
  ForwardOutput out;
  Value kl_acc;

  for (int i = 0; i < 4; ++i) {
    std::vector<ModalityFeature> feats;
    for (auto& [m, pyr] : pyramids)
      feats.push_back({m, semantic_project(P, pyr.levels[i], model.sp[i][m])});

    if (dump)
      for (size_t s = 0; s < feats.size(); ++s)
        dump->tensors["f_se.s" + std::to_string(i) + ".m" + std::to_string(feats[s].modality)] =
            feats[s].feature.v();

    Rng col_rng(derive_seed(seed, (uint64_t)step, (uint64_t)i, 0xc01));
    Rng ine_rng(derive_seed(seed, (uint64_t)step, (uint64_t)i, 0x19e));

    // CoL-side fused feature (the inference path)
    if (var.use_col) {
      if (var.use_mpu) {
        col_feats[i] = col_forward(P, feats, model.re[i], model.col_mpu[i], col_rng, train);
      } else {
        std::vector<Value> r = robustness(P, feats, model.re[i]);
        col_feats[i] = weighted_init(feats, r);
      }
    } else {
      Value fused = additive_fusion(feats);
      if (var.use_mpu) {
        MpuContext ctx;
        ctx.features = feats;
        if (train) {
          Reassembled ra = reassemble(feats, col_rng);
          ctx.reassembly_slots = ra.slots;
        }
        col_feats[i] = mpu_stack(P, fused, ctx, model.col_mpu[i]);
      } else {
        col_feats[i] = fused;
      }
    }
    if (dump) {
      std::vector<Value> r = robustness(P, feats, model.re[i]);
      for (size_t s = 0; s < feats.size(); ++s)
        dump->tensors["r.s" + std::to_string(i) + ".m" + std::to_string(feats[s].modality)] =
            r[s].v();
      dump->tensors["f_col.s" + std::to_string(i)] = col_feats[i].v();
    }

    // InE pathway, training only
    if (train && var.use_ine) {
      if (var.use_mpu) {
        ine_feats[i] = ine_forward(P, feats, model.re[i], model.ine_mpu[i], ine_rng,
                                   &out.ine_draws[i]);
      } else {
        std::vector<Value> r = robustness(P, feats, model.re[i]);
        std::vector<double> probs = softmin_probs(r);
        const int a = ine_rng.sample(probs);
        const int b = ine_rng.sample(probs);
        out.ine_draws[i] = {a, b};
        ine_feats[i] = feats[a].feature;  // protected passthrough without MPU
        (void)b;
      }
      out.ine_used = true;
    }

    if (train && var.use_kl_align && feats.size() >= 2) {
      Value term = kl_alignment_loss(feats);
      kl_acc = (i == 0 || !out.kl_used) ? term : add(kl_acc, term);
      out.kl_used = true;
    }
  }

  out.logits_col = decode(P, col_feats, model.head, H, W);
  if (out.ine_used) out.logits_ine = decode(P, ine_feats, model.head, H, W);
  if (out.kl_used) out.kl_term = kl_acc;
  (void)tp;
  return out;
}

}  // namespace charm
