#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "charm/nn.hpp"
#include "charm/window.hpp"

// Mutual Perception Unit: windowed multi-head cross-modal attention. The
// semantic query attends over per-modality key/value sets; blocks alternate
// plain and shifted (toroidal) window partitioning.

namespace charm {

struct ModalityFeature {
  int modality;  // global modality id
  Value feature;  // [C,H,W]
};

struct MpuBlockParams {
  int channels = 0;
  int heads = 1;
  int window = 1;
  bool shifted = false;
  Tensor w_q, w_out;          // [C,C]
  std::vector<Tensor> w_k;    // per modality, [C,C]
  std::vector<Tensor> w_v;    // per modality, [C,C]
  ConvParams mlp1, mlp2;      // pointwise C -> 2C -> C
  LayerNormParams ln1, ln2;

  void init(int C, int n_modalities, int heads_, int window_, bool shifted_, Rng& rng) {
    if (C % heads_ != 0) throw std::invalid_argument("mpu: heads must divide channels");
    channels = C;
    heads = heads_;
    window = window_;
    shifted = shifted_;
    w_q = linear_weight(C, C, rng);
    w_out = linear_weight(C, C, rng);
    w_k.clear();
    w_v.clear();
    for (int m = 0; m < n_modalities; ++m) {
      w_k.push_back(linear_weight(C, C, rng));
      w_v.push_back(linear_weight(C, C, rng));
    }
    mlp1.init(2 * C, C, 1, 1, 1, 0, 1, rng);
    mlp2.init(C, 2 * C, 1, 1, 1, 0, 1, rng);
    ln1.init(C);
    ln2.init(C);
  }

  void register_params(ParamRegistry& reg, const std::string& p) {
    reg.add(p + ".wq", &w_q);
    reg.add(p + ".wo", &w_out);
    for (size_t m = 0; m < w_k.size(); ++m) {
      reg.add(p + ".wk.m" + std::to_string(m), &w_k[m]);
      reg.add(p + ".wv.m" + std::to_string(m), &w_v[m]);
    }
    mlp1.register_params(reg, p + ".mlp1");
    mlp2.register_params(reg, p + ".mlp2");
    ln1.register_params(reg, p + ".ln1");
    ln2.register_params(reg, p + ".ln2");
  }
};

struct MpuStackParams {
  std::vector<MpuBlockParams> blocks;

  // L blocks with alternating shift flags (even plain, odd shifted).
  void init(int C, int n_modalities, int L, int heads, int window, Rng& rng) {
    if (L < 1) throw std::invalid_argument("mpu_stack: needs at least one block");
    blocks.resize(L);
    for (int l = 0; l < L; ++l) blocks[l].init(C, n_modalities, heads, window, l % 2 == 1, rng);
  }
  void register_params(ParamRegistry& reg, const std::string& p) {
    for (size_t l = 0; l < blocks.size(); ++l)
      blocks[l].register_params(reg, p + ".b" + std::to_string(l));
  }
};

// Attention context: either the plain per-modality feature maps, or those
// maps plus a per-pixel source slot map (the reassembled pseudo-context,
// where K/V at each position use that position's source modality weights).
struct MpuContext {
  std::vector<ModalityFeature> features;
  std::shared_ptr<const std::vector<int>> reassembly_slots;  // H*W slots into features, or null

  bool reassembled() const { return reassembly_slots != nullptr; }
};

namespace detail {

// Scaled dot-product over windows, heads folded into the batch axis.
// attn_out, when given, receives the post-softmax attention [J*h, T, Tk].
inline Value wmha(Value q_win, Value k_win, Value v_win, int heads, Value* attn_out = nullptr) {
  const int C = q_win.shape()[2];
  Value qh = split_heads(q_win, heads);
  Value kh = split_heads(k_win, heads);
  Value vh = split_heads(v_win, heads);
  Value scores = scale(bmm_nt(qh, kh), 1.0 / std::sqrt((double)C / heads));
  Value attn = softmax(scores, 2);
  if (attn_out) *attn_out = attn;
  return merge_heads(bmm(attn, vh), heads);
}

// Per-window pixel coordinates for converting a [H,W] slot map into window
// token order.
inline std::vector<int> slots_to_window_order(const std::vector<int>& slots, int H, int W, int s) {
  const int gw = W / s, T = s * s;
  const int J = (H / s) * gw;
  std::vector<int> out((size_t)J * T);
  for (int j = 0; j < J; ++j)
    for (int t = 0; t < T; ++t) {
      const int y = (j / gw) * s + t / s;
      const int x = (j % gw) * s + t % s;
      out[(size_t)j * T + t] = slots[(size_t)y * W + x];
    }
  return out;
}

}  // namespace detail

// Eq.-3 attention: Q from the semantic feature, K/V per context modality
// (concatenated along the token axis), W-MHA, then output projection.
// q_win: [J,T,C]; contexts: (modality id, windows [J,T,C]).
inline Value mpu_attention(ParamBinder& P, Value q_win,
                           const std::vector<std::pair<int, Value>>& contexts,
                           const MpuBlockParams& params, Value* attn_out = nullptr) {
  if (contexts.empty()) throw std::invalid_argument("mpu_attention: empty context set");
  Value q = matmul(q_win, P(params.w_q));
  std::vector<Value> ks, vs;
  std::vector<int> seen;  // contexts are a set keyed by modality: repeats are no-ops
  for (const auto& [m, win] : contexts) {
    if (m < 0 || m >= (int)params.w_k.size())
      throw std::invalid_argument("mpu_attention: modality " + std::to_string(m) +
                                  " has no registered K/V weights");
    if (std::find(seen.begin(), seen.end(), m) != seen.end()) continue;
    seen.push_back(m);
    ks.push_back(matmul(win, P(params.w_k[m])));
    vs.push_back(matmul(win, P(params.w_v[m])));
  }
  Value k = ks.size() == 1 ? ks[0] : concat(ks, 1);
  Value v = vs.size() == 1 ? vs[0] : concat(vs, 1);
  Value out = detail::wmha(q, k, v, params.heads, attn_out);
  return matmul(out, P(params.w_out));
}

// Reassembled-context attention: per-modality K/V are projected with each
// modality's own weights, then gathered per position by the slot map.
inline Value mpu_attention_reassembled(ParamBinder& P, Value q_win,
                                       const std::vector<ModalityFeature>& ctx_windows,
                                       const std::vector<int>& slot_win,
                                       const MpuBlockParams& params) {
  if (ctx_windows.empty()) throw std::invalid_argument("mpu_attention: empty context set");
  const int J = q_win.shape()[0], T = q_win.shape()[1], C = q_win.shape()[2];
  Value q = matmul(q_win, P(params.w_q));
  std::vector<Value> ks, vs;
  for (const auto& mf : ctx_windows) {
    if (mf.modality < 0 || mf.modality >= (int)params.w_k.size())
      throw std::invalid_argument("mpu_attention: modality has no registered K/V weights");
    ks.push_back(matmul(mf.feature, P(params.w_k[mf.modality])));
    vs.push_back(matmul(mf.feature, P(params.w_v[mf.modality])));
  }
  Value k_all = ks.size() == 1 ? ks[0] : concat(ks, 0);  // [Mc*J, T, C]
  Value v_all = vs.size() == 1 ? vs[0] : concat(vs, 0);
  auto map = std::make_shared<std::vector<long>>((long)J * T * C);
  for (int j = 0; j < J; ++j)
    for (int t = 0; t < T; ++t) {
      const long slot = slot_win[(size_t)j * T + t];
      const long base = (((long)slot * J + j) * T + t) * C;
      for (int c = 0; c < C; ++c) (*map)[((long)j * T + t) * C + c] = base + c;
    }
  Value k = gather(k_all, map, {J, T, C});
  Value v = gather(v_all, map, {J, T, C});
  Value out = detail::wmha(q, k, v, params.heads);
  return matmul(out, P(params.w_out));
}

// One MPU block: pre-norm residual attention + residual MLP (expansion 2).
// With the shift flag set, query and contexts are cyclically shifted by
// floor(s/2) before partitioning and the attention output is shifted back.
inline Value mpu_block(ParamBinder& P, Value f_se, const MpuContext& ctx,
                       const MpuBlockParams& params) {
  const Shape& s = f_se.shape();
  if (s.size() != 3) throw std::invalid_argument("mpu_block: expected [C,H,W]");
  const int H = s[1], W = s[2];
  const int win = params.window;
  for (const auto& mf : ctx.features)
    if (mf.feature.shape() != s)
      throw std::invalid_argument("mpu_block: context spatial size mismatch");
  const int d = params.shifted ? win / 2 : 0;

  Value qn = apply_ln(P, f_se, params.ln1);
  if (d) qn = cyclic_shift(qn, d, d);
  Value q_win = window_partition(qn, win);

  Value att_win;
  if (ctx.reassembled()) {
    std::vector<int> slots = *ctx.reassembly_slots;
    if (d) slots = cyclic_shift_indices(slots, H, W, d, d);
    std::vector<ModalityFeature> ctx_wins;
    for (const auto& mf : ctx.features) {
      Value f = d ? cyclic_shift(mf.feature, d, d) : mf.feature;
      ctx_wins.push_back({mf.modality, window_partition(f, win)});
    }
    att_win = mpu_attention_reassembled(P, q_win, ctx_wins,
                                        detail::slots_to_window_order(slots, H, W, win), params);
  } else {
    std::vector<std::pair<int, Value>> ctx_wins;
    for (const auto& mf : ctx.features) {
      Value f = d ? cyclic_shift(mf.feature, d, d) : mf.feature;
      ctx_wins.emplace_back(mf.modality, window_partition(f, win));
    }
    att_win = mpu_attention(P, q_win, ctx_wins, params);
  }

  Value att = window_reverse(att_win, H, W);
  if (d) att = cyclic_shift(att, -d, -d);
  Value x = add(f_se, att);

  Value m = apply_ln(P, x, params.ln2);
  m = apply_conv(P, m, params.mlp1);
  m = relu(m);
  m = apply_conv(P, m, params.mlp2);
  return add(x, m);
}

// L blocks applied sequentially; the contexts stay fixed while the query
// feature is iteratively refined. Blocks must alternate shift flags.
inline Value mpu_stack(ParamBinder& P, Value f_se0, const MpuContext& ctx,
                       const MpuStackParams& stack) {
  if (stack.blocks.empty()) throw std::invalid_argument("mpu_stack: no blocks");
  for (size_t l = 0; l < stack.blocks.size(); ++l)
    if (stack.blocks[l].shifted != (l % 2 == 1))
      throw std::invalid_argument("mpu_stack: blocks must alternate shift flags");
  Value f = f_se0;
  for (const auto& b : stack.blocks) f = mpu_block(P, f, ctx, b);
  return f;
}

}  // namespace charm
