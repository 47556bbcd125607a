#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "charm/rng.hpp"
#include "charm/tensor.hpp"

// Synthetic multimodal scene generator. Scenes are random shapes painted
// onto a label map; each modality renders classes at its own visibility
// strength with a modality-specific texture, so class content differs
// across modalities by construction.

namespace charm {

enum class TextureKind { Flat = 0, Radial = 1, Edge = 2, Dots = 3 };

inline const char* texture_name(TextureKind k) {
  switch (k) {
    case TextureKind::Flat: return "flat";
    case TextureKind::Radial: return "radial";
    case TextureKind::Edge: return "edge";
    case TextureKind::Dots: return "dots";
  }
  return "?";
}

inline TextureKind texture_from_name(const std::string& s) {
  if (s == "flat") return TextureKind::Flat;
  if (s == "radial") return TextureKind::Radial;
  if (s == "edge") return TextureKind::Edge;
  if (s == "dots") return TextureKind::Dots;
  throw std::invalid_argument("unknown texture kind: " + s);
}

struct SceneSpec {
  int H = 64, W = 64;
  int K = 5;  // classes including background 0
  int shapes_min = 3, shapes_max = 6;
  std::vector<std::string> modality_names = {"rgb", "depth", "event", "lidar"};
  std::vector<TextureKind> modality_textures = {TextureKind::Flat, TextureKind::Radial,
                                                TextureKind::Edge, TextureKind::Dots};
  double noise_sigma = 0.05;

  int modalities() const { return (int)modality_names.size(); }

  void validate() const {
    if (H % 32 != 0 || W % 32 != 0) throw std::invalid_argument("scene: H,W must be divisible by 32");
    if (K < 3) throw std::invalid_argument("scene: need K >= 3");
    const int M = modalities();
    if (M < 2 || M > 4) throw std::invalid_argument("scene: M must be in [2,4]");
    if ((int)modality_textures.size() != M)
      throw std::invalid_argument("scene: texture list must match modality list");
    if (shapes_min < 1 || shapes_max < shapes_min) throw std::invalid_argument("scene: bad shape counts");
  }
};

struct VisibilityMatrix {
  int K = 0, M = 0;
  std::vector<double> v;  // K*M, row-major by class

  double at(int k, int m) const { return v[(size_t)k * M + m]; }
  double& at(int k, int m) { return v[(size_t)k * M + m]; }

  // Class k fully visible only in modality (k-1) mod M and faint (0.2) in the
  // next one, so every modality is robust for one class and fragile elsewhere.
  static VisibilityMatrix identity_biased(int K, int M) {
    VisibilityMatrix vm;
    vm.K = K;
    vm.M = M;
    vm.v.assign((size_t)K * M, 0.0);
    for (int m = 0; m < M; ++m) vm.at(0, m) = 1.0;  // background canvas
    for (int k = 1; k < K; ++k) {
      vm.at(k, (k - 1) % M) = 1.0;
      vm.at(k, k % M) = 0.2;
    }
    return vm;
  }

  void validate() const {
    if ((int)v.size() != K * M) throw std::invalid_argument("visibility: size mismatch");
    bool any_invisible = false;
    for (int k = 1; k < K; ++k) {
      double best = 0.0;
      for (int m = 0; m < M; ++m) {
        const double x = at(k, m);
        if (x < 0.0 || x > 1.0) throw std::invalid_argument("visibility: entries must be in [0,1]");
        best = std::max(best, x);
        if (x == 0.0) any_invisible = true;
      }
      if (best < 0.5)
        throw std::invalid_argument("visibility: class " + std::to_string(k) +
                                    " not clearly visible anywhere");
    }
    if (!any_invisible)
      throw std::invalid_argument("visibility: no class is ever invisible (no complementarity)");
  }
};

struct Sample {
  int H = 0, W = 0;
  std::map<int, Tensor> images;  // modality id -> [3,H,W] in [0,1]
  std::vector<uint16_t> labels;  // H*W class ids
};

// Fixed palette: well-separated rgb signatures per class, background at 0.
inline std::array<double, 3> class_signature(int k) {
  static const std::array<double, 3> table[] = {
      {0.30, 0.30, 0.30},  // background base
      {0.85, 0.20, 0.20}, {0.20, 0.85, 0.20}, {0.20, 0.20, 0.85}, {0.80, 0.80, 0.15},
      {0.80, 0.25, 0.80}, {0.20, 0.75, 0.75}, {0.90, 0.55, 0.20}, {0.55, 0.35, 0.75},
  };
  if (k < (int)(sizeof(table) / sizeof(table[0]))) return table[k];
  // deterministic fallback for large K
  double h = std::fmod(0.13 + 0.618033988749895 * k, 1.0);
  return {0.25 + 0.6 * h, 0.25 + 0.6 * std::fmod(h + 0.33, 1.0), 0.25 + 0.6 * std::fmod(h + 0.67, 1.0)};
}

constexpr double kBackgroundLevel = 0.30;

namespace detail_data {

struct PaintedScene {
  std::vector<uint16_t> labels;    // class per pixel
  std::vector<int> shape_id;      // owning shape per pixel, -1 background
  std::vector<double> shape_cx, shape_cy, shape_r;  // per shape
};

inline PaintedScene paint_shapes(const SceneSpec& spec, Rng& rng) {
  const int H = spec.H, W = spec.W;
  PaintedScene s;
  s.labels.assign((size_t)H * W, 0);
  s.shape_id.assign((size_t)H * W, -1);
  const int n = spec.shapes_min + rng.uniform_int(spec.shapes_max - spec.shapes_min + 1);
  for (int i = 0; i < n; ++i) {
    const int cls = 1 + rng.uniform_int(spec.K - 1);
    const int kind = rng.uniform_int(3);
    const double cx = rng.uniform(0.1 * W, 0.9 * W);
    const double cy = rng.uniform(0.1 * H, 0.9 * H);
    const double r = rng.uniform(0.12 * std::min(H, W), 0.30 * std::min(H, W));
    const double rw = (kind == 0) ? rng.uniform(0.6 * r, 1.4 * r) : r;
    s.shape_cx.push_back(cx);
    s.shape_cy.push_back(cy);
    s.shape_r.push_back(std::max(r, rw));
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        bool inside = false;
        const double dx = x - cx, dy = y - cy;
        if (kind == 0) {  // rectangle
          inside = std::fabs(dx) <= rw && std::fabs(dy) <= r;
        } else if (kind == 1) {  // disc
          inside = dx * dx + dy * dy <= r * r;
        } else {  // upward triangle: apex (cx, cy-r), base y = cy+r
          if (dy >= -r && dy <= r) {
            const double half = (dy + r) / (2.0 * r) * r;  // width grows toward the base
            inside = std::fabs(dx) <= half;
          }
        }
        if (inside) {  // later shapes overwrite earlier ones
          s.labels[(size_t)y * W + x] = (uint16_t)cls;
          s.shape_id[(size_t)y * W + x] = i;
        }
      }
  }
  return s;
}

inline bool is_region_edge(const std::vector<uint16_t>& labels, int H, int W, int y, int x) {
  const uint16_t c = labels[(size_t)y * W + x];
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      const int ny = y + dy, nx = x + dx;
      if (ny < 0 || ny >= H || nx < 0 || nx >= W) return true;  // image border counts
      if (labels[(size_t)ny * W + nx] != c) return true;
    }
  return false;
}

}  // namespace detail_data

// Deterministic scene synthesis: shapes on a label map, per-modality class
// rendering scaled by the visibility matrix, modality texture, then Gaussian
// noise (sigma from the spec) and clamping to [0,1].
inline Sample generate(uint64_t seed, const SceneSpec& spec, const VisibilityMatrix& vis) {
  spec.validate();
  if (vis.K != spec.K || vis.M != spec.modalities())
    throw std::invalid_argument("generate: visibility matrix does not match the spec");
  vis.validate();
  const int H = spec.H, W = spec.W, M = spec.modalities();
  Rng rng(derive_seed(seed, 0xdada));
  auto painted = detail_data::paint_shapes(spec, rng);

  Sample out;
  out.H = H;
  out.W = W;
  out.labels = painted.labels;
  const long hw = (long)H * W;

  for (int m = 0; m < M; ++m) {
    Tensor img({3, H, W});
    const TextureKind tex = spec.modality_textures[m];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const long p = (long)y * W + x;
        const int k = painted.labels[p];
        double strength = 0.0;  // how strongly the class signature shows here
        if (k != 0) {
          const double v = vis.at(k, m);
          switch (tex) {
            case TextureKind::Flat:
              strength = v;
              break;
            case TextureKind::Radial: {
              const int sid = painted.shape_id[p];
              const double d = std::hypot(x - painted.shape_cx[sid], y - painted.shape_cy[sid]);
              const double g = 1.0 - 0.5 * std::min(1.0, d / painted.shape_r[sid]);
              strength = v * g;
              break;
            }
            case TextureKind::Edge:
              strength = detail_data::is_region_edge(painted.labels, H, W, y, x) ? v : 0.0;
              break;
            case TextureKind::Dots:
              strength = (y % 2 == 0 && x % 2 == 0) ? v : 0.0;  // 1-in-4 raster
              break;
          }
        }
        const auto sig = class_signature(k);
        for (int c = 0; c < 3; ++c) {
          const double base = kBackgroundLevel;
          img.data[(long)c * hw + p] = base + strength * (sig[c] - base);
        }
      }
    // per-modality noise stream, independent of the shape stream
    Rng nrng(derive_seed(seed, 0xb0b0, (uint64_t)m));
    for (double& v : img.data) v = std::clamp(v + spec.noise_sigma * nrng.normal(), 0.0, 1.0);
    out.images.emplace(m, std::move(img));
  }
  return out;
}

// Zeroes all but ceil(keep_fraction * n_blocks) randomly chosen blocks of one
// modality image; labels are untouched.
inline Sample mask_blocks(const Sample& s, int modality, int block_size, double keep_fraction,
                          Rng& rng) {
  if (keep_fraction <= 0.0 || keep_fraction > 1.0)
    throw std::invalid_argument("mask_blocks: keep_fraction must be in (0,1]");
  if (block_size <= 0 || s.H % block_size != 0 || s.W % block_size != 0)
    throw std::invalid_argument("mask_blocks: block size must divide H and W");
  if (!s.images.count(modality)) throw std::invalid_argument("mask_blocks: no such modality");
  const int by = s.H / block_size, bx = s.W / block_size;
  const int n_blocks = by * bx;
  const int n_keep = (int)std::ceil(keep_fraction * n_blocks);
  std::vector<int> order(n_blocks);
  for (int i = 0; i < n_blocks; ++i) order[i] = i;
  for (int i = n_blocks - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
  std::vector<char> keep(n_blocks, 0);
  for (int i = 0; i < n_keep; ++i) keep[order[i]] = 1;

  Sample out = s;
  Tensor& img = out.images.at(modality);
  const long hw = (long)s.H * s.W;
  for (int b = 0; b < n_blocks; ++b) {
    if (keep[b]) continue;
    const int y0 = (b / bx) * block_size, x0 = (b % bx) * block_size;
    for (int c = 0; c < 3; ++c)
      for (int y = y0; y < y0 + block_size; ++y)
        for (int x = x0; x < x0 + block_size; ++x) img.data[(long)c * hw + (long)y * s.W + x] = 0.0;
  }
  return out;
}

// Blends one modality toward label-independent uniform noise.
inline Sample degrade(const Sample& s, int modality, double severity, Rng& rng) {
  if (severity < 0.0 || severity > 1.0)
    throw std::invalid_argument("degrade: severity must be in [0,1]");
  if (!s.images.count(modality)) throw std::invalid_argument("degrade: no such modality");
  Sample out = s;
  Tensor& img = out.images.at(modality);
  for (double& v : img.data) v = (1.0 - severity) * v + severity * rng.uniform();
  return out;
}

}  // namespace charm
