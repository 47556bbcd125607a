#pragma once

#include <memory>
#include <vector>

#include "charm/ops.hpp"

// Window partition / reverse and toroidal cyclic shift, all expressed as
// gather permutations so round-trips are bit-exact by construction.

namespace charm {

// x:[C,H,W] -> windows [J, s*s, C], window j = j-th s x s tile in raster order.
inline Value window_partition(Value x, int s) {
  const Shape& sh = x.shape();
  if (sh.size() != 3) throw std::invalid_argument("window_partition: expected [C,H,W]");
  const int C = sh[0], H = sh[1], W = sh[2];
  if (s <= 0 || H % s != 0 || W % s != 0)
    throw std::invalid_argument("window_partition: window size must divide H and W");
  const int gw = W / s, gh = H / s;
  const int J = gh * gw, T = s * s;
  auto map = std::make_shared<std::vector<long>>((long)J * T * C);
  for (int jy = 0; jy < gh; ++jy)
    for (int jx = 0; jx < gw; ++jx) {
      const int j = jy * gw + jx;
      for (int ty = 0; ty < s; ++ty)
        for (int tx = 0; tx < s; ++tx) {
          const int t = ty * s + tx;
          const long y = jy * s + ty, xx = jx * s + tx;
          for (int c = 0; c < C; ++c)
            (*map)[((long)j * T + t) * C + c] = ((long)c * H + y) * W + xx;
        }
    }
  return gather(x, map, {J, T, C});
}

// windows [J, s*s, C] -> [C,H,W]; exact inverse of window_partition.
inline Value window_reverse(Value w, int H, int W) {
  const Shape& sh = w.shape();
  if (sh.size() != 3) throw std::invalid_argument("window_reverse: expected [J,T,C]");
  const int J = sh[0], T = sh[1], C = sh[2];
  if ((long)J * T != (long)H * W) throw std::invalid_argument("window_reverse: J*T != H*W");
  int s = 0;
  while ((s + 1) * (s + 1) <= T) ++s;
  if (s * s != T || H % s != 0 || W % s != 0)
    throw std::invalid_argument("window_reverse: inconsistent window geometry");
  const int gw = W / s;
  auto map = std::make_shared<std::vector<long>>((long)C * H * W);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int j = (y / s) * gw + (x / s);
        const int t = (y % s) * s + (x % s);
        (*map)[((long)c * H + y) * W + x] = ((long)j * T + t) * C + c;
      }
  return gather(w, map, {C, H, W});
}

// Toroidal shift: out[c, (y+dy) mod H, (x+dx) mod W] = x[c,y,x].
inline Value cyclic_shift(Value x, int dy, int dx) {
  const Shape& sh = x.shape();
  if (sh.size() != 3) throw std::invalid_argument("cyclic_shift: expected [C,H,W]");
  const int C = sh[0], H = sh[1], W = sh[2];
  auto wrap = [](int v, int n) { return ((v % n) + n) % n; };
  auto map = std::make_shared<std::vector<long>>((long)C * H * W);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x2 = 0; x2 < W; ++x2)
        (*map)[((long)c * H + y) * W + x2] =
            ((long)c * H + wrap(y - dy, H)) * W + wrap(x2 - dx, W);
  return gather(x, map, {C, H, W});
}

// Same toroidal shift applied to a per-pixel integer map (metadata, not taped).
inline std::vector<int> cyclic_shift_indices(const std::vector<int>& m, int H, int W, int dy, int dx) {
  auto wrap = [](int v, int n) { return ((v % n) + n) % n; };
  std::vector<int> out((size_t)H * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      out[(size_t)y * W + x] = m[(size_t)wrap(y - dy, H) * W + wrap(x - dx, W)];
  return out;
}

// [J,T,C] -> [J*h, T, C/h]
inline Value split_heads(Value x, int h) {
  const Shape& sh = x.shape();
  if (sh.size() != 3) throw std::invalid_argument("split_heads: expected [J,T,C]");
  const int J = sh[0], T = sh[1], C = sh[2];
  if (h <= 0 || C % h != 0) throw std::invalid_argument("split_heads: heads must divide channels");
  const int dh = C / h;
  auto map = std::make_shared<std::vector<long>>((long)J * T * C);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < h; ++k)
      for (int t = 0; t < T; ++t)
        for (int d = 0; d < dh; ++d)
          (*map)[(((long)(j * h + k) * T) + t) * dh + d] = ((long)j * T + t) * C + k * dh + d;
  return gather(x, map, {J * h, T, dh});
}

// [J*h, T, dh] -> [J, T, dh*h]
inline Value merge_heads(Value x, int h) {
  const Shape& sh = x.shape();
  if (sh.size() != 3) throw std::invalid_argument("merge_heads: expected [J*h,T,dh]");
  const int Jh = sh[0], T = sh[1], dh = sh[2];
  if (h <= 0 || Jh % h != 0) throw std::invalid_argument("merge_heads: bad head count");
  const int J = Jh / h, C = dh * h;
  auto map = std::make_shared<std::vector<long>>((long)J * T * C);
  for (int j = 0; j < J; ++j)
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < h; ++k)
        for (int d = 0; d < dh; ++d)
          (*map)[((long)j * T + t) * C + k * dh + d] = (((long)(j * h + k) * T) + t) * dh + d;
  return gather(x, map, {J, T, C});
}

}  // namespace charm
