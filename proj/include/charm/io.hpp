#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "charm/tensor.hpp"

// Raw on-disk formats: little-endian float32 tensors, and 16-bit label
// rasters with a single "H W" ASCII header line.

namespace charm {

inline void write_f32_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  std::vector<float> buf(t.data.begin(), t.data.end());
  f.write(reinterpret_cast<const char*>(buf.data()), (std::streamsize)(buf.size() * 4));
  if (!f) throw std::runtime_error("short write to " + path);
}

inline Tensor read_f32_tensor(const std::string& path, Shape shape) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  const long n = shape_numel(shape);
  std::vector<float> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)(n * 4));
  if (f.gcount() != (std::streamsize)(n * 4)) throw std::runtime_error("short read from " + path);
  Tensor t(std::move(shape));
  for (long i = 0; i < n; ++i) t.data[i] = buf[i];
  return t;
}

inline void write_label_raster(const std::string& path, const std::vector<uint16_t>& labels, int H,
                               int W) {
  if ((long)labels.size() != (long)H * W) throw std::invalid_argument("label raster size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << H << " " << W << "\n";
  f.write(reinterpret_cast<const char*>(labels.data()), (std::streamsize)(labels.size() * 2));
  if (!f) throw std::runtime_error("short write to " + path);
}

inline std::vector<uint16_t> read_label_raster(const std::string& path, int& H, int& W) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string header;
  std::getline(f, header);
  std::istringstream hs(header);
  if (!(hs >> H >> W) || H <= 0 || W <= 0)
    throw std::runtime_error("bad label raster header in " + path);
  std::vector<uint16_t> labels((size_t)H * W);
  f.read(reinterpret_cast<char*>(labels.data()), (std::streamsize)(labels.size() * 2));
  if (f.gcount() != (std::streamsize)(labels.size() * 2))
    throw std::runtime_error("short read from " + path);
  return labels;
}

}  // namespace charm
