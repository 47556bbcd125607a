#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "charm/data.hpp"
#include "charm/io.hpp"

// On-disk dataset: one directory per split, one directory per scene holding a
// raw float32 tensor per modality plus a 16-bit label raster, described by a
// plain-text manifest at the dataset root.

namespace charm {

struct DatasetConfig {
  SceneSpec spec;
  VisibilityMatrix vis;
  uint64_t seed = 7;
  int train_scenes = 512;
  int eval_scenes = 128;
};

namespace detail_ds {

inline std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string scene_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05d", index);
  return buf;
}

}  // namespace detail_ds

inline std::string manifest_text(const DatasetConfig& cfg) {
  using detail_ds::fmt_double;
  std::ostringstream os;
  os << "charm-dataset v1\n";
  os << "seed = " << cfg.seed << "\n";
  os << "height = " << cfg.spec.H << "\n";
  os << "width = " << cfg.spec.W << "\n";
  os << "classes = " << cfg.spec.K << "\n";
  os << "shapes_min = " << cfg.spec.shapes_min << "\n";
  os << "shapes_max = " << cfg.spec.shapes_max << "\n";
  os << "noise_sigma = " << fmt_double(cfg.spec.noise_sigma) << "\n";
  os << "modalities = ";
  for (int m = 0; m < cfg.spec.modalities(); ++m)
    os << (m ? "," : "") << cfg.spec.modality_names[m] << ":"
       << texture_name(cfg.spec.modality_textures[m]);
  os << "\n";
  os << "visibility = ";
  for (int k = 0; k < cfg.vis.K; ++k) {
    if (k) os << ";";
    for (int m = 0; m < cfg.vis.M; ++m) os << (m ? "," : "") << fmt_double(cfg.vis.at(k, m));
  }
  os << "\n";
  os << "train_scenes = " << cfg.train_scenes << "\n";
  os << "eval_scenes = " << cfg.eval_scenes << "\n";
  return os.str();
}

inline DatasetConfig parse_manifest(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "charm-dataset v1")
    throw std::runtime_error("manifest: bad header");
  DatasetConfig cfg;
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find(" = ");
    if (eq == std::string::npos) throw std::runtime_error("manifest: bad line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto need = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("manifest: missing key " + k);
    return it->second;
  };
  cfg.seed = std::stoull(need("seed"));
  cfg.spec.H = std::stoi(need("height"));
  cfg.spec.W = std::stoi(need("width"));
  cfg.spec.K = std::stoi(need("classes"));
  cfg.spec.shapes_min = std::stoi(need("shapes_min"));
  cfg.spec.shapes_max = std::stoi(need("shapes_max"));
  cfg.spec.noise_sigma = std::stod(need("noise_sigma"));
  cfg.spec.modality_names.clear();
  cfg.spec.modality_textures.clear();
  {
    std::istringstream ms(need("modalities"));
    std::string item;
    while (std::getline(ms, item, ',')) {
      auto colon = item.find(':');
      if (colon == std::string::npos) throw std::runtime_error("manifest: bad modality: " + item);
      cfg.spec.modality_names.push_back(item.substr(0, colon));
      cfg.spec.modality_textures.push_back(texture_from_name(item.substr(colon + 1)));
    }
  }
  {
    cfg.vis.K = cfg.spec.K;
    cfg.vis.M = cfg.spec.modalities();
    cfg.vis.v.clear();
    std::istringstream vs(need("visibility"));
    std::string row;
    while (std::getline(vs, row, ';')) {
      std::istringstream rs(row);
      std::string cell;
      while (std::getline(rs, cell, ',')) cfg.vis.v.push_back(std::stod(cell));
    }
    if ((int)cfg.vis.v.size() != cfg.vis.K * cfg.vis.M)
      throw std::runtime_error("manifest: visibility size mismatch");
  }
  cfg.train_scenes = std::stoi(need("train_scenes"));
  cfg.eval_scenes = std::stoi(need("eval_scenes"));
  return cfg;
}

inline void save_sample(const std::string& scene_dir, const Sample& s, const SceneSpec& spec) {
  std::filesystem::create_directories(scene_dir);
  for (const auto& [m, img] : s.images)
    write_f32_tensor(scene_dir + "/" + spec.modality_names[m] + ".f32", img);
  write_label_raster(scene_dir + "/labels.u16", s.labels, s.H, s.W);
}

inline Sample load_sample(const std::string& scene_dir, const SceneSpec& spec) {
  Sample s;
  s.labels = read_label_raster(scene_dir + "/labels.u16", s.H, s.W);
  for (int m = 0; m < spec.modalities(); ++m)
    s.images.emplace(m, read_f32_tensor(scene_dir + "/" + spec.modality_names[m] + ".f32",
                                        {3, s.H, s.W}));
  return s;
}

inline uint64_t scene_seed(uint64_t dataset_seed, int split_index, int scene_index) {
  return derive_seed(dataset_seed, 0x5ce9e, (uint64_t)split_index, (uint64_t)scene_index);
}

// Writes the full dataset; deterministic in the config, so reruns are
// byte-identical.
inline void write_dataset(const std::string& root, const DatasetConfig& cfg) {
  cfg.spec.validate();
  cfg.vis.validate();
  std::filesystem::create_directories(root);
  {
    std::ofstream f(root + "/manifest.txt", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write manifest");
    f << manifest_text(cfg);
  }
  const char* splits[2] = {"train", "eval"};
  const int counts[2] = {cfg.train_scenes, cfg.eval_scenes};
  for (int si = 0; si < 2; ++si)
    for (int i = 0; i < counts[si]; ++i) {
      Sample s = generate(scene_seed(cfg.seed, si, i), cfg.spec, cfg.vis);
      save_sample(root + "/" + splits[si] + "/" + detail_ds::scene_dir_name(i), s, cfg.spec);
    }
}

inline DatasetConfig read_dataset_config(const std::string& root) {
  std::ifstream f(root + "/manifest.txt", std::ios::binary);
  if (!f) throw std::runtime_error("cannot read manifest at " + root);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_manifest(os.str());
}

inline std::vector<Sample> load_split(const std::string& root, const DatasetConfig& cfg,
                                      const std::string& split) {
  const int n = split == "train" ? cfg.train_scenes : cfg.eval_scenes;
  std::vector<Sample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(load_sample(root + "/" + split + "/" + detail_ds::scene_dir_name(i), cfg.spec));
  return out;
}

}  // namespace charm
