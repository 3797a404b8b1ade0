// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_IO_HPP
#define PSIMAP_IO_HPP

#include <string>
#include <vector>

#include "psimap/core_types.hpp"
#include "psimap/raster.hpp"
#include "psimap/sogmm.hpp"
#include "psimap/synthetic.hpp"

namespace psimap {

// --- PLY point clouds (ascii / binary_little_endian, x y z and an
// optional intensity property). Parse errors name the byte offset. ---
PointCloud load_ply(const std::string& path);
void save_ply(const std::string& path, const PointCloud& cloud, bool binary = true);

// --- PPM (P6) images; values clamped to [0, 1] on write. ---
void save_ppm(const std::string& path, const Image& img);
Image load_ppm(const std::string& path);

// --- raw planes: magic, dims, channel count, dtype tag, payload ---
void save_raw(const std::string& path, const Image& plane);
void save_raw(const std::string& path, const IntPlane& plane);
Image load_raw_image(const std::string& path);
IntPlane load_raw_int(const std::string& path);

// --- scene checkpoints: versioned binary with every surfel field,
// queries and vocabulary; byte-stable for fixed inputs ---
void save_checkpoint(const std::string& path, const SceneMap& scene);
SceneMap load_checkpoint(const std::string& path);

// --- SOGMM model export: structured text listing K components ---
void save_sogmm_model(const std::string& path, const SogmmModel& model);
SogmmModel load_sogmm_model(const std::string& path);

// --- dataset directory: manifest.json + one directory per frame with
// rgb/ids/classes planes, plus the GT cloud and eval planes ---
struct Dataset {
  int width = 0, height = 0;
  std::vector<std::string> vocabulary;
  std::vector<int> instance_class;
  std::vector<FrameBundle> train_frames;
  std::vector<FrameBundle> heldout_frames;
  std::vector<IntPlane> heldout_ids, heldout_classes;
  PointCloud cloud;
};
void save_dataset(const std::string& dir, const SyntheticScene& scene);
Dataset load_dataset(const std::string& dir);

// cameras as JSON (either explicit pose or a look-at spec)
std::string camera_to_json(const Camera& cam);
Camera camera_from_json_file(const std::string& path);

std::string bench_report_to_json(const BenchReport& report);
std::string bench_report_to_csv(const BenchReport& report);

}  // namespace psimap

#endif
