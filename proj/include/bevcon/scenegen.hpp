// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bevcon/geometry.hpp"
#include "bevcon/image.hpp"

namespace bevcon {

struct SceneGenConfig {
  int n_views = 6;
  int image_height = 128;
  int image_width = 224;
  BevSpec bev{-25.6, 25.6, -25.6, 25.6, 64, 64};
  int n_objects_min = 3;
  int n_objects_max = 8;
  int n_classes = 4;
  double dim_jitter = 0.15;            // relative jitter around class prototype dims
  double placement_min_radius = 4.0;   // meters from ego
  double placement_max_radius = 23.0;
  double camera_height = 1.6;
  double camera_radius = 0.8;          // mount offset from the ego origin
  double fov_overlap = 1.25;           // horizontal FOV = overlap * 2pi / n_views
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SceneGenConfig from_json(const nlohmann::json& j);
  std::string canonical_text() const;
  std::string config_hash() const;
};

struct Scene {
  int scene_id = 0;
  std::vector<Image> images;        // one per view
  std::vector<CameraModel> cameras;
  std::vector<Box3D> boxes;
};

// Prototype dimensions (length, width, height) for a class; the detection
// decoder reuses the prototype height as the class prior.
Vec3 class_prototype_dims(int class_id);

std::vector<CameraModel> make_camera_rig(const SceneGenConfig& cfg);

// Deterministic given (cfg, scene_seed). Objects are ground-plane cuboids
// with BEV-IoU below 0.05 pairwise; every rendered object pixel stays inside
// its projected 2D box. `id_mask` (optional, one int grid per view, -1 for
// background) records which instance painted each pixel.
Scene generate_scene(const SceneGenConfig& cfg, std::uint64_t scene_seed,
                     std::vector<std::vector<int>>* id_mask = nullptr);

struct DatasetManifest {
  int version = 1;
  std::string config_hash;
  SceneGenConfig config;
  struct Entry {
    int scene_id = 0;
    std::uint64_t seed = 0;
  };
  std::vector<Entry> scenes;
};

// Writes scenes under root (one directory per scene, PPM images + a JSON
// annotation record) plus manifest.json. Appending to an existing dataset
// requires a matching config hash.
DatasetManifest generate_dataset(const SceneGenConfig& cfg, int n_scenes, const std::string& root);

DatasetManifest load_manifest(const std::string& root);
Scene load_scene(const std::string& root, const DatasetManifest& manifest, int index);

bool scenes_equal(const Scene& a, const Scene& b);  // bitwise on all fields

}  // namespace bevcon
