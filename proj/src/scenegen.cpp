// SPDX-License-Identifier: Apache-2.0
#include "bevcon/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "bevcon/rng.hpp"
#include "bevcon/serialize.hpp"

namespace fs = std::filesystem;

namespace bevcon {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ClassProto {
  Vec3 dims;
  double color[3];
};

// Distinct hues so class identity is visually recoverable.
const ClassProto kClasses[4] = {
    {{4.4, 1.9, 1.6}, {0.85, 0.16, 0.10}},   // car-like, red
    {{6.0, 2.3, 2.4}, {0.12, 0.35, 0.90}},   // van-like, blue
    {{9.0, 2.8, 3.1}, {0.93, 0.80, 0.12}},   // bus-like, yellow
    {{2.2, 1.4, 1.8}, {0.80, 0.18, 0.78}},   // cart-like, magenta
};

double ground_texture(double x, double y) {
  int cx = static_cast<int>(std::floor(x / 2.0));
  int cy = static_cast<int>(std::floor(y / 2.0));
  double checker = ((cx + cy) & 1) ? 0.05 : -0.05;
  int nx = static_cast<int>(std::floor(x));
  int ny = static_cast<int>(std::floor(y));
  std::uint64_t h = fnv1a64(&nx, sizeof(nx));
  h = fnv1a64(&ny, sizeof(ny), h);
  double noise = (static_cast<double>(h & 0xffff) / 65535.0 - 0.5) * 0.08;
  return 0.34 + checker + noise;
}

void render_background(const CameraModel& cam, Image& img) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      Vec3 p1 = unproject_pixel(cam, x + 0.5, y + 0.5, 1.0);
      Vec3 dir{p1[0] - cam.translation[0], p1[1] - cam.translation[1], p1[2] - cam.translation[2]};
      if (dir[2] < -1e-9) {
        double s = -cam.translation[2] / dir[2];
        double gx = cam.translation[0] + s * dir[0];
        double gy = cam.translation[1] + s * dir[1];
        double dist = s * std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        double fade = std::clamp(1.0 - dist / 140.0, 0.55, 1.0);
        double g = ground_texture(gx, gy) * fade;
        img.at(y, x, 0) = g * 0.95;
        img.at(y, x, 1) = g;
        img.at(y, x, 2) = g * 0.9;
      } else {
        double t = static_cast<double>(y) / img.height;  // 0 at top
        img.at(y, x, 0) = 0.55 + 0.1 * t;
        img.at(y, x, 1) = 0.68 + 0.08 * t;
        img.at(y, x, 2) = 0.85;
      }
    }
  }
}

// Fills a convex quad given in cyclic order; pixels are tested at their
// centers. Returns nothing; out-of-image parts are clipped by the loop range.
void fill_quad(Image& img, std::vector<int>* mask, const double px[4], const double py[4],
               const double rgb[3], int instance_id) {
  double x_lo = std::min(std::min(px[0], px[1]), std::min(px[2], px[3]));
  double x_hi = std::max(std::max(px[0], px[1]), std::max(px[2], px[3]));
  double y_lo = std::min(std::min(py[0], py[1]), std::min(py[2], py[3]));
  double y_hi = std::max(std::max(py[0], py[1]), std::max(py[2], py[3]));
  int x0 = std::max(0, static_cast<int>(std::floor(x_lo)));
  int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(x_hi)));
  int y0 = std::max(0, static_cast<int>(std::floor(y_lo)));
  int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(y_hi)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      double qx = x + 0.5, qy = y + 0.5;
      int pos = 0, neg = 0;
      for (int i = 0; i < 4; ++i) {
        int j = (i + 1) & 3;
        double e = (px[j] - px[i]) * (qy - py[i]) - (py[j] - py[i]) * (qx - px[i]);
        if (e >= 0) ++pos;
        if (e <= 0) ++neg;
      }
      if (pos == 4 || neg == 4) {
        img.at(y, x, 0) = rgb[0];
        img.at(y, x, 1) = rgb[1];
        img.at(y, x, 2) = rgb[2];
        if (mask) (*mask)[static_cast<size_t>(y) * img.width + x] = instance_id;
      }
    }
  }
}

void render_box(const CameraModel& cam, const Box3D& box, const double base_color[3], Image& img,
                std::vector<int>* mask) {
  auto corners = box3d_corners(box);
  // Faces in cyclic corner order; bottom face is never visible from the rig.
  static const int kFaces[6][4] = {
      {4, 5, 7, 6},  // top
      {1, 3, 7, 5},  // +x
      {0, 2, 6, 4},  // -x
      {2, 3, 7, 6},  // +y
      {0, 1, 5, 4},  // -y
      {0, 1, 3, 2},  // bottom
  };
  static const double kShade[6] = {1.0, 0.85, 0.55, 0.72, 0.72, 0.4};

  double dx = box.center[0] - cam.translation[0];
  double dy = box.center[1] - cam.translation[1];
  double dist = std::sqrt(dx * dx + dy * dy);
  double atten = std::clamp(1.0 - dist / 90.0, 0.45, 1.0);

  // Order faces far-to-near so nearer faces paint over.
  struct FaceDraw {
    int face;
    double depth;
  };
  std::vector<FaceDraw> order;
  std::array<std::optional<PixelPoint>, 8> proj;
  for (int i = 0; i < 8; ++i) proj[i] = project_point(cam, corners[i]);
  for (int f = 0; f < 6; ++f) {
    bool ok = true;
    double depth = 0.0;
    for (int k = 0; k < 4; ++k) {
      const auto& p = proj[kFaces[f][k]];
      if (!p || p->depth < 1e-3) {
        ok = false;
        break;
      }
      depth += p->depth;
    }
    if (ok) order.push_back({f, depth * 0.25});
  }
  std::sort(order.begin(), order.end(),
            [](const FaceDraw& a, const FaceDraw& b) { return a.depth > b.depth; });
  for (const auto& fd : order) {
    double px[4], py[4], rgb[3];
    for (int k = 0; k < 4; ++k) {
      const auto& p = proj[kFaces[fd.face][k]];
      px[k] = p->u;
      py[k] = p->v;
    }
    for (int c = 0; c < 3; ++c)
      rgb[c] = std::clamp(base_color[c] * kShade[fd.face] * atten, 0.0, 1.0);
    fill_quad(img, mask, px, py, rgb, box.instance_id);
  }
}

}  // namespace

Vec3 class_prototype_dims(int class_id) {
  return kClasses[class_id % 4].dims;
}

std::vector<CameraModel> make_camera_rig(const SceneGenConfig& cfg) {
  std::vector<CameraModel> cams(cfg.n_views);
  double hfov = cfg.fov_overlap * 2.0 * kPi / cfg.n_views;
  hfov = std::min(hfov, 0.85 * kPi);
  for (int k = 0; k < cfg.n_views; ++k) {
    double heading = 2.0 * kPi * k / cfg.n_views;
    double ch = std::cos(heading), sh = std::sin(heading);
    CameraModel& cam = cams[k];
    cam.image_width = cfg.image_width;
    cam.image_height = cfg.image_height;
    cam.fx = cam.fy = (cfg.image_width / 2.0) / std::tan(hfov / 2.0);
    cam.cx = cfg.image_width / 2.0;
    cam.cy = cfg.image_height / 2.0;
    // Camera axes in ego coords: optical axis along the heading, x_cam to the
    // right of it, y_cam straight down.
    cam.rotation = {sh, 0.0, ch, -ch, 0.0, sh, 0.0, -1.0, 0.0};
    cam.translation = {cfg.camera_radius * ch, cfg.camera_radius * sh, cfg.camera_height};
  }
  return cams;
}

Scene generate_scene(const SceneGenConfig& cfg, std::uint64_t scene_seed,
                     std::vector<std::vector<int>>* id_mask) {
  if (cfg.n_objects_min < 2 || cfg.n_objects_max < cfg.n_objects_min)
    throw std::runtime_error("scenegen: object count range invalid (need n_min >= 2)");
  Scene scene;
  scene.scene_id = static_cast<int>(scene_seed);
  scene.cameras = make_camera_rig(cfg);

  Rng rng = Rng(cfg.seed).fork(0x5ce9e, scene_seed);
  int n = rng.uniform_int(cfg.n_objects_min, cfg.n_objects_max);
  for (int i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Box3D box;
      box.class_id = rng.uniform_int(0, cfg.n_classes - 1);
      const Vec3 proto = class_prototype_dims(box.class_id);
      box.length = proto[0] * (1.0 + cfg.dim_jitter * rng.uniform(-1.0, 1.0));
      box.width = proto[1] * (1.0 + cfg.dim_jitter * rng.uniform(-1.0, 1.0));
      box.height = proto[2] * (1.0 + cfg.dim_jitter * rng.uniform(-1.0, 1.0));
      double r = rng.uniform(cfg.placement_min_radius, cfg.placement_max_radius);
      double ang = rng.uniform(-kPi, kPi);
      box.center = {r * std::cos(ang), r * std::sin(ang), box.height * 0.5};
      box.yaw = wrap_angle(rng.uniform(-kPi, kPi));
      box.instance_id = i;
      if (!cfg.bev.contains(box.center[0], box.center[1])) continue;
      bool overlap = false;
      for (const auto& other : scene.boxes) {
        if (bev_iou(box, other) >= 0.05) {
          overlap = true;
          break;
        }
      }
      if (!overlap) {
        scene.boxes.push_back(box);
        placed = true;
      }
    }
    if (!placed)
      throw std::runtime_error("scenegen: could not place object without overlap (config too dense)");
  }

  if (id_mask) {
    id_mask->assign(cfg.n_views,
                    std::vector<int>(static_cast<size_t>(cfg.image_height) * cfg.image_width, -1));
  }
  scene.images.resize(cfg.n_views);
  for (int k = 0; k < cfg.n_views; ++k) {
    Image& img = scene.images[k];
    img = Image(cfg.image_height, cfg.image_width);
    render_background(scene.cameras[k], img);
    // Far-to-near painter ordering per view.
    std::vector<int> order(scene.boxes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    const CameraModel& cam = scene.cameras[k];
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      auto d = [&](const Box3D& bx) {
        double dx = bx.center[0] - cam.translation[0];
        double dy = bx.center[1] - cam.translation[1];
        return dx * dx + dy * dy;
      };
      return d(scene.boxes[a]) > d(scene.boxes[b]);
    });
    for (int idx : order) {
      const Box3D& box = scene.boxes[idx];
      double color[3];
      Rng tint = Rng(cfg.seed).fork(0x71e7, scene_seed).fork(box.instance_id);
      for (int c = 0; c < 3; ++c)
        color[c] = std::clamp(kClasses[box.class_id % 4].color[c] + 0.12 * tint.uniform(-1.0, 1.0),
                              0.02, 1.0);
      render_box(cam, box, color, img, id_mask ? &(*id_mask)[k] : nullptr);
    }
    img.quantize_8bit();
  }
  return scene;
}

nlohmann::json SceneGenConfig::to_json() const {
  nlohmann::json j;
  j["n_views"] = n_views;
  j["image_height"] = image_height;
  j["image_width"] = image_width;
  j["bev"] = {{"x_min", bev.x_min}, {"x_max", bev.x_max}, {"y_min", bev.y_min},
              {"y_max", bev.y_max}, {"grid_h", bev.grid_h}, {"grid_w", bev.grid_w}};
  j["n_objects_min"] = n_objects_min;
  j["n_objects_max"] = n_objects_max;
  j["n_classes"] = n_classes;
  j["dim_jitter"] = dim_jitter;
  j["placement_min_radius"] = placement_min_radius;
  j["placement_max_radius"] = placement_max_radius;
  j["camera_height"] = camera_height;
  j["camera_radius"] = camera_radius;
  j["fov_overlap"] = fov_overlap;
  j["seed"] = seed;
  return j;
}

SceneGenConfig SceneGenConfig::from_json(const nlohmann::json& j) {
  SceneGenConfig c;
  c.n_views = j.at("n_views").get<int>();
  c.image_height = j.at("image_height").get<int>();
  c.image_width = j.at("image_width").get<int>();
  const auto& b = j.at("bev");
  c.bev = {b.at("x_min").get<double>(), b.at("x_max").get<double>(),
           b.at("y_min").get<double>(), b.at("y_max").get<double>(),
           b.at("grid_h").get<int>(),   b.at("grid_w").get<int>()};
  c.n_objects_min = j.at("n_objects_min").get<int>();
  c.n_objects_max = j.at("n_objects_max").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.dim_jitter = j.at("dim_jitter").get<double>();
  c.placement_min_radius = j.at("placement_min_radius").get<double>();
  c.placement_max_radius = j.at("placement_max_radius").get<double>();
  c.camera_height = j.at("camera_height").get<double>();
  c.camera_radius = j.at("camera_radius").get<double>();
  c.fov_overlap = j.at("fov_overlap").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

std::string SceneGenConfig::canonical_text() const { return dump_json_17g(to_json()); }

std::string SceneGenConfig::config_hash() const { return hash_hex(canonical_text()); }

namespace {

std::string scene_dir_name(int scene_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06d", scene_id);
  return buf;
}

nlohmann::json camera_to_json(const CameraModel& c) {
  nlohmann::json j;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["rotation"] = c.rotation;
  j["translation"] = c.translation;
  j["image_width"] = c.image_width;
  j["image_height"] = c.image_height;
  return j;
}

CameraModel camera_from_json(const nlohmann::json& j) {
  CameraModel c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.rotation = j.at("rotation").get<std::array<double, 9>>();
  c.translation = j.at("translation").get<Vec3>();
  c.image_width = j.at("image_width").get<int>();
  c.image_height = j.at("image_height").get<int>();
  return c;
}

nlohmann::json box_to_json(const Box3D& b) {
  nlohmann::json j;
  j["center"] = b.center;
  j["length"] = b.length;
  j["width"] = b.width;
  j["height"] = b.height;
  j["yaw"] = b.yaw;
  j["class_id"] = b.class_id;
  j["instance_id"] = b.instance_id;
  return j;
}

Box3D box_from_json(const nlohmann::json& j) {
  Box3D b;
  b.center = j.at("center").get<Vec3>();
  b.length = j.at("length").get<double>();
  b.width = j.at("width").get<double>();
  b.height = j.at("height").get<double>();
  b.yaw = j.at("yaw").get<double>();
  b.class_id = j.at("class_id").get<int>();
  b.instance_id = j.at("instance_id").get<int>();
  return b;
}

void write_manifest(const std::string& root, const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["config_hash"] = m.config_hash;
  j["config"] = m.config.to_json();
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& e : m.scenes) scenes.push_back({{"scene_id", e.scene_id}, {"seed", e.seed}});
  j["scenes"] = scenes;
  write_file_atomic(root + "/manifest.json", dump_json_17g(j));
}

}  // namespace

DatasetManifest generate_dataset(const SceneGenConfig& cfg, int n_scenes, const std::string& root) {
  fs::create_directories(root);
  DatasetManifest manifest;
  int first_id = 0;
  if (fs::exists(root + "/manifest.json")) {
    manifest = load_manifest(root);
    if (manifest.config_hash != cfg.config_hash())
      throw std::runtime_error("dataset config hash mismatch at " + root);
    for (const auto& e : manifest.scenes) first_id = std::max(first_id, e.scene_id + 1);
  } else {
    manifest.config = cfg;
    manifest.config_hash = cfg.config_hash();
  }

  for (int i = 0; i < n_scenes; ++i) {
    int scene_id = first_id + i;
    Scene scene = generate_scene(cfg, static_cast<std::uint64_t>(scene_id));
    const std::string dir = root + "/" + scene_dir_name(scene_id);
    fs::create_directories(dir);
    for (int k = 0; k < cfg.n_views; ++k)
      save_ppm(scene.images[k], dir + "/view_" + std::to_string(k) + ".ppm");
    nlohmann::json ann;
    ann["scene_id"] = scene.scene_id;
    nlohmann::json cams = nlohmann::json::array();
    for (const auto& c : scene.cameras) cams.push_back(camera_to_json(c));
    ann["cameras"] = cams;
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : scene.boxes) boxes.push_back(box_to_json(b));
    ann["boxes"] = boxes;
    write_file_atomic(dir + "/annotations.json", dump_json_17g(ann));
    manifest.scenes.push_back({scene_id, static_cast<std::uint64_t>(scene_id)});
  }
  write_manifest(root, manifest);
  return manifest;
}

DatasetManifest load_manifest(const std::string& root) {
  nlohmann::json j = nlohmann::json::parse(read_file(root + "/manifest.json"));
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw std::runtime_error("unsupported dataset version");
  m.config_hash = j.at("config_hash").get<std::string>();
  m.config = SceneGenConfig::from_json(j.at("config"));
  for (const auto& e : j.at("scenes"))
    m.scenes.push_back({e.at("scene_id").get<int>(), e.at("seed").get<std::uint64_t>()});
  return m;
}

Scene load_scene(const std::string& root, const DatasetManifest& manifest, int index) {
  const auto& entry = manifest.scenes.at(static_cast<size_t>(index));
  const std::string dir = root + "/" + scene_dir_name(entry.scene_id);
  nlohmann::json ann = nlohmann::json::parse(read_file(dir + "/annotations.json"));
  Scene scene;
  scene.scene_id = ann.at("scene_id").get<int>();
  for (const auto& c : ann.at("cameras")) scene.cameras.push_back(camera_from_json(c));
  for (const auto& b : ann.at("boxes")) scene.boxes.push_back(box_from_json(b));
  scene.images.resize(scene.cameras.size());
  for (size_t k = 0; k < scene.cameras.size(); ++k)
    scene.images[k] = load_ppm(dir + "/view_" + std::to_string(k) + ".ppm");
  return scene;
}

bool scenes_equal(const Scene& a, const Scene& b) {
  if (a.scene_id != b.scene_id || a.images.size() != b.images.size() ||
      a.cameras.size() != b.cameras.size() || a.boxes.size() != b.boxes.size())
    return false;
  for (size_t i = 0; i < a.images.size(); ++i) {
    if (a.images[i].height != b.images[i].height || a.images[i].width != b.images[i].width ||
        a.images[i].px != b.images[i].px)
      return false;
  }
  for (size_t i = 0; i < a.cameras.size(); ++i) {
    const auto& x = a.cameras[i];
    const auto& y = b.cameras[i];
    if (x.fx != y.fx || x.fy != y.fy || x.cx != y.cx || x.cy != y.cy || x.rotation != y.rotation ||
        x.translation != y.translation || x.image_width != y.image_width ||
        x.image_height != y.image_height)
      return false;
  }
  for (size_t i = 0; i < a.boxes.size(); ++i) {
    const auto& x = a.boxes[i];
    const auto& y = b.boxes[i];
    if (x.center != y.center || x.length != y.length || x.width != y.width ||
        x.height != y.height || x.yaw != y.yaw || x.class_id != y.class_id ||
        x.instance_id != y.instance_id)
      return false;
  }
  return true;
}

}  // namespace bevcon
