// SPDX-License-Identifier: Apache-2.0
#include "bevcon/config.hpp"

#include <cstdlib>
#include <sstream>
#include <stdexcept>

#include "bevcon/serialize.hpp"

namespace bevcon {

static std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

KeyValues KeyValues::parse_text(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
    out.kv_[key] = trim(line.substr(eq + 1));
  }
  return out;
}

KeyValues KeyValues::parse_file(const std::string& path) { return parse_text(read_file(path)); }

void KeyValues::set(const std::string& key, const std::string& value) { kv_[key] = value; }

void KeyValues::apply_override(const std::string& key_eq_value) {
  const size_t eq = key_eq_value.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::runtime_error("override must be key=value: " + key_eq_value);
  kv_[trim(key_eq_value.substr(0, eq))] = trim(key_eq_value.substr(eq + 1));
}

std::string KeyValues::get_string(const std::string& key, const std::string& def) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  return it == kv_.end() ? def : it->second;
}

double KeyValues::get_double(const std::string& key, double def) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  char* end = nullptr;
  const double v = std::strtod(it->second.c_str(), &end);
  if (end == it->second.c_str() || *end != '\0')
    throw std::runtime_error("config key " + key + ": bad number '" + it->second + "'");
  return v;
}

int KeyValues::get_int(const std::string& key, int def) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  char* end = nullptr;
  const long v = std::strtol(it->second.c_str(), &end, 10);
  if (end == it->second.c_str() || *end != '\0')
    throw std::runtime_error("config key " + key + ": bad integer '" + it->second + "'");
  return static_cast<int>(v);
}

bool KeyValues::get_bool(const std::string& key, bool def) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw std::runtime_error("config key " + key + ": bad boolean '" + it->second + "'");
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t def) const {
  consumed_.insert(key);
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
  if (end == it->second.c_str() || *end != '\0')
    throw std::runtime_error("config key " + key + ": bad integer '" + it->second + "'");
  return v;
}

std::vector<std::string> KeyValues::unconsumed() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : kv_)
    if (!consumed_.count(k)) out.push_back(k);
  return out;
}

void KeyValues::require_all_consumed() const {
  const auto left = unconsumed();
  if (left.empty()) return;
  std::string msg = "unknown config keys:";
  for (const auto& k : left) msg += " " + k;
  throw std::runtime_error(msg);
}

// ---------------------------------------------------------------------------

static std::array<int, 4> parse_channels(const std::string& s) {
  std::array<int, 4> out{};
  std::istringstream in(s);
  std::string tok;
  int i = 0;
  while (std::getline(in, tok, ',')) {
    if (i >= 4) throw std::runtime_error("model.stage_channels: expected 4 values");
    out[static_cast<size_t>(i++)] = std::stoi(trim(tok));
  }
  if (i != 4) throw std::runtime_error("model.stage_channels: expected 4 values");
  return out;
}

RunConfig RunConfig::from_keyvalues(KeyValues& kv) {
  RunConfig c;
  c.dataset = kv.get_string("data.path", c.dataset);
  c.dataset_hash = kv.get_string("data.config_hash", c.dataset_hash);
  c.val_modulo = kv.get_int("data.val_modulo", c.val_modulo);

  c.seed = kv.get_u64("run.seed", c.seed);
  c.epochs = kv.get_int("run.epochs", c.epochs);
  c.batch_size = kv.get_int("run.batch_size", c.batch_size);
  c.eval_every = kv.get_int("run.eval_every", c.eval_every);

  c.model.stage_channels = parse_channels(kv.get_string("model.stage_channels", "16,32,64,96"));
  c.model.bev_channels = kv.get_int("model.bev_channels", c.model.bev_channels);
  c.model.depth_bins = kv.get_int("model.depth_bins", c.model.depth_bins);
  c.model.depth_min = kv.get_double("model.depth_min", c.model.depth_min);
  c.model.depth_max = kv.get_double("model.depth_max", c.model.depth_max);
  c.model.n_refine_layers = kv.get_int("model.refine_layers", c.model.n_refine_layers);
  c.model.head_channels = kv.get_int("model.head_channels", c.model.head_channels);
  c.model.proj_dim = kv.get_int("model.proj_dim", c.model.proj_dim);

  c.lambda_in = kv.get_double("loss.lambda_instance", c.lambda_in);
  c.lambda_pers = kv.get_double("loss.lambda_perspective", c.lambda_pers);
  c.lambda_img = kv.get_double("loss.lambda_image_level", c.lambda_img);
  c.ema_momentum = kv.get_double("ema.momentum", c.ema_momentum);

  c.optim.lr = kv.get_double("optim.lr", c.optim.lr);
  c.optim.weight_decay = kv.get_double("optim.weight_decay", c.optim.weight_decay);
  c.optim.clip_norm = kv.get_double("optim.clip_norm", c.optim.clip_norm);

  c.contrast.temperature = kv.get_double("contrast.temperature", c.contrast.temperature);
  c.contrast.layer_scale = kv.get_double("contrast.layer_scale", c.contrast.layer_scale);
  c.contrast.include_positive_in_denominator = kv.get_bool(
      "contrast.include_positive_in_denominator", c.contrast.include_positive_in_denominator);
  c.contrast.symmetric = kv.get_bool("contrast.symmetric", c.contrast.symmetric);

  c.pool.output_size = kv.get_int("pool.output_size", c.pool.output_size);
  c.pool.samples_per_bin = kv.get_int("pool.samples_per_bin", c.pool.samples_per_bin);
  c.pool.center_scale = kv.get_double("pool.center_scale", c.pool.center_scale);
  const std::string mode = kv.get_string("pool.mode", "align");
  if (mode == "align") c.pool.mode = PoolConfig::Mode::align;
  else if (mode == "gather") c.pool.mode = PoolConfig::Mode::gather;
  else throw std::runtime_error("pool.mode: expected align or gather, got '" + mode + "'");
  c.use_projection_head = kv.get_bool("pool.use_projection_head", c.use_projection_head);

  c.aug.image.scale_min = kv.get_double("aug.image.scale_min", c.aug.image.scale_min);
  c.aug.image.scale_max = kv.get_double("aug.image.scale_max", c.aug.image.scale_max);
  c.aug.image.rotation_max_deg = kv.get_double("aug.image.rotation_max_deg", c.aug.image.rotation_max_deg);
  c.aug.image.hflip_prob = kv.get_double("aug.image.hflip_prob", c.aug.image.hflip_prob);
  c.aug.image.crop_jitter_frac = kv.get_double("aug.image.crop_jitter_frac", c.aug.image.crop_jitter_frac);
  c.aug.image.photometric_strength =
      kv.get_double("aug.image.photometric_strength", c.aug.image.photometric_strength);
  c.aug.bev.rotation_max_deg = kv.get_double("aug.bev.rotation_max_deg", c.aug.bev.rotation_max_deg);
  c.aug.bev.scale_min = kv.get_double("aug.bev.scale_min", c.aug.bev.scale_min);
  c.aug.bev.scale_max = kv.get_double("aug.bev.scale_max", c.aug.bev.scale_max);
  c.aug.bev.flip_prob = kv.get_double("aug.bev.flip_prob", c.aug.bev.flip_prob);
  c.aug.shared_bev_aug = kv.get_bool("aug.shared_bev_aug", c.aug.shared_bev_aug);

  c.enable_instance = kv.get_bool("ablate.enable_instance", c.enable_instance);
  c.enable_perspective = kv.get_bool("ablate.enable_perspective", c.enable_perspective);
  c.enable_image_level = kv.get_bool("ablate.enable_image_level", c.enable_image_level);
  c.multilayer = kv.get_bool("ablate.multilayer", c.multilayer);
  c.scale_aware = kv.get_bool("ablate.scale_aware", c.scale_aware);
  c.detach_prime_bev = kv.get_bool("ablate.detach_prime_bev", c.detach_prime_bev);
  c.det_on_both_branches = kv.get_bool("ablate.det_on_both_branches", c.det_on_both_branches);

  c.eval_score_threshold = kv.get_double("eval.score_threshold", c.eval_score_threshold);
  c.eval_max_dets = kv.get_int("eval.max_dets", c.eval_max_dets);

  kv.require_all_consumed();

  if (c.lambda_in < 0 || c.lambda_pers < 0 || c.lambda_img < 0)
    throw std::runtime_error("loss coefficients must be >= 0");
  if (c.batch_size < 1) throw std::runtime_error("run.batch_size must be >= 1");
  if (c.contrast.temperature <= 0) throw std::runtime_error("contrast.temperature must be > 0");
  if (c.contrast.layer_scale <= 0) throw std::runtime_error("contrast.layer_scale must be > 0");
  if (c.pool.center_scale <= 0 || c.pool.center_scale > 1)
    throw std::runtime_error("pool.center_scale must be in (0, 1]");
  if (c.ema_momentum < 0 || c.ema_momentum > 1)
    throw std::runtime_error("ema.momentum must be in [0, 1]");
  return c;
}

RunConfig RunConfig::from_text(const std::string& text, const std::vector<std::string>& overrides) {
  KeyValues kv = KeyValues::parse_text(text);
  for (const auto& o : overrides) kv.apply_override(o);
  return from_keyvalues(kv);
}

RunConfig RunConfig::from_file(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv = KeyValues::parse_file(path);
  for (const auto& o : overrides) kv.apply_override(o);
  return from_keyvalues(kv);
}

std::string RunConfig::canonical_text() const {
  std::map<std::string, std::string> out;
  auto put_d = [&](const char* k, double v) { out[k] = format_g17(v); };
  auto put_i = [&](const char* k, long long v) { out[k] = std::to_string(v); };
  auto put_b = [&](const char* k, bool v) { out[k] = v ? "true" : "false"; };

  out["data.path"] = dataset;
  out["data.config_hash"] = dataset_hash;
  put_i("data.val_modulo", val_modulo);
  put_i("run.seed", static_cast<long long>(seed));
  put_i("run.epochs", epochs);
  put_i("run.batch_size", batch_size);
  put_i("run.eval_every", eval_every);
  out["model.stage_channels"] = std::to_string(model.stage_channels[0]) + "," +
                                std::to_string(model.stage_channels[1]) + "," +
                                std::to_string(model.stage_channels[2]) + "," +
                                std::to_string(model.stage_channels[3]);
  put_i("model.bev_channels", model.bev_channels);
  put_i("model.depth_bins", model.depth_bins);
  put_d("model.depth_min", model.depth_min);
  put_d("model.depth_max", model.depth_max);
  put_i("model.refine_layers", model.n_refine_layers);
  put_i("model.head_channels", model.head_channels);
  put_i("model.proj_dim", model.proj_dim);
  put_d("loss.lambda_instance", lambda_in);
  put_d("loss.lambda_perspective", lambda_pers);
  put_d("loss.lambda_image_level", lambda_img);
  put_d("ema.momentum", ema_momentum);
  put_d("optim.lr", optim.lr);
  put_d("optim.weight_decay", optim.weight_decay);
  put_d("optim.clip_norm", optim.clip_norm);
  put_d("contrast.temperature", contrast.temperature);
  put_d("contrast.layer_scale", contrast.layer_scale);
  put_b("contrast.include_positive_in_denominator", contrast.include_positive_in_denominator);
  put_b("contrast.symmetric", contrast.symmetric);
  put_i("pool.output_size", pool.output_size);
  put_i("pool.samples_per_bin", pool.samples_per_bin);
  put_d("pool.center_scale", pool.center_scale);
  out["pool.mode"] = pool.mode == PoolConfig::Mode::align ? "align" : "gather";
  put_b("pool.use_projection_head", use_projection_head);
  put_d("aug.image.scale_min", aug.image.scale_min);
  put_d("aug.image.scale_max", aug.image.scale_max);
  put_d("aug.image.rotation_max_deg", aug.image.rotation_max_deg);
  put_d("aug.image.hflip_prob", aug.image.hflip_prob);
  put_d("aug.image.crop_jitter_frac", aug.image.crop_jitter_frac);
  put_d("aug.image.photometric_strength", aug.image.photometric_strength);
  put_d("aug.bev.rotation_max_deg", aug.bev.rotation_max_deg);
  put_d("aug.bev.scale_min", aug.bev.scale_min);
  put_d("aug.bev.scale_max", aug.bev.scale_max);
  put_d("aug.bev.flip_prob", aug.bev.flip_prob);
  put_b("aug.shared_bev_aug", aug.shared_bev_aug);
  put_b("ablate.enable_instance", enable_instance);
  put_b("ablate.enable_perspective", enable_perspective);
  put_b("ablate.enable_image_level", enable_image_level);
  put_b("ablate.multilayer", multilayer);
  put_b("ablate.scale_aware", scale_aware);
  put_b("ablate.detach_prime_bev", detach_prime_bev);
  put_b("ablate.det_on_both_branches", det_on_both_branches);
  put_d("eval.score_threshold", eval_score_threshold);
  put_i("eval.max_dets", eval_max_dets);

  std::string text;
  for (const auto& [k, v] : out) text += k + " = " + v + "\n";
  return text;
}

std::string RunConfig::config_hash() const { return hash_hex(canonical_text()); }

std::string RunConfig::documented_template() {
  return R"(# bevcon_lab run configuration
# Override any key on the command line with --set key=value.

data.path = data/scenes            # dataset directory (see gen-data)
data.config_hash =                 # optional dataset pin; empty accepts any
data.val_modulo = 10               # scene_id % modulo == modulo-1 -> validation

run.seed = 0
run.epochs = 24
run.batch_size = 8
run.eval_every = 1                 # epochs between validation evals

model.stage_channels = 16,32,64,96 # backbone stages at strides 2/4/8/16
model.bev_channels = 64
model.depth_bins = 32
model.depth_min = 1.0              # meters
model.depth_max = 40.0
model.refine_layers = 3            # residual BEV blocks
model.head_channels = 32
model.proj_dim = 64                # projection-head output width

loss.lambda_instance = 1.0
loss.lambda_perspective = 1.0
loss.lambda_image_level = 1.0      # only used by the image-level baseline
ema.momentum = 0.99

optim.lr = 0.0002
optim.weight_decay = 0.01
optim.clip_norm = 35.0

contrast.temperature = 0.2
contrast.layer_scale = 0.5         # multi-layer weight base
contrast.include_positive_in_denominator = false
contrast.symmetric = true

pool.output_size = 3               # S x S bins
pool.samples_per_bin = 2           # per axis
pool.center_scale = 0.6            # 2D box shrink factor
pool.mode = align                  # align | gather
pool.use_projection_head = true

aug.image.scale_min = 0.8
aug.image.scale_max = 1.2
aug.image.rotation_max_deg = 10.0
aug.image.hflip_prob = 0.5
aug.image.crop_jitter_frac = 0.1
aug.image.photometric_strength = 0.2
aug.bev.rotation_max_deg = 22.5
aug.bev.scale_min = 0.95
aug.bev.scale_max = 1.05
aug.bev.flip_prob = 0.5            # per axis
aug.shared_bev_aug = false         # one BEV transform for both branches

ablate.enable_instance = true      # BEV instance contrast
ablate.enable_perspective = true   # image-space regional contrast
ablate.enable_image_level = false  # per-view global contrast baseline
ablate.multilayer = true           # contrast on every refine layer vs last only
ablate.scale_aware = true          # shrink 2D boxes before pooling
ablate.detach_prime_bev = false    # stop-gradient into the second branch's BEV
ablate.det_on_both_branches = false

eval.score_threshold = 0.1
eval.max_dets = 64
)";
}

}  // namespace bevcon
