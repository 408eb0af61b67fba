// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "bevcon/augment.hpp"
#include "bevcon/contrast.hpp"
#include "bevcon/model.hpp"
#include "bevcon/nn.hpp"
#include "bevcon/pooling.hpp"

namespace bevcon {

// Flat "key = value" config text with '#' comments and dotted key paths.
// Typed getters mark keys consumed; unknown leftovers are reported as errors
// so typos in files or --set overrides can't silently fall back to defaults.
class KeyValues {
 public:
  static KeyValues parse_text(const std::string& text);
  static KeyValues parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  void apply_override(const std::string& key_eq_value);  // "a.b.c=v"

  std::string get_string(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key, double def) const;
  int get_int(const std::string& key, int def) const;
  bool get_bool(const std::string& key, bool def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;

  std::vector<std::string> unconsumed() const;
  void require_all_consumed() const;  // throws listing unknown keys

 private:
  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> consumed_;
};

struct RunConfig {
  // data
  std::string dataset = "data/scenes";
  std::string dataset_hash;  // optional pin; empty accepts any
  int val_modulo = 10;       // scene_id % modulo == modulo-1 -> validation split

  // run
  std::uint64_t seed = 0;
  int epochs = 24;
  int batch_size = 8;
  int eval_every = 1;  // epochs between validation evals; the last epoch always evals

  // model sizes (geometry fields of `model` are filled from the dataset)
  ModelConfig model;

  // losses
  double lambda_in = 1.0;
  double lambda_pers = 1.0;
  double lambda_img = 1.0;  // image-level baseline coefficient
  double ema_momentum = 0.99;
  AdamWConfig optim;
  ContrastConfig contrast;
  PoolConfig pool;
  bool use_projection_head = true;
  AugConfig aug;

  // ablation flags
  bool enable_instance = true;
  bool enable_perspective = true;
  bool enable_image_level = false;
  bool multilayer = true;
  bool scale_aware = true;
  bool detach_prime_bev = false;
  bool det_on_both_branches = false;

  // eval
  double eval_score_threshold = 0.1;
  int eval_max_dets = 64;

  static RunConfig from_keyvalues(KeyValues& kv);
  static RunConfig from_text(const std::string& text, const std::vector<std::string>& overrides = {});
  static RunConfig from_file(const std::string& path, const std::vector<std::string>& overrides = {});

  // every key, sorted, one per line, 17-significant-digit floats
  std::string canonical_text() const;
  std::string config_hash() const;

  // default config file with one comment per key
  static std::string documented_template();
};

}  // namespace bevcon
