// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bevcon/model.hpp"
#include "bevcon/nn.hpp"

namespace bevcon {

// Single binary archive: run-config text, step counter, every parameter keyed
// by name, EMA target arrays, and optimizer moments. Written atomically.
struct Checkpoint {
  std::string config_text;
  long step = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<Tensor> ema_target;
  double ema_momentum = 0.0;
  long opt_step = 0;
  std::vector<Tensor> opt_m, opt_v;
};

void save_checkpoint(const std::string& path, const Model& model, const EmaState& ema,
                     const AdamW& opt, long step, const std::string& config_text);

Checkpoint load_checkpoint(const std::string& path);

// Copies arrays into an existing model/EMA/optimizer; throws on any name or
// shape mismatch.
void restore_model(const Checkpoint& ck, Model& model);
void restore_ema(const Checkpoint& ck, EmaState& ema);
void restore_optimizer(const Checkpoint& ck, AdamW& opt);

}  // namespace bevcon
