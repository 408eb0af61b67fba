// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace bevcon {

// Global invocation counters used to verify that inference-only code paths
// never touch the training-only machinery. Cheap enough to leave on.
struct Telemetry {
  std::uint64_t contrast_calls = 0;        // grouped InfoNCE evaluations
  std::uint64_t contrast_pool_calls = 0;   // instance poolings done for contrast
  std::uint64_t ema_forward_calls = 0;     // forwards through the EMA branch
  std::uint64_t ema_update_calls = 0;
  std::uint64_t backbone_forward_calls = 0;

  void reset() { *this = Telemetry{}; }
};

Telemetry& telemetry();

}  // namespace bevcon
