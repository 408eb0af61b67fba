// SPDX-License-Identifier: Apache-2.0
#include "bevcon/telemetry.hpp"

namespace bevcon {

Telemetry& telemetry() {
  static Telemetry t;
  return t;
}

}  // namespace bevcon
