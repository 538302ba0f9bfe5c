// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sandcage/audit.hpp"
#include "sandcage/backend_inproc.hpp"
#include "sandcage/backend_process.hpp"
#include "sandcage/callback.hpp"
#include "sandcage/core.hpp"
#include "sandcage/decode.hpp"
#include "sandcage/error.hpp"
#include "sandcage/guest/rli.hpp"
#include "sandcage/guest/rli_guest.hpp"
#include "sandcage/heap.hpp"
#include "sandcage/machine.hpp"
#include "sandcage/memory.hpp"
#include "sandcage/pool.hpp"
#include "sandcage/record.hpp"
#include "sandcage/region.hpp"
#include "sandcage/rpc.hpp"
#include "sandcage/runtime_core.hpp"
#include "sandcage/sandbox.hpp"
#include "sandcage/taint.hpp"

namespace sandcage {

inline std::shared_ptr<sandbox> sandbox::create(const sandbox_config& config) {
  parse_guest_variant(config.guest);  // reject unknown variants up front
  std::shared_ptr<sandbox> sb(new sandbox(config));
  std::unique_ptr<isolation_backend> backend;
  switch (config.backend) {
    case backend_kind::null_direct:
    case backend_kind::null_indirect:
    case backend_kind::emusfi:
      backend = std::make_unique<inproc_backend>(config.backend, config);
      break;
    case backend_kind::process:
      backend = std::make_unique<process_backend>(config);
      break;
  }
  sb->attach_backend(std::move(backend));
  return sb;
}

}  // namespace sandcage
