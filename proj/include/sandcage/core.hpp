// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace sandcage {

// Identity tag for the sandbox a value originated from.  0 means
// "unattributed" (a host-constructed tainted literal).
using sandbox_id = std::uint32_t;
inline constexpr sandbox_id no_sandbox = 0;

enum class backend_kind : std::uint32_t {
  null_direct,    // no isolation, direct dispatch to the linked guest
  null_indirect,  // no isolation, mandatory table-routed dispatch
  emusfi,         // in-process masked heap
  process,        // worker process over shared memory
};

enum class sync_mode : std::uint32_t {
  spin = 0,
  event = 1,
};

// Workload hints leases translate into sync modes on process backends.
enum class work_hint : std::uint32_t {
  latency,  // synchronous call bursts -> spin
  bulk,     // long guest-side work -> event
};

// Policy for a second invoke arriving while one is in flight on the same
// sandbox from a different thread.
enum class contention_mode : std::uint32_t {
  block,
  fail,
};

inline constexpr std::uint32_t callback_table_size = 64;
inline constexpr std::uint32_t context_store_size = 16;
inline constexpr std::uint32_t max_invoke_depth = 8;
inline constexpr std::uint32_t min_region_size = 1u << 20;
inline constexpr std::uint64_t default_region_size = 1ull << 26;

constexpr bool is_power_of_two(std::uint64_t v) {
  return v != 0 && (v & (v - 1)) == 0;
}

}  // namespace sandcage
