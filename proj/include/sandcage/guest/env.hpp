// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "sandcage/error.hpp"
#include "sandcage/machine.hpp"

namespace sandcage {

// Compiled-in guest behaviours.  The clean codec plus the fault-injection
// variants exercised by the attack regression suite.
enum class guest_variant : std::uint32_t {
  clean = 0,
  m1_oversized_scanline,
  m2_out_of_region_input_ref,
  m3_forged_callback_slot,
  m4_early_callback,
  m5_double_fetch_mutator,
  m6_host_address_probe,
  m7_context_confusion,
  m8_stale_slot_dispatch,
};

inline guest_variant parse_guest_variant(std::string_view name) {
  if (name == "clean" || name.empty()) return guest_variant::clean;
  if (name == "m1") return guest_variant::m1_oversized_scanline;
  if (name == "m2") return guest_variant::m2_out_of_region_input_ref;
  if (name == "m3") return guest_variant::m3_forged_callback_slot;
  if (name == "m4") return guest_variant::m4_early_callback;
  if (name == "m5") return guest_variant::m5_double_fetch_mutator;
  if (name == "m6") return guest_variant::m6_host_address_probe;
  if (name == "m7") return guest_variant::m7_context_confusion;
  if (name == "m8") return guest_variant::m8_stale_slot_dispatch;
  raise(violation_kind::usage, "unknown guest variant '" + std::string(name) + "'");
}

inline const char* guest_variant_name(guest_variant v) {
  switch (v) {
    case guest_variant::clean: return "clean";
    case guest_variant::m1_oversized_scanline: return "m1";
    case guest_variant::m2_out_of_region_input_ref: return "m2";
    case guest_variant::m3_forged_callback_slot: return "m3";
    case guest_variant::m4_early_callback: return "m4";
    case guest_variant::m5_double_fetch_mutator: return "m5";
    case guest_variant::m6_host_address_probe: return "m6";
    case guest_variant::m7_context_confusion: return "m7";
    case guest_variant::m8_stale_slot_dispatch: return "m8";
  }
  return "?";
}

// The facilities a guest environment provides to guest code.  Two concrete
// environments exist: the in-process one (null and emusfi backends) and the
// worker-process one.  Guest code is written against this shape only; all
// of its memory traffic goes through the accessors.
template <typename E>
concept guest_environment = requires(E& e, std::uint32_t off, std::uint32_t n,
                                     std::span<const wire_value> args, std::int32_t code) {
  { e.load_u8(off) } -> std::same_as<std::uint8_t>;
  { e.load_u32(off) } -> std::same_as<std::uint32_t>;
  e.store_u8(off, std::uint8_t{});
  e.store_u32(off, std::uint32_t{});
  e.store_u64(off, std::uint64_t{});
  { e.gmalloc(n, n) } -> std::same_as<std::uint32_t>;
  e.gfree(off);
  { e.call_host(n, args) } -> std::same_as<wire_value>;
  e.guest_exit(code);
  { e.variant() } -> std::same_as<guest_variant>;
  { e.memory_size() } -> std::same_as<std::uint64_t>;
  e.start_scanline_mutator(off);
};

// Exported guest function: uniform wire-level ABI over a concrete env.
template <typename Env>
struct guest_export {
  const char* name;
  wire_value (*fn)(Env&, std::span<const wire_value>);
};

}  // namespace sandcage
