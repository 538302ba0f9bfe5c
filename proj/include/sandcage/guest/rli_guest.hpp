// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <span>
#include <thread>

#include "sandcage/guest/env.hpp"
#include "sandcage/guest/rli.hpp"
#include "sandcage/machine.hpp"

namespace sandcage::rli {

// The untrusted streaming codec, written against the guest environment's
// accessors only.  One allocation holds the shared info record (offsets
// 0..27, layout registered host-side) followed by guest-private state:
//
//   +32 input_buf   u32   real input buffer offset
//   +36 input_cap   u32
//   +40 buf_pos     u32   cursor within the current chunk
//   +44 buf_len     u32   valid bytes in the current chunk
//   +48 cached_slot u32   stale slot retained by the m8 variant
//   +52 eof         u32
//   +56 row_counter u32   guest's own row progress (the public
//                         output_scanline is attacker-controlled data)
//   +64 probe       u64   m6 address-guess scratch
template <guest_environment Env>
struct codec {
  static constexpr std::uint32_t state_size = 72;
  static constexpr std::uint32_t input_cap = 4096;

  // public record fields
  static constexpr std::uint32_t f_width = 0;
  static constexpr std::uint32_t f_height = 4;
  static constexpr std::uint32_t f_scanline = 8;
  static constexpr std::uint32_t f_bytes_in_buffer = 12;
  static constexpr std::uint32_t f_next_input = 16;
  static constexpr std::uint32_t f_status = 20;
  static constexpr std::uint32_t f_client_slot = 24;
  // private state
  static constexpr std::uint32_t g_input_buf = 32;
  static constexpr std::uint32_t g_input_cap = 36;
  static constexpr std::uint32_t g_buf_pos = 40;
  static constexpr std::uint32_t g_buf_len = 44;
  static constexpr std::uint32_t g_cached_slot = 48;
  static constexpr std::uint32_t g_eof = 52;
  static constexpr std::uint32_t g_row_counter = 56;
  static constexpr std::uint32_t g_probe = 64;

  static std::uint32_t create(Env& env) {
    const std::uint32_t info = env.gmalloc(state_size, 8);
    if (info == 0) env.guest_exit(exit_oom);
    for (std::uint32_t i = 0; i < state_size; i += 4) env.store_u32(info + i, 0);

    const std::uint32_t buf = env.gmalloc(input_cap, 8);
    if (buf == 0) env.guest_exit(exit_oom);
    env.store_u32(info + g_input_buf, buf);
    env.store_u32(info + g_input_cap, input_cap);

    if (env.variant() == guest_variant::m2_out_of_region_input_ref) {
      // Advertise an input buffer beyond the region end.
      const std::uint64_t beyond = env.memory_size() + 0x40;
      env.store_u32(info + f_next_input,
                    static_cast<std::uint32_t>(beyond > 0xFFFFFFFFull ? 0xFFFFFFF0ull : beyond));
    } else {
      env.store_u32(info + f_next_input, buf);
    }

    if (env.variant() == guest_variant::m6_host_address_probe) {
      // Plant plausible host-address guesses in guest-readable memory.
      env.store_u64(info + g_probe, 0x00007F31DEAD4000ull);
      env.store_u64(buf, 0x00005555AAAA1000ull);
      env.store_u64(buf + 8, 0x00007FFFFFFDE000ull);
    }
    env.store_u32(info + f_status, status_suspended);
    return info;
  }

  static std::uint8_t next_byte(Env& env, std::uint32_t info) {
    std::uint32_t pos = env.load_u32(info + g_buf_pos);
    const std::uint32_t len = env.load_u32(info + g_buf_len);
    if (pos >= len) {
      refill(env, info);
      pos = 0;
    }
    const std::uint32_t buf = env.load_u32(info + g_input_buf);
    const std::uint8_t b = env.load_u8(buf + pos);
    env.store_u32(info + g_buf_pos, pos + 1);
    return b;
  }

  static void refill(Env& env, std::uint32_t info) {
    if (env.load_u32(info + g_eof) != 0) env.guest_exit(exit_truncated);
    const std::uint32_t slot_word = env.load_u32(info + f_client_slot);
    std::uint32_t fill_slot = (slot_word & 0xFFFFu);
    if (fill_slot == 0) env.guest_exit(exit_truncated);
    fill_slot -= 1;
    if (env.variant() == guest_variant::m3_forged_callback_slot) {
      fill_slot = 37;  // never granted by the host
    }
    std::uint32_t info_arg = info;
    if (env.variant() == guest_variant::m7_context_confusion) {
      // Try to hand the host a different decoder's record.
      info_arg = info ^ 0x40;
    }
    const wire_value args[] = {{wire_kind::ref, info_arg}};
    const wire_value got = env.call_host(fill_slot, std::span<const wire_value>(args));
    const auto n = static_cast<std::uint32_t>(got.bits);
    if (n == 0) {
      env.store_u32(info + g_eof, 1);
      env.guest_exit(exit_truncated);
    }
    env.store_u32(info + g_buf_pos, 0);
    env.store_u32(info + g_buf_len, n);
  }

  static std::uint32_t read_u32_stream(Env& env, std::uint32_t info) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; i++) {
      v |= static_cast<std::uint32_t>(next_byte(env, info)) << (8 * i);
    }
    return v;
  }

  static std::uint32_t read_header(Env& env, std::uint32_t info) {
    if (env.variant() == guest_variant::m4_early_callback) {
      // Dispatch the slot the host grants later, before it exists.
      const std::uint32_t guess = ((env.load_u32(info + f_client_slot) & 0xFFFFu)) % 64;
      const wire_value args[] = {{wire_kind::ref, info},
                                 {wire_kind::u32, 0}};
      env.call_host(guess, std::span<const wire_value>(args));
    }
    const std::array<std::uint8_t, 4> m = {next_byte(env, info), next_byte(env, info),
                                           next_byte(env, info), next_byte(env, info)};
    if (m[0] != 'R' || m[1] != 'L' || m[2] != 'I' || m[3] != '1') {
      env.guest_exit(exit_bad_magic);
    }
    const std::uint32_t w = read_u32_stream(env, info);
    const std::uint32_t h = read_u32_stream(env, info);
    env.store_u32(info + f_width, w);
    env.store_u32(info + f_height, h);
    env.store_u32(info + f_scanline, 0);
    env.store_u32(info + g_row_counter, 0);
    env.store_u32(info + f_status, status_header_ok);
    return status_header_ok;
  }

  static std::uint32_t decode_row(Env& env, std::uint32_t info, std::uint32_t row_buf) {
    const std::uint32_t width = env.load_u32(info + f_width);
    const std::uint32_t height = env.load_u32(info + f_height);
    std::uint32_t row = env.load_u32(info + g_row_counter);
    if (row >= height) {
      env.store_u32(info + f_status, status_done);
      return status_done;
    }

    std::uint32_t filled = 0;
    for (;;) {
      const std::uint8_t count = next_byte(env, info);
      if (count == 0) break;
      const std::uint8_t value = next_byte(env, info);
      if (filled + count > width) env.guest_exit(exit_row_overflow);
      for (std::uint32_t i = 0; i < count; i++) env.store_u8(row_buf + filled + i, value);
      filled += count;
    }
    if (filled != width) env.guest_exit(exit_row_overflow);

    row += 1;
    env.store_u32(info + g_row_counter, row);
    if (env.variant() == guest_variant::m1_oversized_scanline && row >= 1) {
      env.store_u32(info + f_scanline, height + 1000 + row);
    } else {
      env.store_u32(info + f_scanline, row);
    }
    if (env.variant() == guest_variant::m5_double_fetch_mutator) {
      env.start_scanline_mutator(info + f_scanline);
    }
    if (env.variant() == guest_variant::m8_stale_slot_dispatch) {
      env.store_u32(info + g_cached_slot, env.load_u32(info + f_client_slot) & 0xFFFFu);
    }

    if (row == height) {
      // Credit unconsumed buffered input back to the host.
      const std::uint32_t unused =
          env.load_u32(info + g_buf_len) - env.load_u32(info + g_buf_pos);
      const std::uint32_t skip_word = (env.load_u32(info + f_client_slot) >> 16) & 0xFFFFu;
      if (unused > 0 && skip_word != 0) {
        const wire_value args[] = {{wire_kind::ref, info}, {wire_kind::u32, unused}};
        env.call_host(skip_word - 1, std::span<const wire_value>(args));
      }
    }
    env.store_u32(info + f_status, status_row_ok);
    return status_row_ok;
  }

  static void destroy(Env& env, std::uint32_t info) {
    if (env.variant() == guest_variant::m8_stale_slot_dispatch) {
      const std::uint32_t cached = env.load_u32(info + g_cached_slot);
      if (cached != 0) {
        const wire_value args[] = {{wire_kind::ref, info}};
        env.call_host(cached - 1, std::span<const wire_value>(args));
      }
    }
    env.gfree(env.load_u32(info + g_input_buf));
    env.gfree(info);
  }

  static std::uint32_t selfcheck(Env& env) {
    const std::uint32_t p = env.gmalloc(16, 8);
    if (p == 0) return 0;
    env.store_u32(p, 0x524C4931u);
    const std::uint32_t ok = env.load_u32(p) == 0x524C4931u ? 1u : 0u;
    env.gfree(p);
    return ok;
  }

  // --- wire-level export table ---------------------------------------------

  static wire_value x_create(Env& env, std::span<const wire_value>) {
    return {wire_kind::ref, create(env)};
  }
  static wire_value x_read_header(Env& env, std::span<const wire_value> a) {
    return {wire_kind::u32, read_header(env, static_cast<std::uint32_t>(a[0].bits))};
  }
  static wire_value x_decode_row(Env& env, std::span<const wire_value> a) {
    return {wire_kind::u32, decode_row(env, static_cast<std::uint32_t>(a[0].bits),
                                       static_cast<std::uint32_t>(a[1].bits))};
  }
  static wire_value x_destroy(Env& env, std::span<const wire_value> a) {
    destroy(env, static_cast<std::uint32_t>(a[0].bits));
    return {};
  }
  static wire_value x_selfcheck(Env& env, std::span<const wire_value>) {
    return {wire_kind::u32, selfcheck(env)};
  }
  // Empty call: the control-transfer cost yardstick.
  static wire_value x_ping(Env&, std::span<const wire_value>) {
    return {wire_kind::u32, 0};
  }
  // Guest-side stall, for idle-wait CPU measurements.
  static wire_value x_stall(Env&, std::span<const wire_value> a) {
    const auto ms = a.empty() ? 0u : static_cast<std::uint32_t>(a[0].bits);
    std::this_thread::sleep_for(std::chrono::milliseconds(std::min(ms, 10000u)));
    return {wire_kind::u32, 0};
  }

  static std::span<const guest_export<Env>> exports() {
    static const guest_export<Env> table[] = {
        {"rli_create", &x_create},
        {"rli_read_header", &x_read_header},
        {"rli_decode_row", &x_decode_row},
        {"rli_destroy", &x_destroy},
        {"rli_ping", &x_ping},
        {"rli_stall", &x_stall},
    };
    return table;
  }

  // Reachable only through the null backend's DIRECT (statically linked)
  // variant; models symbols a dynamic loader would not export.
  static std::span<const guest_export<Env>> internals() {
    static const guest_export<Env> table[] = {
        {"rli_selfcheck", &x_selfcheck},
    };
    return table;
  }
};

}  // namespace sandcage::rli
