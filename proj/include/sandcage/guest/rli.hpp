// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sandcage/record.hpp"

namespace sandcage::rli {

// RLI image format ("RLI1"): byte-exact layout
//   magic   4 bytes  "RLI1"
//   width   u32 LE
//   height  u32 LE
//   rows    height times: (count u8 >= 1, value u8)* pairs, then count = 0
// Each row's counts sum to exactly width.
inline constexpr char magic[4] = {'R', 'L', 'I', '1'};
inline constexpr std::uint32_t header_size = 12;

// Decode statuses returned by the guest codec.
enum status : std::uint32_t {
  status_suspended = 0,
  status_header_tables_only = 1,
  status_header_ok = 2,
  status_row_ok = 3,
  status_done = 4,
};

// Non-local exit codes raised by the guest's error path.
enum exit_code : std::int32_t {
  exit_truncated = 3,
  exit_bad_magic = 4,
  exit_row_overflow = 5,
  exit_oom = 6,
};

struct image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;  // width * height bytes, row-major
};

inline std::vector<std::uint8_t> encode(std::span<const std::uint8_t> raw, std::uint32_t width,
                                        std::uint32_t height) {
  std::vector<std::uint8_t> out;
  out.reserve(header_size + raw.size() / 2 + 2 * height);
  out.insert(out.end(), magic, magic + 4);
  for (std::uint32_t v : {width, height}) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
  }
  for (std::uint32_t row = 0; row < height; row++) {
    const std::uint8_t* p = raw.data() + static_cast<std::size_t>(row) * width;
    std::uint32_t i = 0;
    while (i < width) {
      std::uint32_t run = 1;
      while (i + run < width && p[i + run] == p[i] && run < 255) run++;
      out.push_back(static_cast<std::uint8_t>(run));
      out.push_back(p[i]);
      i += run;
    }
    out.push_back(0);
  }
  return out;
}

// Independent reference decoder: a direct host-side read of the format with
// no sandboxing machinery involved.  Returns nothing on any malformation.
inline std::optional<image> oracle_decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < header_size || std::memcmp(bytes.data(), magic, 4) != 0) {
    return std::nullopt;
  }
  auto u32at = [&](std::size_t i) {
    return static_cast<std::uint32_t>(bytes[i]) | (static_cast<std::uint32_t>(bytes[i + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[i + 2]) << 16) |
           (static_cast<std::uint32_t>(bytes[i + 3]) << 24);
  };
  image img;
  img.width = u32at(4);
  img.height = u32at(8);
  if (static_cast<std::uint64_t>(img.width) * img.height > (1u << 28)) return std::nullopt;
  img.pixels.reserve(static_cast<std::size_t>(img.width) * img.height);
  std::size_t pos = header_size;
  for (std::uint32_t row = 0; row < img.height; row++) {
    std::uint32_t filled = 0;
    for (;;) {
      if (pos >= bytes.size()) return std::nullopt;
      const std::uint8_t count = bytes[pos++];
      if (count == 0) break;
      if (pos >= bytes.size()) return std::nullopt;
      const std::uint8_t value = bytes[pos++];
      if (filled + count > img.width) return std::nullopt;
      img.pixels.insert(img.pixels.end(), count, value);
      filled += count;
    }
    if (filled != img.width) return std::nullopt;
  }
  return img;
}

// Guest-resident shared record.  output_scanline is freezable: the host
// reads it only through freeze.  client_slot packs the callback slots the
// host granted the guest: low 16 bits fill-slot + 1, high 16 bits
// skip-slot + 1, zero meaning "not granted".
struct info_record {
  static constexpr const char* record_name = "rli.info";
};

inline constexpr std::uint32_t info_size = 28;

inline const record_layout& register_info_record() {
  static const record_layout& layout =
      record_registry::instance().register_record(record_layout(
          info_record::record_name, info_size,
          {
              {"width", 0, field_kind::u32, false},
              {"height", 4, field_kind::u32, false},
              {"output_scanline", 8, field_kind::u32, true},
              {"bytes_in_buffer", 12, field_kind::u32, false},
              {"next_input_offset", 16, field_kind::ref, false},
              {"status", 20, field_kind::u32, false},
              {"client_slot", 24, field_kind::u32, false},
          }));
  return layout;
}

inline std::uint32_t pack_client_slots(std::uint32_t fill_slot, std::int64_t skip_slot) {
  std::uint32_t packed = fill_slot + 1;
  if (skip_slot >= 0) packed |= static_cast<std::uint32_t>(skip_slot + 1) << 16;
  return packed;
}

// Export order is the cross-process function-index contract.
inline std::span<const char* const> export_names() {
  static const char* const names[] = {"rli_create", "rli_read_header", "rli_decode_row",
                                      "rli_destroy", "rli_ping", "rli_stall"};
  return names;
}

}  // namespace sandcage::rli
