// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sandcage/guest/rli.hpp"
#include "sandcage/memory.hpp"
#include "sandcage/pool.hpp"
#include "sandcage/sandbox.hpp"

namespace sandcage {

struct decode_options {
  bool unsafe_pixel_path = false;  // zero-copy row handoff, audited
  std::uint32_t chunk_size = 4096;
  std::uint32_t max_dimension = 65535;
};

// Decode failures carry the violation kind that stopped the decode (or
// none, plus the guest's exit code, for a guest-side abort).
class decode_error : public std::runtime_error {
public:
  decode_error(std::string what, violation_kind kind, std::int32_t guest_code = 0)
      : std::runtime_error(std::move(what)), kind_(kind), guest_code_(guest_code) {}
  violation_kind kind() const { return kind_; }
  std::int32_t guest_code() const { return guest_code_; }

private:
  violation_kind kind_;
  std::int32_t guest_code_;
};

struct decode_result {
  rli::image img;
  std::size_t consumed_bytes = 0;
};

struct decode_dims {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::size_t consumed_bytes = 0;
};

namespace detail {

inline constexpr std::uint32_t ctx_decoder = 0;

// Host-private decoder state.  Callbacks recover it from the invocation
// context store, never from guest-supplied data.
struct decode_stream {
  std::span<const std::uint8_t> bytes;
  std::size_t cursor = 0;
  std::uint32_t last_chunk = 0;
  std::uint32_t chunk_size = 4096;
};

// Feeds the next input chunk into the guest's advertised buffer.  Returns
// the byte count, 0 at end of stream.
inline std::uint32_t fill_input(sandbox& s, guest_ref<rli::info_record> info) {
  auto* st = static_cast<decode_stream*>(s.get_invoke_context(ctx_decoder));
  if (st == nullptr) {
    raise(violation_kind::protocol, "input callback fired outside a decode", s.id());
  }
  const std::uint32_t chunk = static_cast<std::uint32_t>(
      std::min<std::size_t>(st->chunk_size, st->bytes.size() - st->cursor));
  if (chunk == 0) return 0;
  // The buffer ref is guest data; resolution bounds-checks it.
  guest_ref<std::uint8_t> buf = info.ref_field("next_input_offset").read();
  write_bytes(buf, st->bytes.subspan(st->cursor, chunk));
  info.field<std::uint32_t>("bytes_in_buffer").write(chunk);
  st->cursor += chunk;
  st->last_chunk = chunk;
  return chunk;
}

// Credits input the guest buffered but did not consume back to the stream
// cursor.
inline void skip_input(sandbox& s, guest_ref<rli::info_record>, tainted<std::uint32_t> n) {
  auto* st = static_cast<decode_stream*>(s.get_invoke_context(ctx_decoder));
  if (st == nullptr) {
    raise(violation_kind::protocol, "skip callback fired outside a decode", s.id());
  }
  // Application invariant: the guest can only hand back bytes from the
  // chunk it was just fed.
  const std::uint32_t credit =
      n.verify([&](std::uint32_t v) { return v <= st->last_chunk && v <= st->cursor; });
  st->cursor -= credit;
}

}  // namespace detail

namespace detail {

// The fully migrated host-side consumer of the guest codec: tainted calls
// only, shared state in sandbox memory, validators on every value the host
// acts on, and freeze around the scanline the guest reports.  `prepare`
// maps validated dimensions to the destination pixel span.
template <typename Prepare>
decode_dims decode_core(sandbox& s, std::span<const std::uint8_t> bytes,
                        const decode_options& opts, Prepare&& prepare) {
  rli::register_info_record();
  detail::decode_stream st{bytes, 0, 0, opts.chunk_size};

  try {
    callback_registration fill_reg = s.register_callback(detail::fill_input);

    s.set_invoke_context(detail::ctx_decoder, &st);
    auto info = s.invoke<guest_ref<rli::info_record>>("rli_create");
    info.field<std::uint32_t>("client_slot")
        .write(rli::pack_client_slots(fill_reg.slot(), -1));

    s.set_invoke_context(detail::ctx_decoder, &st);
    auto status = s.invoke<tainted<std::uint32_t>>("rli_read_header", info);
    // Library status set, straight from the streaming interface contract.
    const std::uint32_t st_ok = status.verify([](std::uint32_t v) {
      return v == rli::status_suspended || v == rli::status_header_tables_only ||
             v == rli::status_header_ok;
    });
    if (st_ok != rli::status_header_ok) {
      throw decode_error("decoder suspended; streaming restart unsupported",
                         violation_kind::none, 0);
    }

    // Application invariants on the claimed geometry.
    const std::uint32_t max_dim = opts.max_dimension;
    const std::uint32_t width = info.field<std::uint32_t>("width").read().verify(
        [&](std::uint32_t v) { return v <= max_dim; });
    const std::uint32_t height = info.field<std::uint32_t>("height").read().verify(
        [&](std::uint32_t v) {
          return v <= max_dim && static_cast<std::uint64_t>(v) * width <= (1u << 28);
        });

    std::span<std::uint8_t> pixels = prepare(width, height);

    guest_ref<std::uint8_t> row_buf = s.malloc_bytes(width == 0 ? 1 : width);
    {
      callback_registration skip_reg = s.register_callback(detail::skip_input);
      info.field<std::uint32_t>("client_slot")
          .write(rli::pack_client_slots(fill_reg.slot(), skip_reg.slot()));

      auto scanline = info.freezable_field<std::uint32_t>("output_scanline");
      for (std::uint32_t row = 0; row < height; row++) {
        s.set_invoke_context(detail::ctx_decoder, &st);
        auto rstat = s.invoke<tainted<std::uint32_t>>("rli_decode_row", info, row_buf);
        rstat.verify([](std::uint32_t v) { return v == rli::status_row_ok; });

        // Library invariant: the reported scanline never exceeds the image
        // height.  Freeze pins the value across its uses below.
        scanline.freeze();
        const std::uint32_t sl = scanline.frozen_read().verify(
            [&](std::uint32_t v) { return v >= 1 && v <= height; });
        scanline.unfreeze();

        // Application invariant: the destination row stays inside the
        // pixel buffer.
        const std::uint64_t row_off = static_cast<std::uint64_t>(sl - 1) * width;
        if (row_off + width > pixels.size()) {
          raise(violation_kind::validation, "row lands outside the pixel buffer", s.id());
        }
        if (width > 0) {
          if (opts.unsafe_pixel_path) {
            // Pixel bytes need no structural validation; bounds still hold.
            auto span = row_buf.unsafe_unverified_span(width, "pixel-row-handoff");
            std::memcpy(pixels.data() + row_off, span.data(), width);
          } else {
            auto row_bytes = copy_and_verify_array(
                row_buf, width,
                [&](std::span<const std::uint8_t> v) { return v.size() == width; });
            std::memcpy(pixels.data() + row_off, row_bytes.data(), width);
          }
        }
      }
    }  // skip_reg scope exit deactivates its slot

    fill_reg.unregister();  // nothing after this point feeds input
    s.set_invoke_context(detail::ctx_decoder, &st);
    s.invoke("rli_destroy", info);
    s.free(row_buf);
    return decode_dims{width, height, st.cursor};
  } catch (const guest_abort_error& e) {
    throw decode_error("guest decode aborted (code " + std::to_string(e.code()) + ")",
                       violation_kind::none, e.code());
  }
}

}  // namespace detail

inline decode_result decode_image(sandbox& s, std::span<const std::uint8_t> bytes,
                                  const decode_options& opts = {}) {
  decode_result out;
  const decode_dims dims =
      detail::decode_core(s, bytes, opts, [&](std::uint32_t w, std::uint32_t h) {
        out.img.pixels.assign(static_cast<std::size_t>(w) * h, 0);
        return std::span<std::uint8_t>(out.img.pixels);
      });
  out.img.width = dims.width;
  out.img.height = dims.height;
  out.consumed_bytes = dims.consumed_bytes;
  return out;
}

// Caller-buffer variant: rows land in `arena`, which must hold the decoded
// geometry or the decode fails validation before any pixel write.
inline decode_dims decode_into(sandbox& s, std::span<const std::uint8_t> bytes,
                               std::span<std::uint8_t> arena, const decode_options& opts = {}) {
  return detail::decode_core(s, bytes, opts, [&](std::uint32_t w, std::uint32_t h) {
    if (static_cast<std::uint64_t>(w) * h > arena.size()) {
      raise(violation_kind::validation, "decoded geometry exceeds the pixel arena", s.id());
    }
    return arena.first(static_cast<std::size_t>(w) * h);
  });
}

// Pool-routed variant: one sandbox per <library, origin, content-type>.
inline decode_result decode_image(sandbox_pool& pool, const std::string& origin,
                                  std::span<const std::uint8_t> bytes,
                                  const decode_options& opts = {}) {
  auto lease = pool.acquire(sandbox_key{"rli", origin, "image/rli"});
  lease.sync_hint(work_hint::latency);  // synchronous call-heavy decode
  return decode_image(lease.get(), bytes, opts);
}

}  // namespace sandcage
