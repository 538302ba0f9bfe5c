// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>

#include "sandcage/error.hpp"

namespace sandcage {

// Scalar kinds that may cross the host/guest boundary.  The wire encoding
// stores every value widened into a u64 alongside its kind.
enum class wire_kind : std::uint32_t {
  none = 0,
  i32 = 1,
  u32 = 2,
  i64 = 3,
  u64 = 4,
  f32 = 5,
  f64 = 6,
  ref = 7,   // 32-bit guest offset
  slot = 8,  // callback trampoline index
};

inline bool wire_kind_valid(std::uint32_t raw) {
  return raw <= static_cast<std::uint32_t>(wire_kind::slot);
}

struct wire_value {
  wire_kind kind = wire_kind::none;
  std::uint64_t bits = 0;
};

// The guest compiles against ILP32 little-endian: int, long and addresses
// are all 4 bytes.  Every scalar crossing the boundary is translated
// losslessly or rejected.
struct machine_model {
  std::uint32_t int_bytes = 4;
  std::uint32_t long_bytes = 4;
  std::uint32_t address_bytes = 4;
  bool little_endian = true;
};

inline constexpr machine_model ilp32_le{};

namespace detail {

template <typename T>
inline constexpr bool is_boundary_scalar_v =
    std::is_arithmetic_v<T> && !std::is_same_v<std::remove_cv_t<T>, bool>;

template <typename T>
constexpr wire_kind wire_kind_of() {
  using U = std::remove_cv_t<T>;
  if constexpr (std::is_same_v<U, float>) {
    return wire_kind::f32;
  } else if constexpr (std::is_same_v<U, double>) {
    return wire_kind::f64;
  } else if constexpr (std::is_integral_v<U>) {
    if constexpr (sizeof(U) <= 4) {
      return std::is_signed_v<U> ? wire_kind::i32 : wire_kind::u32;
    } else {
      return std::is_signed_v<U> ? wire_kind::i64 : wire_kind::u64;
    }
  } else {
    static_assert(std::is_arithmetic_v<U>, "not a boundary scalar");
    return wire_kind::none;
  }
}

}  // namespace detail

// Narrow a host scalar to its guest representation.  Values that do not
// survive the round trip are a host bug, reported as width-overflow rather
// than silently wrapped.
template <typename T>
wire_value to_guest_scalar(T value, sandbox_id origin = no_sandbox) {
  static_assert(detail::is_boundary_scalar_v<T>,
                "only arithmetic scalars cross the boundary");
  using U = std::remove_cv_t<T>;
  wire_value out;
  if constexpr (std::is_same_v<U, float>) {
    out.kind = wire_kind::f32;
    out.bits = std::bit_cast<std::uint32_t>(value);
  } else if constexpr (std::is_same_v<U, double>) {
    out.kind = wire_kind::f64;
    out.bits = std::bit_cast<std::uint64_t>(value);
  } else if constexpr (sizeof(U) <= 4) {
    out.kind = std::is_signed_v<U> ? wire_kind::i32 : wire_kind::u32;
    if constexpr (std::is_signed_v<U>) {
      out.bits = static_cast<std::uint64_t>(
          static_cast<std::uint32_t>(static_cast<std::int32_t>(value)));
    } else {
      out.bits = static_cast<std::uint32_t>(value);
    }
  } else {
    // Host 8-byte integrals map onto the guest's 4-byte int/long model.
    if constexpr (std::is_signed_v<U>) {
      auto v = static_cast<std::int64_t>(value);
      if (v < std::numeric_limits<std::int32_t>::min() ||
          v > std::numeric_limits<std::int32_t>::max()) {
        raise(violation_kind::width_overflow,
              "value " + std::to_string(v) + " does not fit guest 32-bit width",
              origin);
      }
      out.kind = wire_kind::i32;
      out.bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(v));
    } else {
      auto v = static_cast<std::uint64_t>(value);
      if (v > std::numeric_limits<std::uint32_t>::max()) {
        raise(violation_kind::width_overflow,
              "value " + std::to_string(v) + " does not fit guest 32-bit width",
              origin);
      }
      out.kind = wire_kind::u32;
      out.bits = static_cast<std::uint32_t>(v);
    }
  }
  return out;
}

// Widen a guest wire value back into host type T.
template <typename T>
T from_guest_scalar(const wire_value& v, sandbox_id origin = no_sandbox) {
  static_assert(detail::is_boundary_scalar_v<T>);
  switch (v.kind) {
    case wire_kind::i32:
      return static_cast<T>(static_cast<std::int32_t>(static_cast<std::uint32_t>(v.bits)));
    case wire_kind::u32:
      return static_cast<T>(static_cast<std::uint32_t>(v.bits));
    case wire_kind::i64:
      return static_cast<T>(static_cast<std::int64_t>(v.bits));
    case wire_kind::u64:
      return static_cast<T>(v.bits);
    case wire_kind::f32:
      return static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(v.bits)));
    case wire_kind::f64:
      return static_cast<T>(std::bit_cast<double>(v.bits));
    default:
      raise(violation_kind::protocol, "unexpected wire kind in scalar return", origin);
  }
}

}  // namespace sandcage
