// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <string_view>
#include <type_traits>
#include <utility>

#include "sandcage/audit.hpp"
#include "sandcage/core.hpp"
#include "sandcage/error.hpp"

namespace sandcage {

template <typename V>
class tainted;

namespace detail {

template <typename T>
struct is_tainted : std::false_type {};
template <typename V>
struct is_tainted<tainted<V>> : std::true_type {};
template <typename T>
inline constexpr bool is_tainted_v = is_tainted<std::remove_cvref_t<T>>::value;

template <typename T>
inline constexpr bool taintable_v = std::is_arithmetic_v<std::remove_cvref_t<T>>;

// One operand tainted, the other tainted or a plain scalar.
template <typename L, typename R>
inline constexpr bool tainted_op_pair_v =
    (is_tainted_v<L> || is_tainted_v<R>) && (is_tainted_v<L> || taintable_v<L>) &&
    (is_tainted_v<R> || taintable_v<R>);

// Guest-width two's-complement arithmetic: integral results wrap at the
// payload width instead of invoking host UB.
template <typename Res>
constexpr Res wrap_to_width(std::uint64_t bits) {
  using U = std::make_unsigned_t<Res>;
  return static_cast<Res>(static_cast<U>(bits));
}

inline sandbox_id merge_origin(sandbox_id a, sandbox_id b) {
  if (a != no_sandbox && b != no_sandbox && a != b) {
    raise(violation_kind::taint_mix, "mixing values tainted by two different sandboxes");
  }
  return a != no_sandbox ? a : b;
}

template <typename T>
constexpr auto payload_of(const T& v) {
  if constexpr (is_tainted_v<T>) {
    return v.raw_payload();
  } else {
    return v;
  }
}

template <typename T>
constexpr sandbox_id origin_of(const T& v) {
  if constexpr (is_tainted_v<T>) {
    return v.origin();
  } else {
    return no_sandbox;
  }
}

template <typename T>
constexpr bool poisoned_of(const T& v) {
  if constexpr (is_tainted_v<T>) {
    return v.is_error_sentinel();
  } else {
    return false;
  }
}

}  // namespace detail

// Host-side wrapper for a value that originated in a sandbox.  The payload
// round-trips bit-exactly; the only ways back to a host-consumable value are
// verify(), the copy_and_verify family, and unsafe_unverified().  Arithmetic
// involving a tainted operand stays tainted and wraps at the payload width.
template <typename V>
class tainted {
  static_assert(std::is_arithmetic_v<V>,
                "tainted<V> wraps arithmetic scalars; guest-resident data is "
                "reached through guest_ref instead");

public:
  using value_type = V;

  constexpr tainted() = default;
  constexpr explicit tainted(V payload, sandbox_id origin = no_sandbox)
      : payload_(payload), origin_(origin) {}

  static constexpr tainted error_sentinel(sandbox_id origin) {
    tainted t(V{}, origin);
    t.poisoned_ = true;
    return t;
  }

  static constexpr tainted with_poison(V payload, sandbox_id origin, bool poisoned) {
    tainted t(payload, origin);
    t.poisoned_ = poisoned;
    return t;
  }

  sandbox_id origin() const { return origin_; }
  bool is_error_sentinel() const { return poisoned_; }

  // Internal accessor used by the runtime and operator plumbing.  Not an
  // escape hatch: the result keeps flowing through tainted machinery.
  constexpr V raw_payload() const { return payload_; }

  // Validate and unwrap.  `check` is either a predicate (bool(V): true
  // keeps the payload) or a projection (std::optional<R>(V): engaged result
  // is returned untainted).
  template <typename F>
  auto verify(F&& check) const {
    using R = std::invoke_result_t<F, V>;
    if constexpr (std::is_same_v<R, bool>) {
      if (poisoned_ || !check(payload_)) {
        raise(violation_kind::validation, "tainted value rejected by validator", origin_);
      }
      return payload_;
    } else {
      if (poisoned_) {
        raise(violation_kind::validation, "tainted error sentinel reached a validator",
              origin_);
      }
      R projected = check(payload_);
      if (!projected) {
        raise(violation_kind::validation, "tainted value rejected by validator", origin_);
      }
      return *std::move(projected);
    }
  }

  // Remove the taint without any check.  Audited when auditing is on.
  V unsafe_unverified(std::string_view site = {}) const {
    audit::record_unsafe(origin_, site);
    return payload_;
  }

  tainted<bool> operator!() const
    requires std::is_same_v<V, bool>
  {
    return tainted<bool>(!payload_, origin_);
  }

  tainted operator-() const
    requires(!std::is_same_v<V, bool>)
  {
    if constexpr (std::is_integral_v<V>) {
      using U = std::make_unsigned_t<V>;
      return with_poison(detail::wrap_to_width<V>(static_cast<std::uint64_t>(
                             static_cast<U>(0) - static_cast<U>(payload_))),
                         origin_, poisoned_);
    } else {
      return with_poison(-payload_, origin_, poisoned_);
    }
  }

  tainted operator~() const
    requires(std::is_integral_v<V> && !std::is_same_v<V, bool>)
  {
    return with_poison(static_cast<V>(~payload_), origin_, poisoned_);
  }

private:
  V payload_{};
  sandbox_id origin_ = no_sandbox;
  bool poisoned_ = false;
};

template <typename V>
tainted(V) -> tainted<V>;

namespace detail {

template <typename L, typename R, typename Op>
auto tainted_binop(const L& lhs, const R& rhs, Op op) {
  auto a = payload_of(lhs);
  auto b = payload_of(rhs);
  using Res = std::common_type_t<decltype(a), decltype(b)>;
  static_assert(!std::is_same_v<Res, bool>, "arithmetic on tainted<bool> is not defined");
  const sandbox_id origin = merge_origin(origin_of(lhs), origin_of(rhs));
  const bool poisoned = poisoned_of(lhs) || poisoned_of(rhs);
  if constexpr (std::is_integral_v<Res>) {
    using U = std::make_unsigned_t<Res>;
    const U raw = op(static_cast<U>(static_cast<Res>(a)), static_cast<U>(static_cast<Res>(b)));
    return tainted<Res>::with_poison(wrap_to_width<Res>(static_cast<std::uint64_t>(raw)),
                                     origin, poisoned);
  } else {
    return tainted<Res>::with_poison(op(static_cast<Res>(a), static_cast<Res>(b)), origin,
                                     poisoned);
  }
}

template <typename L, typename R>
auto tainted_divop(const L& lhs, const R& rhs, bool is_mod) {
  auto a = payload_of(lhs);
  auto b = payload_of(rhs);
  using Res = std::common_type_t<decltype(a), decltype(b)>;
  const sandbox_id origin = merge_origin(origin_of(lhs), origin_of(rhs));
  const bool poisoned = poisoned_of(lhs) || poisoned_of(rhs);
  if constexpr (std::is_integral_v<Res>) {
    const auto av = static_cast<Res>(a);
    const auto bv = static_cast<Res>(b);
    // Zero divisor, or the lone overflowing quotient (MIN / -1), poisons.
    bool bad = bv == 0;
    if constexpr (std::is_signed_v<Res>) {
      bad = bad || (bv == static_cast<Res>(-1) && av == std::numeric_limits<Res>::min());
    }
    if (bad) return tainted<Res>::with_poison(Res{}, origin, true);
    return tainted<Res>::with_poison(
        is_mod ? static_cast<Res>(av % bv) : static_cast<Res>(av / bv), origin, poisoned);
  } else {
    return tainted<Res>::with_poison(static_cast<Res>(a) / static_cast<Res>(b), origin,
                                     poisoned);
  }
}

template <typename L, typename R>
auto tainted_shift(const L& lhs, const R& rhs, bool left) {
  auto a = payload_of(lhs);
  using Res = decltype(a);
  static_assert(std::is_integral_v<Res> && !std::is_same_v<Res, bool>,
                "shift needs integral operands");
  const sandbox_id origin = merge_origin(origin_of(lhs), origin_of(rhs));
  const bool poisoned = poisoned_of(lhs) || poisoned_of(rhs);
  // Guest shift counts reduce modulo the operand width.
  const auto count = static_cast<std::uint32_t>(payload_of(rhs)) % (sizeof(Res) * 8);
  using U = std::make_unsigned_t<Res>;
  const U ua = static_cast<U>(a);
  const U raw = left ? static_cast<U>(ua << count) : static_cast<U>(ua >> count);
  return tainted<Res>::with_poison(wrap_to_width<Res>(static_cast<std::uint64_t>(raw)),
                                   origin, poisoned);
}

}  // namespace detail

#define SANDCAGE_TAINTED_ARITH(op)                                                     \
  template <typename L, typename R>                                                    \
    requires detail::tainted_op_pair_v<L, R>                                           \
  auto operator op(const L& lhs, const R& rhs) {                                       \
    return detail::tainted_binop(lhs, rhs,                                             \
                                 [](auto a, auto b) { return decltype(a)(a op b); });  \
  }

SANDCAGE_TAINTED_ARITH(+)
SANDCAGE_TAINTED_ARITH(-)
SANDCAGE_TAINTED_ARITH(*)
#undef SANDCAGE_TAINTED_ARITH

template <typename L, typename R>
  requires detail::tainted_op_pair_v<L, R>
auto operator/(const L& lhs, const R& rhs) {
  return detail::tainted_divop(lhs, rhs, /*is_mod=*/false);
}
template <typename L, typename R>
  requires detail::tainted_op_pair_v<L, R>
auto operator%(const L& lhs, const R& rhs) {
  return detail::tainted_divop(lhs, rhs, /*is_mod=*/true);
}

#define SANDCAGE_TAINTED_BITOP(op)                                                     \
  template <typename L, typename R>                                                    \
    requires detail::tainted_op_pair_v<L, R>                                           \
  auto operator op(const L& lhs, const R& rhs) {                                       \
    return detail::tainted_binop(lhs, rhs,                                             \
                                 [](auto a, auto b) { return decltype(a)(a op b); });  \
  }

SANDCAGE_TAINTED_BITOP(&)
SANDCAGE_TAINTED_BITOP(|)
SANDCAGE_TAINTED_BITOP(^)
#undef SANDCAGE_TAINTED_BITOP

template <typename L, typename R>
  requires detail::tainted_op_pair_v<L, R>
auto operator<<(const L& lhs, const R& rhs) {
  return detail::tainted_shift(lhs, rhs, /*left=*/true);
}
template <typename L, typename R>
  requires detail::tainted_op_pair_v<L, R>
auto operator>>(const L& lhs, const R& rhs) {
  return detail::tainted_shift(lhs, rhs, /*left=*/false);
}

#define SANDCAGE_TAINTED_CMP(op)                                                       \
  template <typename L, typename R>                                                    \
    requires detail::tainted_op_pair_v<L, R>                                           \
  tainted<bool> operator op(const L& lhs, const R& rhs) {                              \
    return tainted<bool>(detail::payload_of(lhs) op detail::payload_of(rhs),           \
                         detail::merge_origin(detail::origin_of(lhs),                  \
                                              detail::origin_of(rhs)));                \
  }

SANDCAGE_TAINTED_CMP(==)
SANDCAGE_TAINTED_CMP(!=)
SANDCAGE_TAINTED_CMP(<)
SANDCAGE_TAINTED_CMP(<=)
SANDCAGE_TAINTED_CMP(>)
SANDCAGE_TAINTED_CMP(>=)
#undef SANDCAGE_TAINTED_CMP

}  // namespace sandcage
