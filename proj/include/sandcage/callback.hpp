// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <tuple>
#include <type_traits>
#include <vector>

#include "sandcage/error.hpp"
#include "sandcage/machine.hpp"
#include "sandcage/memory.hpp"

namespace sandcage {

class sandbox;

// Runtime descriptor of a callback's boundary signature, used to validate
// guest-supplied dispatch arguments before the host function runs.
struct callback_signature {
  std::vector<wire_kind> arg_kinds;
  wire_kind ret_kind = wire_kind::none;
};

using callback_thunk =
    std::function<wire_value(sandbox&, sandbox_id, std::span<const wire_value>)>;

namespace detail {

// Callback parameters must arrive tainted: only tainted scalars and guest
// refs are legal.  Anything else is rejected at compile time.
template <typename A>
struct callback_arg_traits {
  static_assert(is_tainted_v<A> || is_guest_ref_v<A>,
                "callback parameters must be tainted: wrap scalars in tainted<> "
                "and guest pointers in guest_ref<>");
};

template <typename V>
struct callback_arg_traits<tainted<V>> {
  static constexpr wire_kind kind = wire_kind_of<V>();
  static tainted<V> convert(const wire_value& w, sandbox_id origin) {
    return tainted<V>(from_guest_scalar<V>(w, origin), origin);
  }
};

template <typename U>
struct callback_arg_traits<guest_ref<U>> {
  static constexpr wire_kind kind = wire_kind::ref;
  static guest_ref<U> convert(const wire_value& w, sandbox_id origin) {
    return guest_ref<U>(static_cast<std::uint32_t>(w.bits), origin);
  }
};

template <typename R>
constexpr wire_kind callback_ret_kind() {
  if constexpr (std::is_void_v<R>) {
    return wire_kind::none;
  } else if constexpr (is_tainted_v<R>) {
    return wire_kind_of<typename R::value_type>();
  } else {
    static_assert(std::is_arithmetic_v<R> && !std::is_same_v<R, bool>,
                  "callbacks may return void, a scalar, or a tainted scalar");
    return wire_kind_of<R>();
  }
}

template <typename R>
wire_value callback_ret_to_wire(R&& r, sandbox_id origin) {
  using T = std::remove_cvref_t<R>;
  if constexpr (is_tainted_v<T>) {
    return to_guest_scalar(r.raw_payload(), origin);
  } else {
    return to_guest_scalar(r, origin);
  }
}

// Callback callables take the owning sandbox first, then tainted args.
template <typename F>
struct callable_traits : callable_traits<decltype(&std::remove_cvref_t<F>::operator())> {};
template <typename C, typename R, typename First, typename... A>
struct callable_traits<R (C::*)(First, A...) const> {
  using ret = R;
  using first = First;
  using rest = std::tuple<std::remove_cvref_t<A>...>;
};
template <typename C, typename R, typename First, typename... A>
struct callable_traits<R (C::*)(First, A...)> {
  using ret = R;
  using first = First;
  using rest = std::tuple<std::remove_cvref_t<A>...>;
};
template <typename R, typename First, typename... A>
struct callable_traits<R (*)(First, A...)> {
  using ret = R;
  using first = First;
  using rest = std::tuple<std::remove_cvref_t<A>...>;
};
template <typename R, typename First, typename... A>
struct callable_traits<R(First, A...)> : callable_traits<R (*)(First, A...)> {};

template <typename F, typename R, typename... A>
callback_thunk make_callback_thunk(F fn, std::tuple<A...>*) {
  return [fn = std::move(fn)](sandbox& s, sandbox_id origin,
                              std::span<const wire_value> args) -> wire_value {
    return [&]<std::size_t... I>(std::index_sequence<I...>) -> wire_value {
      if constexpr (std::is_void_v<R>) {
        fn(s, callback_arg_traits<A>::convert(args[I], origin)...);
        return wire_value{};
      } else {
        return callback_ret_to_wire(fn(s, callback_arg_traits<A>::convert(args[I], origin)...),
                                    origin);
      }
    }(std::index_sequence_for<A...>{});
  };
}

template <typename... A>
callback_signature make_signature(wire_kind ret, std::tuple<A...>*) {
  callback_signature sig;
  sig.ret_kind = ret;
  (sig.arg_kinds.push_back(callback_arg_traits<A>::kind), ...);
  return sig;
}

}  // namespace detail

// RAII handle for a registered callback.  The guest-visible form is the
// opaque slot index; scope exit deactivates the slot, after which guest
// dispatch of it is a callback violation.
class callback_registration {
public:
  callback_registration() = default;
  callback_registration(sandbox_id owner, std::uint32_t slot) : owner_(owner), slot_(slot) {}

  callback_registration(const callback_registration&) = delete;
  callback_registration& operator=(const callback_registration&) = delete;
  callback_registration(callback_registration&& o) noexcept { *this = std::move(o); }
  callback_registration& operator=(callback_registration&& o) noexcept {
    if (this != &o) {
      unregister();
      owner_ = o.owner_;
      slot_ = o.slot_;
      o.owner_ = no_sandbox;
    }
    return *this;
  }

  ~callback_registration() { unregister(); }

  bool valid() const { return owner_ != no_sandbox; }
  std::uint32_t slot() const { return slot_; }
  sandbox_id owner() const { return owner_; }

  // Idempotent deactivation; tolerates an already-destroyed sandbox.
  void unregister();

private:
  sandbox_id owner_ = no_sandbox;
  std::uint32_t slot_ = 0;
};

}  // namespace sandcage
