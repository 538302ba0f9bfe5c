// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "sandcage/core.hpp"

namespace sandcage {

enum class violation_kind : std::uint32_t {
  none = 0,
  validation,          // a validator rejected the value
  bounds,              // access would leave the sandbox region
  unterminated_string,
  tamper,              // frozen value diverged from the live guest value
  read_while_unfrozen,
  freeze_state,        // freeze/unfreeze called in the wrong state
  callback,            // dispatch of an inactive or out-of-range slot
  width_overflow,      // host scalar does not fit the guest width
  sandbox_dead,
  alloc_failure,
  invalid_free,
  unknown_record,
  unknown_field,
  field_kind_mismatch,
  symbol_resolution,
  creation,
  protocol,            // channel or runtime protocol breach
  transport,           // worker died or timed out
  reentrancy,          // invoke nesting exceeded max_invoke_depth
  concurrent_invoke,
  slots_exhausted,
  taint_mix,           // operands tainted by two different sandboxes
  usage,               // host-side API misuse (bad key, bad argument)
};

const char* violation_name(violation_kind k);

class violation_error : public std::runtime_error {
public:
  violation_error(violation_kind kind, std::string what, sandbox_id origin = no_sandbox)
      : std::runtime_error(std::move(what)), kind_(kind), origin_(origin) {}

  violation_kind kind() const { return kind_; }
  sandbox_id origin() const { return origin_; }

private:
  violation_kind kind_;
  sandbox_id origin_;
};

// Raised when the guest performs a non-local exit; carries the guest's code.
class guest_abort_error : public violation_error {
public:
  guest_abort_error(std::int32_t code, sandbox_id origin)
      : violation_error(violation_kind::none,
                        "guest abort (" + std::to_string(code) + ")", origin),
        code_(code) {}

  std::int32_t code() const { return code_; }

private:
  std::int32_t code_;
};

// Internal unwind token for non-local exit.  Deliberately not derived from
// std::exception so intermediate catch(std::exception&) blocks in host
// callbacks cannot swallow the unwind; destructors still run.
struct guest_unwind {
  sandbox_id origin;
  std::int32_t code;
};

enum class violation_policy : int {
  throw_exception = 0,
  abort_process = 1,
};

namespace detail {
inline std::atomic<int>& violation_policy_flag() {
  static std::atomic<int> flag{static_cast<int>(violation_policy::throw_exception)};
  return flag;
}

// Installed by the sandbox registry so raises that carry an origin are
// tallied against that sandbox.
using violation_recorder_fn = void (*)(violation_kind, sandbox_id) noexcept;
inline std::atomic<violation_recorder_fn>& violation_recorder() {
  static std::atomic<violation_recorder_fn> fn{nullptr};
  return fn;
}
}  // namespace detail

inline void set_violation_recorder(detail::violation_recorder_fn fn) {
  detail::violation_recorder().store(fn, std::memory_order_relaxed);
}

inline void set_violation_policy(violation_policy p) {
  detail::violation_policy_flag().store(static_cast<int>(p), std::memory_order_relaxed);
}
inline violation_policy get_violation_policy() {
  return static_cast<violation_policy>(
      detail::violation_policy_flag().load(std::memory_order_relaxed));
}

// Raise a violation under the global policy.  Always throws unless the
// opt-in abort mode is set.
[[noreturn]] inline void raise(violation_kind kind, std::string what,
                               sandbox_id origin = no_sandbox) {
  if (origin != no_sandbox) {
    if (auto* rec = detail::violation_recorder().load(std::memory_order_relaxed)) {
      rec(kind, origin);
    }
  }
  if (get_violation_policy() == violation_policy::abort_process) {
    std::abort();
  }
  throw violation_error(kind, std::move(what), origin);
}

inline const char* violation_name(violation_kind k) {
  switch (k) {
    case violation_kind::none: return "none";
    case violation_kind::validation: return "validation";
    case violation_kind::bounds: return "bounds";
    case violation_kind::unterminated_string: return "unterminated-string";
    case violation_kind::tamper: return "tamper";
    case violation_kind::read_while_unfrozen: return "read-while-unfrozen";
    case violation_kind::freeze_state: return "freeze-state";
    case violation_kind::callback: return "callback";
    case violation_kind::width_overflow: return "width-overflow";
    case violation_kind::sandbox_dead: return "sandbox-dead";
    case violation_kind::alloc_failure: return "alloc-failure";
    case violation_kind::invalid_free: return "invalid-free";
    case violation_kind::unknown_record: return "unknown-record";
    case violation_kind::unknown_field: return "unknown-field";
    case violation_kind::field_kind_mismatch: return "field-kind-mismatch";
    case violation_kind::symbol_resolution: return "symbol-resolution";
    case violation_kind::creation: return "creation";
    case violation_kind::protocol: return "protocol";
    case violation_kind::transport: return "transport";
    case violation_kind::reentrancy: return "reentrancy";
    case violation_kind::concurrent_invoke: return "concurrent-invoke";
    case violation_kind::slots_exhausted: return "slots-exhausted";
    case violation_kind::taint_mix: return "taint-mix";
    case violation_kind::usage: return "usage";
  }
  return "unknown";
}

}  // namespace sandcage
