// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "sandcage/callback.hpp"
#include "sandcage/core.hpp"
#include "sandcage/error.hpp"
#include "sandcage/machine.hpp"
#include "sandcage/memory.hpp"
#include "sandcage/record.hpp"
#include "sandcage/runtime_core.hpp"

namespace sandcage {

class sandbox;

struct sandbox_config {
  backend_kind backend = backend_kind::emusfi;
  std::uint64_t region_size = default_region_size;
  std::string guest = "clean";  // guest variant selector
  sync_mode initial_sync = sync_mode::spin;
  contention_mode contention = contention_mode::block;
  std::chrono::milliseconds call_timeout{2000};
  std::string worker_path;  // process backend; empty = next to this executable
  std::uint64_t spin_relax_budget = 100'000'000;
  std::uint32_t spin_pause_per_yield = 4;  // relax hints between yields
  int pin_core = -1;  // process backend; -1 = unpinned
};

// Resolved guest export.  Resolution fails loudly at lookup, not at call.
class function_ref {
public:
  function_ref() = default;
  function_ref(std::string name, std::uint32_t index)
      : name_(std::move(name)), index_(index) {}
  const std::string& name() const { return name_; }
  std::uint32_t index() const { return index_; }

private:
  std::string name_;
  std::uint32_t index_ = 0;
};

// Isolation mechanism behind a sandbox.  Implementations map the region,
// dispatch invocations and own the guest heap.
class isolation_backend {
public:
  virtual ~isolation_backend() = default;

  virtual std::uintptr_t region_base() const = 0;
  virtual std::uint64_t region_size() const = 0;

  // -1 when the symbol is not exported.
  virtual std::int64_t resolve_symbol(std::string_view name) = 0;

  virtual wire_value invoke_fn(sandbox& s, std::uint32_t index,
                               std::span<const wire_value> args) = 0;
  virtual std::uint32_t guest_malloc(sandbox& s, std::uint32_t size, std::uint32_t align) = 0;
  virtual void guest_free(sandbox& s, std::uint32_t offset) = 0;

  virtual void set_sync(sync_mode) {}
  virtual sync_mode sync() const { return sync_mode::spin; }
  virtual void pin(int /*core*/) {
    raise(violation_kind::usage, "core pinning is unsupported on this backend");
  }

  virtual void shutdown(sandbox&) {}
};

namespace detail {

template <typename T>
inline constexpr bool is_callback_reg_v =
    std::is_same_v<std::remove_cvref_t<T>, callback_registration>;

template <typename A>
wire_value invoke_arg_to_wire(const A& arg, sandbox_id self) {
  using T = std::remove_cvref_t<A>;
  if constexpr (is_tainted_v<T>) {
    return to_guest_scalar(arg.raw_payload(), self);
  } else if constexpr (is_guest_ref_v<T>) {
    if (arg.origin() != self) {
      raise(violation_kind::taint_mix, "guest ref belongs to another sandbox", self);
    }
    return wire_value{wire_kind::ref, arg.offset().value()};
  } else if constexpr (is_callback_reg_v<T>) {
    if (arg.owner() != self) {
      raise(violation_kind::usage, "callback registration belongs to another sandbox", self);
    }
    return wire_value{wire_kind::slot, arg.slot()};
  } else if constexpr (std::is_pointer_v<T> || std::is_function_v<std::remove_pointer_t<T>>) {
    if constexpr (std::is_function_v<std::remove_pointer_t<T>>) {
      static_assert(!sizeof(T), "callbacks must be registered with register_callback; raw "
                                "function pointers never cross the boundary");
    } else {
      static_assert(!sizeof(T), "host pointers cannot cross the sandbox boundary; allocate "
                                "shared data in sandbox memory instead");
    }
    return wire_value{};
  } else if constexpr (std::is_arithmetic_v<T> && !std::is_same_v<T, bool>) {
    return to_guest_scalar(arg, self);
  } else {
    static_assert(!sizeof(T),
                  "invoke arguments must be scalars, tainted values, guest refs or "
                  "callback registrations");
    return wire_value{};
  }
}

template <typename Ret>
Ret wire_to_invoke_ret(const wire_value& w, sandbox_id self) {
  if constexpr (std::is_void_v<Ret>) {
    (void)w;
    (void)self;
  } else if constexpr (is_tainted_v<Ret>) {
    using V = typename Ret::value_type;
    return Ret(from_guest_scalar<V>(w, self), self);
  } else if constexpr (is_guest_ref_v<Ret>) {
    if (w.kind != wire_kind::ref) {
      raise(violation_kind::protocol, "guest function did not return a reference", self);
    }
    return Ret(static_cast<std::uint32_t>(w.bits), self);
  } else {
    static_assert(!sizeof(Ret),
                  "invoke results are tainted: request tainted<V>, guest_ref<T> or void");
  }
}

}  // namespace detail

// One isolation region: backend handle, region geometry, callback table,
// per-invocation context store and liveness flag.  Invocations are
// single-flight per instance; callbacks run on the thread blocked in invoke.
class sandbox : public sandbox_core {
public:
  // Defined in sandcage.hpp once all backends are visible.
  static std::shared_ptr<sandbox> create(const sandbox_config& config);

  ~sandbox() override { destroy(); }

  const sandbox_config& config() const { return config_; }
  backend_kind backend() const { return config_.backend; }

  // Tears the sandbox down: the region is unmapped and every outstanding
  // reference errors on use.  Idempotent.
  void destroy() {
    set_dead();
    if (backend_) backend_->shutdown(*this);
    backend_.reset();
    unregister();
  }

  // Transport failures (dead worker, channel tampering) leave the sandbox
  // unusable without reclaiming it; every later use reports sandbox-dead.
  void mark_transport_dead() { set_dead(); }

  function_ref lookup(std::string_view symbol) {
    check_alive();
    const std::int64_t idx = backend_->resolve_symbol(symbol);
    if (idx < 0) {
      fail(violation_kind::symbol_resolution,
           "guest does not export '" + std::string(symbol) + "'");
    }
    return function_ref(std::string(symbol), static_cast<std::uint32_t>(idx));
  }

  template <typename Ret = void, typename... A>
  Ret invoke(const function_ref& fn, A&&... args) {
    check_alive();
    std::array<wire_value, sizeof...(A)> wire{detail::invoke_arg_to_wire(args, id())...};
    invocation_gate gate(*this);
    wire_value ret;
    try {
      ret = backend_->invoke_fn(*this, fn.index(), std::span<const wire_value>(wire));
    } catch (const guest_unwind& u) {
      if (u.origin == id() && gate.outermost()) {
        // Host-mediated non-local exit lands here, at the outermost invoke.
        throw guest_abort_error(u.code, id());
      }
      throw;  // inner frame of a nested invoke: keep unwinding
    }
    return detail::wire_to_invoke_ret<Ret>(ret, id());
  }

  template <typename Ret = void, typename... A>
  Ret invoke(std::string_view symbol, A&&... args) {
    return invoke<Ret>(lookup(symbol), std::forward<A>(args)...);
  }

  // --- guest heap ---------------------------------------------------------

  guest_ref<std::uint8_t> malloc_bytes(std::uint32_t size, std::uint32_t align = 8) {
    check_alive();
    const std::uint32_t off = backend_->guest_malloc(*this, size, align);
    return guest_ref<std::uint8_t>(off, id());
  }

  template <typename V>
  guest_ref<V> malloc_array(std::uint32_t count)
    requires detail::guest_scalar_v<V>
  {
    check_alive();
    const std::uint64_t bytes = static_cast<std::uint64_t>(count) * sizeof(V);
    if (bytes > region_size()) {
      fail(violation_kind::alloc_failure, "array allocation larger than region");
    }
    const std::uint32_t off =
        backend_->guest_malloc(*this, static_cast<std::uint32_t>(bytes), alignof(V));
    return guest_ref<V>(off, id());
  }

  template <guest_record_tag T>
  guest_ref<T> malloc_record() {
    check_alive();
    const record_layout& layout = record_registry::instance().get(T::record_name, id());
    const std::uint32_t off = backend_->guest_malloc(*this, layout.size(), 8);
    return guest_ref<T>(off, id());
  }

  template <typename V>
  void free(const guest_ref<V>& ref) {
    check_alive();
    if (ref.origin() != id()) {
      fail(violation_kind::usage, "freeing a reference owned by another sandbox");
    }
    backend_->guest_free(*this, ref.offset().value());
  }

  // --- callbacks ----------------------------------------------------------

  template <typename F>
  callback_registration register_callback(F&& fn) {
    using traits = detail::callable_traits<std::remove_cvref_t<F>>;
    static_assert(std::is_same_v<std::remove_cvref_t<typename traits::first>, sandbox>,
                  "callbacks take the owning sandbox& as their first parameter");
    using rest = typename traits::rest;
    using ret = typename traits::ret;
    callback_signature sig =
        detail::make_signature(detail::callback_ret_kind<ret>(), static_cast<rest*>(nullptr));
    callback_thunk thunk = detail::make_callback_thunk<std::remove_cvref_t<F>, ret>(
        std::forward<F>(fn), static_cast<rest*>(nullptr));
    return do_register(std::move(sig), std::move(thunk));
  }

  void deactivate_slot(std::uint32_t slot) {
    std::lock_guard lock(cb_mu_);
    if (slot < callback_table_size) {
      slots_[slot].active = false;
      slots_[slot].thunk = nullptr;
    }
  }

  std::uint32_t active_callbacks() {
    std::lock_guard lock(cb_mu_);
    std::uint32_t n = 0;
    for (auto& s : slots_) n += s.active ? 1 : 0;
    return n;
  }

  // Guest-reachable entry point: every guest-initiated host call funnels
  // through here.  An inactive or out-of-range slot, or a signature
  // mismatch, is recorded and aborts the guest call.
  wire_value dispatch_trampoline(std::uint32_t slot, std::span<const wire_value> args) {
    callback_thunk thunk;
    {
      std::lock_guard lock(cb_mu_);
      if (slot >= callback_table_size || !slots_[slot].active) {
        raise(violation_kind::callback,
              "guest dispatched inactive callback slot " + std::to_string(slot), id());
      }
      const callback_signature& sig = slots_[slot].signature;
      if (args.size() != sig.arg_kinds.size()) {
        raise(violation_kind::callback, "callback argument count mismatch", id());
      }
      for (std::size_t i = 0; i < args.size(); i++) {
        if (args[i].kind != sig.arg_kinds[i]) {
          raise(violation_kind::callback, "callback argument kind mismatch", id());
        }
      }
      thunk = slots_[slot].thunk;
    }
    return thunk(*this, id(), args);
  }

  // --- per-invocation context store ----------------------------------------
  //
  // Host-side replacement for stashing host addresses in guest memory: small
  // keyed slots scoped to (sandbox, invocation).  Values staged before an
  // invoke become visible to callbacks during it and vanish when it returns.

  void set_invoke_context(std::uint32_t key, void* value) {
    if (key >= context_store_size) {
      fail(violation_kind::usage, "context key out of range");
    }
    std::lock_guard lock(inv_mu_);
    (depth_ > 0 ? active_ctx_ : staged_ctx_)[key] = value;
  }

  void* get_invoke_context(std::uint32_t key) {
    if (key >= context_store_size) {
      fail(violation_kind::usage, "context key out of range");
    }
    std::lock_guard lock(inv_mu_);
    return (depth_ > 0 ? active_ctx_ : staged_ctx_)[key];
  }

  // --- non-local exit -------------------------------------------------------

  // Unwinds the in-flight invocation stack of this sandbox down to the
  // outermost invoke, which returns guest-abort(code).  No guest-controlled
  // jump target is involved; the unwind is entirely host-mediated.
  [[noreturn]] void nonlocal_exit(std::int32_t code) {
    {
      std::lock_guard lock(inv_mu_);
      if (depth_ == 0) {
        fail(violation_kind::protocol, "non-local exit with no invocation in flight");
      }
    }
    throw guest_unwind{id(), code};
  }

  // --- sync / pinning -------------------------------------------------------

  void set_sync_mode(sync_mode m) {
    check_alive();
    backend_->set_sync(m);
  }
  sync_mode current_sync_mode() const { return backend_ ? backend_->sync() : sync_mode::spin; }

  void pin_worker(int core) {
    check_alive();
    backend_->pin(core);
  }

  std::uint32_t invoke_depth() {
    std::lock_guard lock(inv_mu_);
    return depth_;
  }

  isolation_backend& backend_impl() { return *backend_; }

private:
  explicit sandbox(sandbox_config config) : config_(std::move(config)) {}

  void attach_backend(std::unique_ptr<isolation_backend> backend) {
    backend_ = std::move(backend);
    set_region(backend_->region_base(), backend_->region_size());
  }

  struct slot_entry {
    bool active = false;
    callback_signature signature;
    callback_thunk thunk;
  };

  callback_registration do_register(callback_signature sig, callback_thunk thunk) {
    check_alive();
    std::lock_guard lock(cb_mu_);
    for (std::uint32_t i = 0; i < callback_table_size; i++) {
      if (!slots_[i].active) {
        slots_[i] = slot_entry{true, std::move(sig), std::move(thunk)};
        return callback_registration(id(), i);
      }
    }
    fail(violation_kind::slots_exhausted, "all callback slots are active");
  }

  // Serializes invocations per instance.  Re-entrant invokes from callbacks
  // on the same thread are allowed up to max_invoke_depth.
  class invocation_gate {
  public:
    explicit invocation_gate(sandbox& s) : s_(s) {
      std::unique_lock lock(s_.inv_mu_);
      const auto me = std::this_thread::get_id();
      if (s_.depth_ > 0 && s_.owner_ != me) {
        if (s_.config_.contention == contention_mode::fail) {
          raise(violation_kind::concurrent_invoke,
                "another thread is mid-invocation on this sandbox", s_.id());
        }
        s_.inv_cv_.wait(lock, [&] { return s_.depth_ == 0; });
      }
      if (s_.depth_ >= max_invoke_depth) {
        raise(violation_kind::reentrancy, "invoke nesting exceeds max depth", s_.id());
      }
      s_.owner_ = me;
      entered_depth_ = ++s_.depth_;
      if (entered_depth_ == 1) {
        s_.active_ctx_ = s_.staged_ctx_;
        s_.staged_ctx_.fill(nullptr);
      }
    }

    ~invocation_gate() {
      std::lock_guard lock(s_.inv_mu_);
      if (--s_.depth_ == 0) {
        s_.active_ctx_.fill(nullptr);
        s_.inv_cv_.notify_all();
      }
    }

    bool outermost() const { return entered_depth_ == 1; }

  private:
    sandbox& s_;
    std::uint32_t entered_depth_ = 0;
  };

  sandbox_config config_;
  std::unique_ptr<isolation_backend> backend_;

  std::mutex cb_mu_;
  std::array<slot_entry, callback_table_size> slots_{};

  std::mutex inv_mu_;
  std::condition_variable inv_cv_;
  std::thread::id owner_;
  std::uint32_t depth_ = 0;
  std::array<void*, context_store_size> staged_ctx_{};
  std::array<void*, context_store_size> active_ctx_{};
};

inline void callback_registration::unregister() {
  if (owner_ == no_sandbox) return;
  const sandbox_id owner = owner_;
  owner_ = no_sandbox;
  try {
    auto& core = sandbox_registry::instance().get(owner);
    static_cast<sandbox&>(core).deactivate_slot(slot_);
  } catch (const violation_error&) {
    // Sandbox already gone; nothing to deactivate.
  }
}

// Convenience free functions mirroring the runtime operation names.
inline void nonlocal_exit(sandbox& s, std::int32_t code) { s.nonlocal_exit(code); }
inline void set_invoke_context(sandbox& s, std::uint32_t key, void* v) {
  s.set_invoke_context(key, v);
}
inline void* get_invoke_context(sandbox& s, std::uint32_t key) {
  return s.get_invoke_context(key);
}

}  // namespace sandcage
