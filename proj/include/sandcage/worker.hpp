// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <thread>

#include <unistd.h>

#include "sandcage/guest/env.hpp"
#include "sandcage/guest/rli_guest.hpp"
#include "sandcage/heap.hpp"
#include "sandcage/rpc.hpp"

namespace sandcage::worker {

inline constexpr int exit_clean = 0;
inline constexpr int exit_protocol_violation = 2;
inline constexpr int exit_host_abort = 3;

// Worker-side non-local exit token.
struct abort_unwind {
  std::int32_t code;
};

// Termination request (SHUTDOWN or host-initiated ABORT).
struct terminate_request {
  int exit_code;
};

class runtime;

// Guest environment inside the worker process.  Guest memory access is the
// worker's own mapping of the shared region; callbacks travel over the
// channel.
class env {
public:
  explicit env(runtime& rt) : rt_(rt) {}

  std::uint8_t load_u8(std::uint32_t off) {
    std::uint8_t v;
    load(off, &v, 1);
    return v;
  }
  std::uint32_t load_u32(std::uint32_t off) {
    std::uint32_t v;
    load(off, &v, 4);
    return v;
  }
  void store_u8(std::uint32_t off, std::uint8_t v) { store(off, &v, 1); }
  void store_u32(std::uint32_t off, std::uint32_t v) { store(off, &v, 4); }
  void store_u64(std::uint32_t off, std::uint64_t v) { store(off, &v, 8); }

  std::uint32_t gmalloc(std::uint32_t size, std::uint32_t align);
  void gfree(std::uint32_t off);
  wire_value call_host(std::uint32_t slot, std::span<const wire_value> args);
  [[noreturn]] void guest_exit(std::int32_t code) { throw abort_unwind{code}; }
  guest_variant variant() const;
  std::uint64_t memory_size() const;
  void start_scanline_mutator(std::uint32_t off);

private:
  void load(std::uint32_t off, void* dst, std::uint32_t n);
  void store(std::uint32_t off, const void* src, std::uint32_t n);
  runtime& rt_;
};

class runtime {
public:
  runtime(std::uint8_t* mem, std::uint64_t size, guest_variant variant,
          std::uint64_t spin_budget = 100'000'000, std::uint32_t spin_pause = 4)
      : mem_(mem),
        size_(size),
        variant_(variant),
        spin_budget_(spin_budget),
        spin_pause_(spin_pause),
        heap_(rpc::control_size, size),
        ep_(mem, rpc::side_guest) {}

  ~runtime() { stop_mutator(); }

  [[noreturn]] void run() {
    if (!ep_.check_magic()) ::_exit(exit_protocol_violation);
    // Announce readiness; the host owns the turn from here on.
    rpc::message ready;
    ready.opcode = rpc::op_return;
    ep_.post(ready);
    try {
      for (;;) {
        const rpc::message m = receive(
            {rpc::op_invoke, rpc::op_malloc, rpc::op_mfree, rpc::op_shutdown, rpc::op_abort});
        dispatch_base(m);
      }
    } catch (const terminate_request& t) {
      stop_mutator();
      ::_exit(t.exit_code);
    }
  }

  std::uint8_t* memory() { return mem_; }
  std::uint64_t memory_size() const { return size_; }
  guest_variant variant() const { return variant_; }
  region_heap& heap() { return heap_; }

  // The wait a guest callback performs after posting CALLBACK: the reply
  // may be interleaved with nested invokes and heap traffic.
  wire_value pump_for_cbreturn() {
    for (;;) {
      const rpc::message m = receive({rpc::op_cbreturn, rpc::op_invoke, rpc::op_malloc,
                                      rpc::op_mfree, rpc::op_abort, rpc::op_shutdown});
      if (m.opcode == rpc::op_cbreturn) {
        if (m.status != 0) {
          // Host aborted the callback: unwind the whole guest stack.
          throw abort_unwind{static_cast<std::int32_t>(m.args[0].bits)};
        }
        return m.args[0];
      }
      dispatch_base(m);
    }
  }

  void post(const rpc::message& m) { ep_.post(m); }

  void start_scanline_mutator(std::uint32_t off) {
    bool expected = false;
    if (!mutator_running_.compare_exchange_strong(expected, true)) return;
    mutator_stop_.store(false);
    const std::uint64_t target = (off & (size_ - 1)) & ~std::uint64_t{3};
    mutator_ = std::thread([this, target] {
      auto* p = reinterpret_cast<std::atomic<std::uint32_t>*>(mem_ + target);
      while (!mutator_stop_.load(std::memory_order_relaxed)) {
        p->store(0x7FFFFFF0u, std::memory_order_relaxed);
      }
    });
  }

private:
  rpc::message receive(std::initializer_list<std::uint32_t> allowed) {
    // Far-future deadline; liveness comes from the orphan check.
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::hours(24);
    const auto res = ep_.wait_turn(
        deadline, [] { return ::getppid() != 1; }, spin_budget_, spin_pause_);
    if (res != rpc::wait_result::ready) ::_exit(exit_protocol_violation);
    if (!ep_.seq_ok()) ::_exit(exit_protocol_violation);
    const rpc::message m = ep_.read_message();
    if (!ep_.validate(m, allowed)) ::_exit(exit_protocol_violation);
    return m;
  }

  void dispatch_base(const rpc::message& m) {
    switch (m.opcode) {
      case rpc::op_invoke:
        serve_invoke(m);
        break;
      case rpc::op_malloc: {
        rpc::message reply;
        reply.opcode = rpc::op_return;
        try {
          const auto off = heap_.allocate(static_cast<std::uint32_t>(m.args[0].bits),
                                          static_cast<std::uint32_t>(m.args[1].bits));
          reply.argc = 1;
          reply.args[0] = {wire_kind::u32, off};
        } catch (const violation_error&) {
          reply.status = 1;
        }
        ep_.post(reply);
        break;
      }
      case rpc::op_mfree: {
        rpc::message reply;
        reply.opcode = rpc::op_return;
        try {
          heap_.deallocate(static_cast<std::uint32_t>(m.args[0].bits));
        } catch (const violation_error&) {
          reply.status = 1;
        }
        ep_.post(reply);
        break;
      }
      case rpc::op_shutdown:
        throw terminate_request{exit_clean};
      case rpc::op_abort:
        throw terminate_request{exit_host_abort};
      default:
        ::_exit(exit_protocol_violation);
    }
  }

  void serve_invoke(const rpc::message& m) {
    const auto exports = rli::codec<env>::exports();
    rpc::message reply;
    reply.opcode = rpc::op_return;
    if (m.fn_or_slot >= exports.size()) {
      reply.status = 2;
      ep_.post(reply);
      return;
    }
    depth_++;
    try {
      env e(*this);
      reply.args[0] = exports[m.fn_or_slot].fn(e, std::span<const wire_value>(m.args, m.argc));
      reply.argc = 1;
      depth_--;
      ep_.post(reply);
    } catch (const abort_unwind& a) {
      depth_--;
      if (depth_ > 0) throw;  // unwind the whole guest stack first
      rpc::message abort_msg;
      abort_msg.opcode = rpc::op_abort;
      abort_msg.status = static_cast<std::uint32_t>(a.code);
      ep_.post(abort_msg);
    }
  }

  void stop_mutator() {
    if (mutator_running_.load()) {
      mutator_stop_.store(true);
      if (mutator_.joinable()) mutator_.join();
      mutator_running_.store(false);
    }
  }

  friend class env;

  std::uint8_t* mem_;
  std::uint64_t size_;
  guest_variant variant_;
  std::uint64_t spin_budget_;
  std::uint32_t spin_pause_;
  region_heap heap_;
  rpc::endpoint ep_;
  std::uint32_t depth_ = 0;

  std::atomic<bool> mutator_running_{false};
  std::atomic<bool> mutator_stop_{false};
  std::thread mutator_;
};

inline std::uint32_t env::gmalloc(std::uint32_t size, std::uint32_t align) {
  try {
    return rt_.heap().allocate(size, align);
  } catch (const violation_error&) {
    return 0;
  }
}

inline void env::gfree(std::uint32_t off) {
  try {
    rt_.heap().deallocate(off);
  } catch (const violation_error&) {
  }
}

inline wire_value env::call_host(std::uint32_t slot, std::span<const wire_value> args) {
  rpc::message m;
  m.opcode = rpc::op_callback;
  m.fn_or_slot = slot;
  m.argc = static_cast<std::uint32_t>(args.size());
  for (std::size_t i = 0; i < args.size() && i < rpc::max_args; i++) m.args[i] = args[i];
  rt_.post(m);
  return rt_.pump_for_cbreturn();
}

inline guest_variant env::variant() const { return rt_.variant(); }
inline std::uint64_t env::memory_size() const { return rt_.memory_size(); }
inline void env::start_scanline_mutator(std::uint32_t off) { rt_.start_scanline_mutator(off); }

inline void env::load(std::uint32_t off, void* dst, std::uint32_t n) {
  // The worker's own mapping is its entire reachable world; offsets wrap
  // in-region like any masked heap.
  const std::uint64_t o = off & (rt_.memory_size() - 1);
  if (o + n <= rt_.memory_size()) {
    std::memcpy(dst, rt_.memory() + o, n);
  } else {
    for (std::uint32_t i = 0; i < n; i++) {
      static_cast<std::uint8_t*>(dst)[i] = rt_.memory()[(o + i) & (rt_.memory_size() - 1)];
    }
  }
}

inline void env::store(std::uint32_t off, const void* src, std::uint32_t n) {
  const std::uint64_t o = off & (rt_.memory_size() - 1);
  if (o + n <= rt_.memory_size()) {
    std::memcpy(rt_.memory() + o, src, n);
  } else {
    for (std::uint32_t i = 0; i < n; i++) {
      rt_.memory()[(o + i) & (rt_.memory_size() - 1)] = static_cast<const std::uint8_t*>(src)[i];
    }
  }
}

}  // namespace sandcage::worker
