// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <functional>
#include <string>

#include <pthread.h>
#include <sched.h>
#include <time.h>

#include "sandcage/core.hpp"
#include "sandcage/error.hpp"
#include "sandcage/machine.hpp"

namespace sandcage::rpc {

// Shared-memory control block, at region offset 0.  All fields little-endian.
//
//   header  @0    magic "SCG1", version u32, sync_mode u32 {0 SPIN, 1 EVENT},
//                 turn u32 {0 host, 1 guest}, seq u64
//   message @64   opcode u32, fn_or_slot u32, argc u32, status u32,
//                 args[16] of {kind u32, pad u32, value u64}
//   sync    @768  pshared mutex + two condvars (host-initialized)
//   heap    @4096
//
// The block lives inside the guest region on purpose: a compromised guest
// can scribble any of it, so the host treats every field it reads as
// untrusted input.
inline constexpr std::uint32_t header_offset = 0;
inline constexpr std::uint32_t message_offset = 64;
inline constexpr std::uint32_t sync_offset = 768;
inline constexpr std::uint32_t control_size = 4096;
inline constexpr std::uint32_t max_args = 16;
inline constexpr std::uint32_t protocol_version = 1;
inline constexpr char channel_magic[4] = {'S', 'C', 'G', '1'};

enum opcode : std::uint32_t {
  op_invoke = 1,
  op_return = 2,
  op_callback = 3,
  op_cbreturn = 4,
  op_malloc = 5,
  op_mfree = 6,
  op_shutdown = 7,
  op_abort = 8,
};

enum turn_side : std::uint32_t {
  side_host = 0,
  side_guest = 1,
};

struct message {
  std::uint32_t opcode = 0;
  std::uint32_t fn_or_slot = 0;
  std::uint32_t argc = 0;
  std::uint32_t status = 0;
  wire_value args[max_args] = {};
};

enum class wait_result {
  ready,
  timeout,
  peer_dead,
};

struct channel_header {
  char magic[4];
  std::uint32_t version;
  std::atomic<std::uint32_t> sync_mode;
  std::atomic<std::uint32_t> turn;
  std::atomic<std::uint64_t> seq;
};
static_assert(sizeof(channel_header) <= message_offset);

struct channel_sync {
  pthread_mutex_t mu;
  pthread_cond_t cv_host;
  pthread_cond_t cv_guest;
};
static_assert(sync_offset + sizeof(channel_sync) <= control_size);

namespace detail {

inline timespec monotonic_deadline(std::chrono::nanoseconds from_now) {
  timespec ts;
  clock_gettime(CLOCK_MONOTONIC, &ts);
  const auto total = std::chrono::nanoseconds(ts.tv_nsec) + from_now;
  ts.tv_sec += std::chrono::duration_cast<std::chrono::seconds>(total).count();
  ts.tv_nsec = (total % std::chrono::seconds(1)).count();
  return ts;
}

}  // namespace detail

// Turn-based half-duplex message channel over a raw shared mapping.  One
// message slot, strict alternation; seq increments on every handoff and is
// audited on receipt.  SPIN waits busy-poll the turn word with a relax
// hint and fall back to the EVENT path once the relax budget is exhausted;
// EVENT waits block on a process-shared condition variable with a bounded
// timed wait, so a scribbled sync block degrades to polling instead of
// hanging the host.
class endpoint {
public:
  endpoint() = default;
  endpoint(std::uint8_t* base, turn_side self) : base_(base), self_(self) {}

  channel_header& header() { return *reinterpret_cast<channel_header*>(base_ + header_offset); }
  channel_sync& sync() { return *reinterpret_cast<channel_sync*>(base_ + sync_offset); }

  // Host-side one-time initialization of the control block.
  void init_control(sync_mode mode) {
    auto& h = header();
    std::memcpy(h.magic, channel_magic, 4);
    h.version = protocol_version;
    h.sync_mode.store(static_cast<std::uint32_t>(mode), std::memory_order_relaxed);
    h.turn.store(side_guest, std::memory_order_relaxed);
    h.seq.store(0, std::memory_order_relaxed);

    auto& s = sync();
    pthread_mutexattr_t ma;
    pthread_mutexattr_init(&ma);
    pthread_mutexattr_setpshared(&ma, PTHREAD_PROCESS_SHARED);
    pthread_mutexattr_setrobust(&ma, PTHREAD_MUTEX_ROBUST);
    pthread_mutex_init(&s.mu, &ma);
    pthread_mutexattr_destroy(&ma);
    pthread_condattr_t ca;
    pthread_condattr_init(&ca);
    pthread_condattr_setpshared(&ca, PTHREAD_PROCESS_SHARED);
    pthread_condattr_setclock(&ca, CLOCK_MONOTONIC);
    pthread_cond_init(&s.cv_host, &ca);
    pthread_cond_init(&s.cv_guest, &ca);
    pthread_condattr_destroy(&ca);
  }

  bool check_magic() {
    auto& h = header();
    return std::memcmp(h.magic, channel_magic, 4) == 0 && h.version == protocol_version;
  }

  sync_mode mode() {
    // Any scribbled value other than 1 degrades deterministically to spin.
    return header().sync_mode.load(std::memory_order_relaxed) ==
                   static_cast<std::uint32_t>(sync_mode::event)
               ? sync_mode::event
               : sync_mode::spin;
  }
  void set_mode(sync_mode m) {
    header().sync_mode.store(static_cast<std::uint32_t>(m), std::memory_order_relaxed);
  }

  void write_message(const message& m) {
    std::uint8_t* p = base_ + message_offset;
    store32(p + 0, m.opcode);
    store32(p + 4, m.fn_or_slot);
    store32(p + 8, m.argc);
    store32(p + 12, m.status);
    for (std::uint32_t i = 0; i < max_args; i++) {
      std::uint8_t* a = p + 16 + 16 * i;
      if (i < m.argc) {
        store32(a, static_cast<std::uint32_t>(m.args[i].kind));
        store32(a + 4, 0);
        store64(a + 8, m.args[i].bits);
      } else {
        std::memset(a, 0, 16);  // args beyond argc are zero
      }
    }
  }

  message read_message() {
    message m;
    const std::uint8_t* p = base_ + message_offset;
    m.opcode = load32(p + 0);
    m.fn_or_slot = load32(p + 4);
    m.argc = load32(p + 8);
    m.status = load32(p + 12);
    for (std::uint32_t i = 0; i < max_args; i++) {
      const std::uint8_t* a = p + 16 + 16 * i;
      m.args[i].kind = static_cast<wire_kind>(load32(a));
      m.args[i].bits = load64(a + 8);
    }
    return m;
  }

  // Untrusted-input validation of a received message.
  bool validate(const message& m, std::initializer_list<std::uint32_t> allowed_opcodes) {
    bool op_ok = false;
    for (auto op : allowed_opcodes) op_ok = op_ok || m.opcode == op;
    if (!op_ok || m.argc > max_args) return false;
    for (std::uint32_t i = 0; i < m.argc; i++) {
      if (!wire_kind_valid(static_cast<std::uint32_t>(m.args[i].kind))) return false;
    }
    const std::uint8_t* p = base_ + message_offset;
    for (std::uint32_t i = m.argc; i < max_args; i++) {
      if (load32(p + 16 + 16 * i) != 0 || load64(p + 16 + 16 * i + 8) != 0) return false;
    }
    return true;
  }

  // Hand the turn to the peer.  The message must already be written.
  void post(message const& m) {
    write_message(m);
    auto& h = header();
    const std::uint64_t next = ++seq_;
    h.seq.store(next, std::memory_order_relaxed);
    h.turn.store(self_ == side_host ? side_guest : side_host, std::memory_order_release);
    if (mode() == sync_mode::event) {
      auto& s = sync();
      timespec ts = detail::monotonic_deadline(std::chrono::milliseconds(5));
      const int rc = pthread_mutex_timedlock(&s.mu, &ts);
      if (rc == 0 || rc == EOWNERDEAD) {
        if (rc == EOWNERDEAD) pthread_mutex_consistent(&s.mu);
        pthread_cond_signal(self_ == side_host ? &s.cv_guest : &s.cv_host);
        pthread_mutex_unlock(&s.mu);
      }
      // On lock failure the peer's timed wait picks the turn flip up anyway.
    }
  }

  // Wait until the turn word points at us.  `peer_alive` is polled roughly
  // every millisecond; spin_budget counts relax iterations before the spin
  // path falls back to the event path.
  wait_result wait_turn(std::chrono::steady_clock::time_point deadline,
                        const std::function<bool()>& peer_alive, std::uint64_t spin_budget,
                        std::uint32_t pause_per_yield = 4) {
    auto& h = header();
    std::uint64_t relax = 0;
    std::uint32_t sincecheck = 0;
    for (;;) {
      if (h.turn.load(std::memory_order_acquire) == self_) return audit_seq();
      const bool spin_phase = mode() == sync_mode::spin && relax < spin_budget;
      if (spin_phase) {
        for (std::uint32_t i = 0; i < pause_per_yield; i++) {
#if defined(__x86_64__) || defined(__i386__)
          __builtin_ia32_pause();
#endif
          if (h.turn.load(std::memory_order_acquire) == self_) return audit_seq();
        }
        relax += pause_per_yield;
        sched_yield();
        if (++sincecheck >= 256) {
          sincecheck = 0;
          if (std::chrono::steady_clock::now() > deadline) return wait_result::timeout;
          if (peer_alive && !peer_alive()) return wait_result::peer_dead;
        }
        continue;
      }
      // EVENT path (or spin budget exhausted): bounded block on the condvar.
      auto& s = sync();
      timespec ts = detail::monotonic_deadline(std::chrono::milliseconds(1));
      const int rc = pthread_mutex_timedlock(&s.mu, &ts);
      if (rc == 0 || rc == EOWNERDEAD) {
        if (rc == EOWNERDEAD) pthread_mutex_consistent(&s.mu);
        while (h.turn.load(std::memory_order_acquire) != self_) {
          timespec ws = detail::monotonic_deadline(std::chrono::milliseconds(1));
          if (pthread_cond_timedwait(self_ == side_host ? &s.cv_host : &s.cv_guest, &s.mu,
                                     &ws) == ETIMEDOUT) {
            break;
          }
        }
        pthread_mutex_unlock(&s.mu);
      }
      if (h.turn.load(std::memory_order_acquire) == self_) return audit_seq();
      if (std::chrono::steady_clock::now() > deadline) return wait_result::timeout;
      if (peer_alive && !peer_alive()) return wait_result::peer_dead;
    }
  }

  // Strict alternation audit: every handoff increments seq by exactly one.
  bool seq_ok() const { return seq_valid_; }
  std::uint64_t seq() const { return seq_; }

  std::uint8_t* memory() { return base_; }

private:
  wait_result audit_seq() {
    const std::uint64_t got = header().seq.load(std::memory_order_relaxed);
    seq_valid_ = (got == seq_ + 1);
    seq_ = got;
    return wait_result::ready;
  }

  static void store32(std::uint8_t* p, std::uint32_t v) { std::memcpy(p, &v, 4); }
  static void store64(std::uint8_t* p, std::uint64_t v) { std::memcpy(p, &v, 8); }
  static std::uint32_t load32(const std::uint8_t* p) {
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
  }
  static std::uint64_t load64(const std::uint8_t* p) {
    std::uint64_t v;
    std::memcpy(&v, p, 8);
    return v;
  }

  std::uint8_t* base_ = nullptr;
  turn_side self_ = side_host;
  std::uint64_t seq_ = 0;
  bool seq_valid_ = true;
};

}  // namespace sandcage::rpc
