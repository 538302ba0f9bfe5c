// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "sandcage/error.hpp"
#include "sandcage/guest/env.hpp"
#include "sandcage/guest/rli_guest.hpp"
#include "sandcage/heap.hpp"
#include "sandcage/region.hpp"
#include "sandcage/sandbox.hpp"

namespace sandcage {

// Guest heap starts past a reserved low page so offset 0 stays a null ref
// and the layout matches the process backend's control block.
inline constexpr std::uint32_t guest_heap_base = 4096;

class inproc_backend;

// Environment handed to host-compiled guest code.  The emusfi flavour
// routes every access through masking; the null flavour is a plain base +
// offset load/store, i.e. no isolation.
class inproc_env {
public:
  inproc_env(sandbox& s, inproc_backend& b) : sandbox_(s), backend_(b) {}

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
  wire_value call_host(std::uint32_t slot, std::span<const wire_value> args) {
    return sandbox_.dispatch_trampoline(slot, args);
  }
  [[noreturn]] void guest_exit(std::int32_t code) { sandbox_.nonlocal_exit(code); }
  guest_variant variant() const;
  std::uint64_t memory_size() const;
  void start_scanline_mutator(std::uint32_t off);

private:
  void load(std::uint32_t off, void* dst, std::uint32_t n);
  void store(std::uint32_t off, const void* src, std::uint32_t n);

  sandbox& sandbox_;
  inproc_backend& backend_;
};

// Shared implementation of the three in-process backends.
//   null_direct:   no isolation; internal symbols also resolve
//   null_indirect: no isolation; only table-routed exports resolve
//   emusfi:        all guest memory operations masked in-region
class inproc_backend final : public isolation_backend {
public:
  inproc_backend(backend_kind kind, const sandbox_config& cfg)
      : kind_(kind),
        variant_(parse_guest_variant(cfg.guest)),
        region_(cfg.region_size),
        heap_(guest_heap_base, cfg.region_size) {}

  ~inproc_backend() override { stop_mutator(); }

  std::uintptr_t region_base() const override { return region_.base(); }
  std::uint64_t region_size() const override { return region_.size(); }

  std::int64_t resolve_symbol(std::string_view name) override {
    const auto exports = rli::codec<inproc_env>::exports();
    for (std::size_t i = 0; i < exports.size(); i++) {
      if (name == exports[i].name) return static_cast<std::int64_t>(i);
    }
    if (kind_ == backend_kind::null_direct) {
      // The statically linked build keeps non-exported symbols reachable.
      const auto internals = rli::codec<inproc_env>::internals();
      for (std::size_t i = 0; i < internals.size(); i++) {
        if (name == internals[i].name) {
          return static_cast<std::int64_t>(exports.size() + i);
        }
      }
    }
    return -1;
  }

  wire_value invoke_fn(sandbox& s, std::uint32_t index,
                       std::span<const wire_value> args) override {
    const auto exports = rli::codec<inproc_env>::exports();
    inproc_env env(s, *this);
    if (index < exports.size()) {
      return exports[index].fn(env, args);
    }
    const auto internals = rli::codec<inproc_env>::internals();
    const std::uint32_t i = index - static_cast<std::uint32_t>(exports.size());
    if (kind_ == backend_kind::null_direct && i < internals.size()) {
      return internals[i].fn(env, args);
    }
    raise(violation_kind::symbol_resolution, "invoke of unresolved function index");
  }

  std::uint32_t guest_malloc(sandbox& s, std::uint32_t size, std::uint32_t align) override {
    std::lock_guard lock(heap_mu_);
    return heap_.allocate(size, align, s.id());
  }

  void guest_free(sandbox& s, std::uint32_t offset) override {
    std::lock_guard lock(heap_mu_);
    heap_.deallocate(offset, s.id());
  }

  void shutdown(sandbox&) override { stop_mutator(); }

  masked_region& region() { return region_; }
  region_heap& heap() { return heap_; }
  std::mutex& heap_mutex() { return heap_mu_; }
  guest_variant variant() const { return variant_; }
  bool masked() const { return kind_ == backend_kind::emusfi; }

  // m5 support: a guest-side thread flipping the watched field for the rest
  // of the sandbox's life.
  void start_scanline_mutator(std::uint32_t off) {
    bool expected = false;
    if (!mutator_running_.compare_exchange_strong(expected, true)) return;
    mutator_stop_.store(false);
    const std::uintptr_t addr = region_.masked_address(off) & ~std::uintptr_t{3};
    mutator_ = std::thread([this, addr] {
      auto* p = reinterpret_cast<std::atomic<std::uint32_t>*>(addr);
      while (!mutator_stop_.load(std::memory_order_relaxed)) {
        p->store(0x7FFFFFF0u, std::memory_order_relaxed);
      }
    });
  }

private:
  void stop_mutator() {
    if (mutator_running_.load()) {
      mutator_stop_.store(true);
      if (mutator_.joinable()) mutator_.join();
      mutator_running_.store(false);
    }
  }

  backend_kind kind_;
  guest_variant variant_;
  masked_region region_;
  std::mutex heap_mu_;
  region_heap heap_;

  std::atomic<bool> mutator_running_{false};
  std::atomic<bool> mutator_stop_{false};
  std::thread mutator_;
};

inline std::uint32_t inproc_env::gmalloc(std::uint32_t size, std::uint32_t align) {
  std::lock_guard lock(backend_.heap_mutex());
  try {
    return backend_.heap().allocate(size, align);
  } catch (const violation_error&) {
    return 0;  // guest-style malloc failure
  }
}

inline void inproc_env::gfree(std::uint32_t off) {
  std::lock_guard lock(backend_.heap_mutex());
  try {
    backend_.heap().deallocate(off);
  } catch (const violation_error&) {
    // Guest corrupting its own heap only hurts the guest.
  }
}

inline guest_variant inproc_env::variant() const { return backend_.variant(); }
inline std::uint64_t inproc_env::memory_size() const { return backend_.region().size(); }
inline void inproc_env::start_scanline_mutator(std::uint32_t off) {
  backend_.start_scanline_mutator(off);
}

inline void inproc_env::load(std::uint32_t off, void* dst, std::uint32_t n) {
  if (backend_.masked()) {
    backend_.region().masked_load(off, dst, n);
  } else {
    std::memcpy(dst, reinterpret_cast<const void*>(backend_.region().base() + off), n);
  }
}

inline void inproc_env::store(std::uint32_t off, const void* src, std::uint32_t n) {
  if (backend_.masked()) {
    backend_.region().masked_store(off, src, n);
  } else {
    std::memcpy(reinterpret_cast<void*>(backend_.region().base() + off), src, n);
  }
}

}  // namespace sandcage
