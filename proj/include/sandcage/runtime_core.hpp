// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <unordered_map>

#include "sandcage/core.hpp"
#include "sandcage/error.hpp"
#include "sandcage/region.hpp"

namespace sandcage {

// Per-sandbox tally of violations raised against it, kept for the attack
// regression report.
class violation_log {
public:
  void record(violation_kind k) {
    counts_[static_cast<std::size_t>(k)].fetch_add(1, std::memory_order_relaxed);
  }
  std::uint64_t count(violation_kind k) const {
    return counts_[static_cast<std::size_t>(k)].load(std::memory_order_relaxed);
  }
  std::uint64_t total() const {
    std::uint64_t sum = 0;
    for (auto& c : counts_) sum += c.load(std::memory_order_relaxed);
    return sum;
  }

private:
  std::array<std::atomic<std::uint64_t>, 32> counts_{};
};

class sandbox_registry;

// The part of a sandbox that tainted references need: identity, the host
// view of the region, liveness, and the violation tally.  The full runtime
// (invocation, callbacks, backends) layers on top of this.  Instances
// self-register so plain-value references can find them by id.
class sandbox_core {
public:
  sandbox_core();
  virtual ~sandbox_core();

  sandbox_id id() const { return id_; }
  bool alive() const { return alive_.load(std::memory_order_acquire); }

  std::uintptr_t region_base() const { return region_base_; }
  std::uint64_t region_size() const { return region_size_; }

  violation_log& violations() { return log_; }
  const violation_log& violations() const { return log_; }

  // Recording happens inside raise() through the registry hook.
  [[noreturn]] void fail(violation_kind k, std::string what) { raise(k, std::move(what), id_); }

  void check_alive() {
    if (!alive()) fail(violation_kind::sandbox_dead, "sandbox is destroyed");
  }

  // Host-trusted bounds-checked access into the region.  The guest may
  // mutate these bytes concurrently at any time; callers that need a stable
  // value must copy first (copy_and_verify) or freeze.
  void host_read(std::uint64_t offset, void* dst, std::uint64_t len) {
    check_alive();
    check_bounds(offset, len);
    std::memcpy(dst, reinterpret_cast<const void*>(region_base_ + offset), len);
  }

  void host_write(std::uint64_t offset, const void* src, std::uint64_t len) {
    check_alive();
    check_bounds(offset, len);
    std::memcpy(reinterpret_cast<void*>(region_base_ + offset), src, len);
  }

  void check_bounds(std::uint64_t offset, std::uint64_t len) {
    if (offset > region_size_ || len > region_size_ - offset) {
      fail(violation_kind::bounds, "guest access [" + std::to_string(offset) + ", +" +
                                       std::to_string(len) + ") outside region of size " +
                                       std::to_string(region_size_));
    }
  }

  std::uintptr_t resolve(std::uint64_t offset, std::uint64_t len) {
    check_alive();
    check_bounds(offset, len);
    return region_base_ + offset;
  }

protected:
  void set_region(std::uintptr_t base, std::uint64_t size) {
    region_base_ = base;
    region_size_ = size;
  }
  void set_dead() { alive_.store(false, std::memory_order_release); }
  void unregister();

private:
  sandbox_id id_ = no_sandbox;
  std::atomic<bool> alive_{true};
  std::uintptr_t region_base_ = 0;
  std::uint64_t region_size_ = 0;
  violation_log log_;
};

// Process-wide registry mapping sandbox ids to live instances, so tainted
// references can be plain values that carry only an origin tag.
class sandbox_registry {
public:
  static sandbox_registry& instance() {
    static sandbox_registry reg;
    return reg;
  }

  sandbox_id add(sandbox_core* core) {
    std::unique_lock lock(mu_);
    sandbox_id id = next_++;
    map_.emplace(id, core);
    return id;
  }

  void remove(sandbox_id id) {
    std::unique_lock lock(mu_);
    map_.erase(id);
  }

  std::size_t live_count() {
    std::shared_lock lock(mu_);
    return map_.size();
  }

  template <typename F>
  void for_each(F&& fn) {
    std::shared_lock lock(mu_);
    for (auto& [id, core] : map_) fn(*core);
  }

  // Never returns null: a missing id reports sandbox-dead.
  sandbox_core& get(sandbox_id id) {
    if (sandbox_core* core = try_get(id)) return *core;
    raise(violation_kind::sandbox_dead,
          "sandbox " + std::to_string(id) + " no longer exists", no_sandbox);
  }

  sandbox_core* try_get(sandbox_id id) {
    std::shared_lock lock(mu_);
    auto it = map_.find(id);
    return it == map_.end() ? nullptr : it->second;
  }

private:
  std::shared_mutex mu_;
  std::unordered_map<sandbox_id, sandbox_core*> map_;
  sandbox_id next_ = 1;
};

inline sandbox_core& core_of(sandbox_id id) { return sandbox_registry::instance().get(id); }

namespace detail {
// Tallies every raise carrying an origin against that sandbox's log.
inline const bool violation_hook = [] {
  set_violation_recorder(+[](violation_kind k, sandbox_id id) noexcept {
    if (sandbox_core* core = sandbox_registry::instance().try_get(id)) {
      core->violations().record(k);
    }
  });
  return true;
}();
}  // namespace detail

inline sandbox_core::sandbox_core() : id_(sandbox_registry::instance().add(this)) {}

inline sandbox_core::~sandbox_core() { unregister(); }

inline void sandbox_core::unregister() {
  if (id_ != no_sandbox) {
    sandbox_registry::instance().remove(id_);
  }
}

}  // namespace sandcage
