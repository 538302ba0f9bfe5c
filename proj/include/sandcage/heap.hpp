// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>

#include "sandcage/core.hpp"
#include "sandcage/error.hpp"

namespace sandcage {

// Bump-plus-free-list allocator over a guest heap span [heap_base, limit).
// All bookkeeping lives outside the region, so a guest scribbling over its
// own heap cannot corrupt allocator state.  Offsets handed out are always
// in-span and aligned as requested.
class region_heap {
public:
  region_heap() = default;
  region_heap(std::uint32_t heap_base, std::uint64_t limit)
      : heap_base_(heap_base), limit_(limit), bump_(heap_base) {}

  // Returns the allocated offset, or raises alloc-failure on exhaustion.
  std::uint32_t allocate(std::uint32_t size, std::uint32_t align, sandbox_id origin = no_sandbox) {
    if (size == 0) size = 1;
    if (align == 0 || (align & (align - 1)) != 0) {
      raise(violation_kind::usage, "alignment must be a power of two", origin);
    }
    // First fit over the free list.
    for (auto it = free_.begin(); it != free_.end(); ++it) {
      const std::uint64_t start = it->first;
      const std::uint64_t len = it->second;
      const std::uint64_t aligned = (start + align - 1) & ~static_cast<std::uint64_t>(align - 1);
      if (aligned + size <= start + len) {
        const std::uint64_t lead = aligned - start;
        const std::uint64_t tail = (start + len) - (aligned + size);
        free_.erase(it);
        if (lead) free_.emplace(start, lead);
        if (tail) free_.emplace(aligned + size, tail);
        live_.emplace(static_cast<std::uint32_t>(aligned), size);
        total_live_ += size;
        return static_cast<std::uint32_t>(aligned);
      }
    }
    const std::uint64_t aligned = (bump_ + align - 1) & ~static_cast<std::uint64_t>(align - 1);
    if (aligned + size > limit_) {
      raise(violation_kind::alloc_failure,
            "guest heap exhausted (" + std::to_string(size) + " bytes requested)", origin);
    }
    if (aligned > bump_) free_.emplace(bump_, aligned - bump_);
    bump_ = aligned + size;
    live_.emplace(static_cast<std::uint32_t>(aligned), size);
    total_live_ += size;
    return static_cast<std::uint32_t>(aligned);
  }

  void deallocate(std::uint32_t offset, sandbox_id origin = no_sandbox) {
    auto it = live_.find(offset);
    if (it == live_.end()) {
      raise(violation_kind::invalid_free,
            "free of offset 0x" + to_hex(offset) + " that is not a live allocation", origin);
    }
    const std::uint32_t size = it->second;
    live_.erase(it);
    total_live_ -= size;
    insert_free(offset, size);
  }

  bool is_live(std::uint32_t offset) const { return live_.count(offset) != 0; }
  std::uint64_t live_bytes() const { return total_live_; }
  std::uint64_t high_water() const { return bump_; }
  std::uint32_t heap_base() const { return heap_base_; }

  // Size of a live block, or 0.
  std::uint32_t live_size(std::uint32_t offset) const {
    auto it = live_.find(offset);
    return it == live_.end() ? 0 : it->second;
  }

private:
  void insert_free(std::uint64_t start, std::uint64_t len) {
    // Coalesce with neighbours.
    auto next = free_.lower_bound(start);
    if (next != free_.end() && start + len == next->first) {
      len += next->second;
      next = free_.erase(next);
    }
    if (next != free_.begin()) {
      auto prev = std::prev(next);
      if (prev->first + prev->second == start) {
        start = prev->first;
        len += prev->second;
        free_.erase(prev);
      }
    }
    if (start + len == bump_) {
      bump_ = start;  // give straight back to the bump frontier
    } else {
      free_.emplace(start, len);
    }
  }

  static std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    do {
      out.insert(out.begin(), digits[v & 0xf]);
      v >>= 4;
    } while (v);
    return out;
  }

  std::uint32_t heap_base_ = 0;
  std::uint64_t limit_ = 0;
  std::uint64_t bump_ = 0;
  std::uint64_t total_live_ = 0;
  std::map<std::uint64_t, std::uint64_t> free_;            // offset -> length
  std::unordered_map<std::uint32_t, std::uint32_t> live_;  // offset -> size
};

}  // namespace sandcage
