// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include <sys/mman.h>
#include <unistd.h>

#include "sandcage/core.hpp"
#include "sandcage/error.hpp"

namespace sandcage {

// Context-free swizzle math over a size-aligned region.  `size` must be a
// power of two; the top bits of an address select the region, the low bits
// are the guest offset.

inline std::uint32_t swizzle_to_guest(std::uintptr_t host_addr, std::uintptr_t base,
                                      std::uint64_t size, sandbox_id origin = no_sandbox) {
  if (host_addr < base || host_addr - base >= size) {
    raise(violation_kind::bounds, "address outside sandbox region", origin);
  }
  return static_cast<std::uint32_t>(host_addr & (size - 1));
}

// Recover a host address from a guest offset given any non-null in-region
// example address of the same sandbox.  High offset bits beyond the region
// size are masked off, so the result is in-region by construction.
inline std::uintptr_t swizzle_to_host(std::uint32_t guest_off, std::uintptr_t example_host_addr,
                                      std::uint64_t size) {
  const std::uintptr_t mask = static_cast<std::uintptr_t>(size - 1);
  const std::uintptr_t base = example_host_addr & ~mask;
  return base | (static_cast<std::uintptr_t>(guest_off) & mask);
}

// A size-aligned guest memory range.  The inner span is mapped read-write
// and zero-initialized; one inaccessible page on each side catches any
// accessor that escapes the mask arithmetic.  `reserve_only` skips the RW
// commit for address-math-only uses (e.g. 4 GiB alignment checks).
class masked_region {
public:
  masked_region() = default;

  masked_region(std::uint64_t size, bool reserve_only = false) {
    if (!is_power_of_two(size) || size < min_region_size) {
      raise(violation_kind::creation,
            "region size must be a power of two >= 2^20, got " + std::to_string(size));
    }
    const std::uint64_t page = static_cast<std::uint64_t>(sysconf(_SC_PAGESIZE));
    // Reserve enough to find a size-aligned base with a guard page before it.
    reserved_len_ = size * 2 + 2 * page;
    void* reserved = ::mmap(nullptr, reserved_len_, PROT_NONE,
                            MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (reserved == MAP_FAILED) {
      raise(violation_kind::creation, "mmap reservation failed for region of size " +
                                          std::to_string(size));
    }
    reserved_ = reserved;
    auto start = reinterpret_cast<std::uintptr_t>(reserved);
    std::uintptr_t aligned = (start + page + size - 1) & ~(size - 1);
    if (aligned < start + page) aligned += size;
    base_ = aligned;
    size_ = size;
    if (!reserve_only) {
      if (::mprotect(reinterpret_cast<void*>(base_), size_, PROT_READ | PROT_WRITE) != 0) {
        ::munmap(reserved_, reserved_len_);
        reserved_ = nullptr;
        raise(violation_kind::creation, "mprotect failed committing region");
      }
      committed_ = true;
    }
  }

  // Adopt an externally mapped size-aligned range (shared-memory backends).
  static masked_region adopt(std::uintptr_t base, std::uint64_t size) {
    masked_region r;
    r.base_ = base;
    r.size_ = size;
    r.committed_ = true;
    return r;
  }

  masked_region(const masked_region&) = delete;
  masked_region& operator=(const masked_region&) = delete;

  masked_region(masked_region&& other) noexcept { *this = std::move(other); }
  masked_region& operator=(masked_region&& other) noexcept {
    if (this != &other) {
      unmap();
      reserved_ = other.reserved_;
      reserved_len_ = other.reserved_len_;
      base_ = other.base_;
      size_ = other.size_;
      committed_ = other.committed_;
      other.reserved_ = nullptr;
      other.base_ = 0;
      other.size_ = 0;
    }
    return *this;
  }

  ~masked_region() { unmap(); }

  std::uintptr_t base() const { return base_; }
  std::uint64_t size() const { return size_; }
  std::uint64_t mask() const { return size_ - 1; }
  bool valid() const { return base_ != 0; }
  std::uint8_t* data() const { return reinterpret_cast<std::uint8_t*>(base_); }

  // Masking accessors: the effective address is always in-region regardless
  // of the offset value.  Out-of-range guest arithmetic wraps in-region, it
  // does not trap.  These are the guest-side semantics; trusted host-side
  // access should bounds-check instead (see contains()).
  std::uintptr_t masked_address(std::uint64_t offset) const {
    return base_ | (offset & mask());
  }

  void masked_store(std::uint64_t offset, const void* src, std::uint32_t width) const {
    const std::uint64_t o = offset & mask();
    if (o + width <= size_) {
      std::memcpy(reinterpret_cast<void*>(base_ + o), src, width);
      return;
    }
    // Access straddles the region end: each byte masks independently.
    for (std::uint32_t i = 0; i < width; i++) {
      *reinterpret_cast<std::uint8_t*>(masked_address(offset + i)) =
          static_cast<const std::uint8_t*>(src)[i];
    }
  }

  void masked_load(std::uint64_t offset, void* dst, std::uint32_t width) const {
    const std::uint64_t o = offset & mask();
    if (o + width <= size_) {
      std::memcpy(dst, reinterpret_cast<const void*>(base_ + o), width);
      return;
    }
    for (std::uint32_t i = 0; i < width; i++) {
      static_cast<std::uint8_t*>(dst)[i] =
          *reinterpret_cast<std::uint8_t*>(masked_address(offset + i));
    }
  }

  bool contains(std::uint64_t offset, std::uint64_t len) const {
    return offset <= size_ && len <= size_ - offset;
  }

private:
  void unmap() {
    if (reserved_) {
      ::munmap(reserved_, reserved_len_);
      reserved_ = nullptr;
    }
    base_ = 0;
    size_ = 0;
  }

  void* reserved_ = nullptr;
  std::uint64_t reserved_len_ = 0;
  std::uintptr_t base_ = 0;
  std::uint64_t size_ = 0;
  bool committed_ = false;
};

}  // namespace sandcage
