// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "sandcage/audit.hpp"
#include "sandcage/error.hpp"
#include "sandcage/record.hpp"
#include "sandcage/runtime_core.hpp"
#include "sandcage/taint.hpp"

namespace sandcage {

template <typename V>
class guest_ref;
template <typename V>
class tainted_volatile;
template <typename V>
class freezable_cell;

// Raw 32-bit guest offset as an opaque strong type: it does not convert to
// an integer or pointer, so it cannot be dereferenced or used in host
// address arithmetic by accident.
class guest_offset {
public:
  constexpr explicit guest_offset(std::uint32_t v) : value_(v) {}
  constexpr std::uint32_t value() const { return value_; }
  friend constexpr bool operator==(guest_offset, guest_offset) = default;

private:
  std::uint32_t value_;
};

namespace detail {

template <typename T>
struct is_guest_ref : std::false_type {};
template <typename V>
struct is_guest_ref<guest_ref<V>> : std::true_type {};
template <typename T>
inline constexpr bool is_guest_ref_v = is_guest_ref<std::remove_cvref_t<T>>::value;

template <typename V>
inline constexpr bool guest_scalar_v =
    std::is_arithmetic_v<V> && !std::is_same_v<V, bool> && (sizeof(V) <= 8);

// Atomic single-unit access for freeze: loads and stores the value's bytes
// through an integer of identical width.
template <typename V>
V atomic_load_unit(std::uintptr_t addr) {
  static_assert(sizeof(V) <= 8);
  if constexpr (sizeof(V) == 8) {
    auto bits = std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(addr))
                    .load(std::memory_order_acquire);
    return std::bit_cast<V>(bits);
  } else if constexpr (sizeof(V) == 4) {
    auto bits = std::atomic_ref<std::uint32_t>(*reinterpret_cast<std::uint32_t*>(addr))
                    .load(std::memory_order_acquire);
    return std::bit_cast<V>(bits);
  } else if constexpr (sizeof(V) == 2) {
    auto bits = std::atomic_ref<std::uint16_t>(*reinterpret_cast<std::uint16_t*>(addr))
                    .load(std::memory_order_acquire);
    return std::bit_cast<V>(bits);
  } else {
    auto bits = std::atomic_ref<std::uint8_t>(*reinterpret_cast<std::uint8_t*>(addr))
                    .load(std::memory_order_acquire);
    return std::bit_cast<V>(bits);
  }
}

template <typename V>
void atomic_store_unit(std::uintptr_t addr, V value) {
  static_assert(sizeof(V) <= 8);
  if constexpr (sizeof(V) == 8) {
    std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(addr))
        .store(std::bit_cast<std::uint64_t>(value), std::memory_order_release);
  } else if constexpr (sizeof(V) == 4) {
    std::atomic_ref<std::uint32_t>(*reinterpret_cast<std::uint32_t*>(addr))
        .store(std::bit_cast<std::uint32_t>(value), std::memory_order_release);
  } else if constexpr (sizeof(V) == 2) {
    std::atomic_ref<std::uint16_t>(*reinterpret_cast<std::uint16_t*>(addr))
        .store(std::bit_cast<std::uint16_t>(value), std::memory_order_release);
  } else {
    std::atomic_ref<std::uint8_t>(*reinterpret_cast<std::uint8_t*>(addr))
        .store(std::bit_cast<std::uint8_t>(value), std::memory_order_release);
  }
}

}  // namespace detail

// Transient host view of a guest-resident value, produced by dereference,
// indexing or field access.  Reading copies the value out as tainted;
// writing stores into guest memory.  Views are bounds-checked when produced
// and again on every access, and must stay within the invocation context
// that created them.
template <typename V>
class tainted_volatile {
  static_assert(detail::guest_scalar_v<V>, "views wrap fixed-width guest scalars");

public:
  tainted<V> read() const {
    V out;
    core_of(origin_).host_read(offset_, &out, sizeof(V));
    return tainted<V>(out, origin_);
  }

  void write(V value) { core_of(origin_).host_write(offset_, &value, sizeof(V)); }

  void write(const tainted<V>& value) {
    // Guest-origin data may flow back into the sandbox freely.
    write(value.raw_payload());
  }

  template <typename T>
  void write(T*) = delete;  // host pointers never flow into guest memory

  sandbox_id origin() const { return origin_; }
  guest_offset offset() const { return guest_offset(offset_); }

private:
  template <typename>
  friend class guest_ref;
  template <typename>
  friend class tainted_volatile;

  tainted_volatile(sandbox_id origin, std::uint32_t offset) : origin_(origin), offset_(offset) {
    core_of(origin_).check_bounds(offset_, sizeof(V));
  }

  sandbox_id origin_;
  std::uint32_t offset_;
};

// View specialization for reference-kinded fields: the guest stores a
// 32-bit offset, never a host address.  Reads hand back an unresolved
// guest_ref; any out-of-region value surfaces as bounds-violation when the
// ref is resolved, not here.
template <typename U>
class tainted_volatile<guest_ref<U>> {
public:
  guest_ref<U> read() const {
    std::uint32_t stored;
    core_of(origin_).host_read(offset_, &stored, sizeof(stored));
    return guest_ref<U>(stored, origin_);
  }

  void write(const guest_ref<U>& ref) {
    if (ref.origin() != origin_) {
      core_of(origin_).fail(violation_kind::taint_mix,
                            "storing a reference from another sandbox");
    }
    const std::uint32_t stored = ref.offset().value();
    core_of(origin_).host_write(offset_, &stored, sizeof(stored));
  }

  template <typename T>
  void write(T*) = delete;  // host pointers never flow into guest memory

  sandbox_id origin() const { return origin_; }

private:
  template <typename>
  friend class guest_ref;

  tainted_volatile(sandbox_id origin, std::uint32_t offset) : origin_(origin), offset_(offset) {
    core_of(origin_).check_bounds(offset_, 4);
  }

  sandbox_id origin_;
  std::uint32_t offset_;
};

// Tainted reference to guest memory: a 32-bit offset plus the origin tag.
// It never converts to a raw host address; every access path resolves
// through the runtime's bounds checks.
template <typename V>
class guest_ref {
public:
  using target_type = V;

  guest_ref(std::uint32_t offset, sandbox_id origin) : offset_(offset), origin_(origin) {}

  sandbox_id origin() const { return origin_; }
  guest_offset offset() const { return guest_offset(offset_); }
  bool is_null() const { return offset_ == 0; }

  // Dereference / element access for scalar targets.
  tainted_volatile<V> deref() const
    requires detail::guest_scalar_v<V>
  {
    return tainted_volatile<V>(origin_, offset_);
  }

  tainted_volatile<V> index(std::uint64_t i) const
    requires detail::guest_scalar_v<V>
  {
    auto& core = core_of(origin_);
    if (i > (std::numeric_limits<std::uint64_t>::max() - offset_) / sizeof(V)) {
      core.fail(violation_kind::bounds, "index overflows the offset computation");
    }
    const std::uint64_t off = offset_ + i * sizeof(V);
    core.check_bounds(off, sizeof(V));
    return tainted_volatile<V>(origin_, static_cast<std::uint32_t>(off));
  }

  template <typename I>
  tainted_volatile<V> index(const tainted<I>& i) const
    requires(detail::guest_scalar_v<V> && std::is_integral_v<I>)
  {
    // Only bounds matter for a tainted index; no validation is required.
    const auto raw = i.raw_payload();
    if constexpr (std::is_signed_v<I>) {
      if (raw < 0) {
        core_of(origin_).fail(violation_kind::bounds, "negative tainted index");
      }
    }
    return index(static_cast<std::uint64_t>(raw));
  }

  // Typed field access for registered records.  The caller names the static
  // type; the registry checks it against the registered kind.
  template <typename T>
  tainted_volatile<T> field(std::string_view name) const
    requires guest_record_tag<V>
  {
    const field_desc& f = lookup_field(name);
    require_kind<T>(f);
    if (f.freezable) {
      core_of(origin_).fail(violation_kind::freeze_state,
                            "field '" + std::string(name) +
                                "' is freezable; read it through freezable_field");
    }
    return tainted_volatile<T>(origin_, field_offset(f));
  }

  // Reference-kinded fields come out as byte refs to be resolved later.
  tainted_volatile<guest_ref<std::uint8_t>> ref_field(std::string_view name) const
    requires guest_record_tag<V>
  {
    const field_desc& f = lookup_field(name);
    if (f.kind != field_kind::ref) {
      core_of(origin_).fail(violation_kind::field_kind_mismatch,
                            "field '" + std::string(name) + "' is not reference-kinded");
    }
    return tainted_volatile<guest_ref<std::uint8_t>>(origin_, field_offset(f));
  }

  template <typename T>
  freezable_cell<T> freezable_field(std::string_view name) const
    requires guest_record_tag<V>
  {
    const field_desc& f = lookup_field(name);
    require_kind<T>(f);
    if (!f.freezable) {
      core_of(origin_).fail(violation_kind::freeze_state,
                            "field '" + std::string(name) + "' is not marked freezable");
    }
    return freezable_cell<T>(guest_ref<T>(field_offset(f), origin_));
  }

  // Escape hatch: raw byte view into the region for zero-copy handoff.
  // Bounds are still enforced; only content validation is skipped.
  std::span<const std::uint8_t> unsafe_unverified_span(std::uint64_t count,
                                                       std::string_view site = {}) const {
    auto& core = core_of(origin_);
    const std::uint32_t elem = element_size();
    if (count > std::numeric_limits<std::uint64_t>::max() / elem) {
      core.fail(violation_kind::bounds, "span length overflows");
    }
    const std::uint64_t len = count * elem;
    const std::uintptr_t addr = core.resolve(offset_, len);
    audit::record_unsafe(origin_, site);
    return {reinterpret_cast<const std::uint8_t*>(addr), static_cast<std::size_t>(len)};
  }

  std::uint32_t element_size() const {
    if constexpr (guest_record_tag<V>) {
      return record_registry::instance().get(V::record_name, origin_).size();
    } else {
      return sizeof(V);
    }
  }

  friend bool operator==(const guest_ref& a, const guest_ref& b) {
    return a.offset_ == b.offset_ && a.origin_ == b.origin_;
  }

private:
  const field_desc& lookup_field(std::string_view name) const
    requires guest_record_tag<V>
  {
    const record_layout& layout = record_registry::instance().get(V::record_name, origin_);
    return layout.field(name, origin_);
  }

  std::uint32_t field_offset(const field_desc& f) const {
    const std::uint64_t off = static_cast<std::uint64_t>(offset_) + f.offset;
    core_of(origin_).check_bounds(off, field_kind_size(f.kind));
    return static_cast<std::uint32_t>(off);
  }

  template <typename T>
  void require_kind(const field_desc& f) const {
    const bool ok = (field_kind_size(f.kind) == sizeof(T)) &&
                    ((std::is_floating_point_v<T> &&
                      (f.kind == field_kind::f32 || f.kind == field_kind::f64)) ||
                     (std::is_integral_v<T> && f.kind != field_kind::f32 &&
                      f.kind != field_kind::f64 && f.kind != field_kind::ref));
    if (!ok) {
      core_of(origin_).fail(violation_kind::field_kind_mismatch,
                            "field '" + f.name + "' kind does not match requested type");
    }
  }

  std::uint32_t offset_;
  sandbox_id origin_;
};

// Guest-resident scalar with a host-side frozen copy.  While frozen, every
// read returns the host copy and checks the live guest value against it;
// divergence is a tamper violation.  The host-consumed value is always the
// frozen copy, so a racing guest write can never influence it.
template <typename V>
class freezable_cell {
  static_assert(detail::guest_scalar_v<V> && sizeof(V) <= 8,
                "freeze covers scalar fields up to 8 bytes, compared as one unit");

public:
  explicit freezable_cell(guest_ref<V> ref) : ref_(ref) {}

  bool frozen() const { return frozen_; }

  void freeze() {
    if (frozen_) {
      core().fail(violation_kind::freeze_state, "freeze on an already-frozen cell");
    }
    copy_ = detail::atomic_load_unit<V>(resolve());
    frozen_ = true;
  }

  tainted<V> frozen_read() {
    if (!frozen_) {
      core().fail(violation_kind::read_while_unfrozen, "read of an unfrozen freezable cell");
    }
    const V live = detail::atomic_load_unit<V>(resolve());
    if (std::bit_cast<std::uint64_t>(widen(live)) != std::bit_cast<std::uint64_t>(widen(copy_))) {
      core().fail(violation_kind::tamper, "guest mutated a frozen value");
    }
    return tainted<V>(copy_, ref_.origin());
  }

  // The pinned host copy, with no liveness comparison.  This is the value
  // every frozen_read hands out; reading it directly is always safe.
  V pinned_value() {
    if (!frozen_) {
      core().fail(violation_kind::read_while_unfrozen, "no pinned value while unfrozen");
    }
    return copy_;
  }

  // Host writes are allowed while frozen and update both sides.
  void write(V value) {
    detail::atomic_store_unit<V>(resolve(), value);
    if (frozen_) copy_ = value;
  }
  void write(const tainted<V>& value) { write(value.raw_payload()); }

  void unfreeze() { frozen_ = false; }  // re-freezing later is allowed

private:
  static std::uint64_t widen(V v) {
    std::uint64_t out = 0;
    std::memcpy(&out, &v, sizeof(V));
    return out;
  }

  sandbox_core& core() { return core_of(ref_.origin()); }

  // The compare-as-one-unit guarantee needs a naturally aligned address.
  std::uintptr_t resolve() {
    auto& c = core();
    const std::uintptr_t addr = c.resolve(ref_.offset().value(), sizeof(V));
    if (addr % sizeof(V) != 0) {
      c.fail(violation_kind::usage, "freezable cell is not naturally aligned");
    }
    return addr;
  }

  guest_ref<V> ref_;
  V copy_{};
  bool frozen_ = false;
};

// --- copy-then-check validators -------------------------------------------
//
// The guest value is copied into host memory BEFORE the check runs, so a
// concurrent guest write cannot affect the value the check saw or the value
// returned.

template <typename V, typename F>
auto copy_and_verify_value(const guest_ref<V>& ref, F&& check)
  requires detail::guest_scalar_v<V>
{
  V snapshot;
  core_of(ref.origin()).host_read(ref.offset().value(), &snapshot, sizeof(V));
  return tainted<V>(snapshot, ref.origin()).verify(std::forward<F>(check));
}

template <typename V, typename F>
std::vector<V> copy_and_verify_array(const guest_ref<V>& ref, std::uint64_t count, F&& check)
  requires detail::guest_scalar_v<V>
{
  auto& core = core_of(ref.origin());
  const std::uint64_t bytes = count * sizeof(V);
  if (count != 0 && bytes / count != sizeof(V)) {
    core.fail(violation_kind::bounds, "array length overflows");
  }
  std::vector<V> out(count);
  core.host_read(ref.offset().value(), out.data(), bytes);
  if (!check(std::span<const V>(out))) {
    core.fail(violation_kind::validation, "array contents rejected by validator");
  }
  return out;
}

// Copies at most max_len bytes and requires a NUL terminator inside the
// window; never reads past the region end.
template <typename F>
std::string copy_and_verify_string(const guest_ref<std::uint8_t>& ref, std::uint64_t max_len,
                                   F&& check) {
  auto& core = core_of(ref.origin());
  const std::uint64_t off = ref.offset().value();
  if (off >= core.region_size()) {
    core.fail(violation_kind::bounds, "string offset outside region");
  }
  const std::uint64_t window = std::min<std::uint64_t>(max_len, core.region_size() - off);
  std::string buf(static_cast<std::size_t>(window), '\0');
  core.host_read(off, buf.data(), window);
  const auto nul = buf.find('\0');
  if (nul == std::string::npos) {
    core.fail(violation_kind::unterminated_string,
              "no terminator within " + std::to_string(max_len) + " bytes");
  }
  buf.resize(nul);
  if (!check(std::string_view(buf))) {
    core.fail(violation_kind::validation, "string rejected by validator");
  }
  return buf;
}

// Bulk trusted write into guest memory (input feeding and test setup).
inline void write_bytes(const guest_ref<std::uint8_t>& ref, std::span<const std::uint8_t> bytes) {
  core_of(ref.origin()).host_write(ref.offset().value(), bytes.data(), bytes.size());
}

}  // namespace sandcage
