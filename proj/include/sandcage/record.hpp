// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <concepts>
#include <cstdint>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sandcage/error.hpp"

namespace sandcage {

enum class field_kind : std::uint32_t {
  u8,
  u16,
  u32,
  u64,
  i8,
  i16,
  i32,
  i64,
  f32,
  f64,
  ref,  // 32-bit guest offset
};

constexpr std::uint32_t field_kind_size(field_kind k) {
  switch (k) {
    case field_kind::u8:
    case field_kind::i8:
      return 1;
    case field_kind::u16:
    case field_kind::i16:
      return 2;
    case field_kind::u32:
    case field_kind::i32:
    case field_kind::f32:
    case field_kind::ref:
      return 4;
    case field_kind::u64:
    case field_kind::i64:
    case field_kind::f64:
      return 8;
  }
  return 0;
}

struct field_desc {
  std::string name;
  std::uint32_t offset = 0;
  field_kind kind = field_kind::u32;
  bool freezable = false;  // host may only read through freeze
};

// Guest-model layout of a shared record.  Registration performs a
// consistency audit: strictly increasing non-overlapping offsets, every
// field inside the total size.
class record_layout {
public:
  record_layout(std::string name, std::uint32_t total_size, std::vector<field_desc> fields)
      : name_(std::move(name)), size_(total_size), fields_(std::move(fields)) {
    std::uint32_t watermark = 0;
    for (const auto& f : fields_) {
      if (f.offset < watermark) {
        raise(violation_kind::usage, "record '" + name_ + "': field '" + f.name +
                                         "' offsets must be strictly increasing");
      }
      const std::uint32_t fsz = field_kind_size(f.kind);
      if (f.offset % fsz != 0) {
        raise(violation_kind::usage, "record '" + name_ + "': field '" + f.name +
                                         "' is not naturally aligned");
      }
      if (f.offset + fsz > size_ || f.offset + fsz < f.offset) {
        raise(violation_kind::usage, "record '" + name_ + "': field '" + f.name +
                                         "' does not fit in record of size " +
                                         std::to_string(size_));
      }
      watermark = f.offset + fsz;
      by_name_.emplace(f.name, &f - fields_.data());
    }
  }

  const std::string& name() const { return name_; }
  std::uint32_t size() const { return size_; }
  const std::vector<field_desc>& fields() const { return fields_; }

  const field_desc& field(std::string_view fname, sandbox_id origin = no_sandbox) const {
    auto it = by_name_.find(std::string(fname));
    if (it == by_name_.end()) {
      raise(violation_kind::unknown_field,
            "record '" + name_ + "' has no field '" + std::string(fname) + "'", origin);
    }
    return fields_[it->second];
  }

private:
  std::string name_;
  std::uint32_t size_;
  std::vector<field_desc> fields_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

class record_registry {
public:
  static record_registry& instance() {
    static record_registry reg;
    return reg;
  }

  // Idempotent for identical layouts; conflicting re-registration is a host
  // bug and rejected.
  const record_layout& register_record(record_layout layout) {
    std::unique_lock lock(mu_);
    auto it = map_.find(layout.name());
    if (it != map_.end()) {
      const record_layout& existing = *it->second;
      if (existing.size() != layout.size() ||
          existing.fields().size() != layout.fields().size()) {
        raise(violation_kind::usage,
              "conflicting re-registration of record '" + layout.name() + "'");
      }
      return existing;
    }
    auto owned = std::make_unique<record_layout>(std::move(layout));
    const record_layout& ref = *owned;
    map_.emplace(ref.name(), std::move(owned));
    return ref;
  }

  const record_layout& get(std::string_view name, sandbox_id origin = no_sandbox) {
    std::shared_lock lock(mu_);
    auto it = map_.find(std::string(name));
    if (it == map_.end()) {
      raise(violation_kind::unknown_record, "record '" + std::string(name) + "' is not registered",
            origin);
    }
    return *it->second;
  }

  bool is_registered(std::string_view name) {
    std::shared_lock lock(mu_);
    return map_.count(std::string(name)) != 0;
  }

private:
  std::shared_mutex mu_;
  std::unordered_map<std::string, std::unique_ptr<record_layout>> map_;
};

// Tag types describing a guest record statically carry the record name; the
// layout itself always comes from the registry.
template <typename T>
concept guest_record_tag = requires {
  { T::record_name } -> std::convertible_to<const char*>;
};

}  // namespace sandcage
