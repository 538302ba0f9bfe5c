// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "sandcage/error.hpp"
#include "sandcage/sandbox.hpp"

namespace sandcage {

// Isolation granularity unit: one sandbox never serves two different keys.
struct sandbox_key {
  std::string library;
  std::string origin;
  std::string content_type;

  friend bool operator==(const sandbox_key&, const sandbox_key&) = default;
};

enum class content_class { image, decompression, media };

inline content_class classify_content(std::string_view content_type) {
  if (content_type.starts_with("image/")) return content_class::image;
  if (content_type.starts_with("audio/") || content_type.starts_with("video/")) {
    return content_class::media;
  }
  // application/* and anything else falls in the decompression class.
  return content_class::decompression;
}

struct pool_config {
  std::uint32_t image_threshold = 10;
  std::uint32_t decompression_threshold = 50;
  // media class threshold is always 0: destroy immediately after use
  sandbox_config sandbox;

  std::uint32_t threshold_for(content_class c) const {
    switch (c) {
      case content_class::image: return image_threshold;
      case content_class::decompression: return decompression_threshold;
      case content_class::media: return 0;
    }
    return 0;
  }

  // Flat key=value text: threshold.image, threshold.decompression, backend,
  // region_size.  '#' starts a comment.
  static pool_config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
      raise(violation_kind::usage, "cannot open pool config '" + path + "'");
    }
    pool_config cfg;
    std::string line;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        raise(violation_kind::usage, "pool config line is not key=value: '" + line + "'");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key == "threshold.image") {
        cfg.image_threshold = static_cast<std::uint32_t>(std::stoul(value));
      } else if (key == "threshold.decompression") {
        cfg.decompression_threshold = static_cast<std::uint32_t>(std::stoul(value));
      } else if (key == "backend") {
        cfg.sandbox.backend = parse_backend(value);
      } else if (key == "region_size") {
        cfg.sandbox.region_size = std::stoull(value);
      } else {
        raise(violation_kind::usage, "unknown pool config key '" + key + "'");
      }
    }
    return cfg;
  }

  static backend_kind parse_backend(std::string_view name) {
    if (name == "null" || name == "null_direct") return backend_kind::null_direct;
    if (name == "null_indirect") return backend_kind::null_indirect;
    if (name == "emusfi") return backend_kind::emusfi;
    if (name == "process") return backend_kind::process;
    raise(violation_kind::usage, "unknown backend '" + std::string(name) + "'");
  }
};

// Keyed cache of live sandboxes.  Acquire creates on miss and reuses idle
// instances of the same key; release returns the instance and lazily evicts
// least-recently-used idle instances beyond the per-class threshold.  Media
// sandboxes are destroyed immediately on release.
class sandbox_pool {
public:
  explicit sandbox_pool(pool_config cfg = {}) : cfg_(std::move(cfg)) {}

  class lease {
  public:
    lease() = default;
    lease(sandbox_pool* pool, std::size_t slot, std::shared_ptr<sandbox> sb)
        : pool_(pool), slot_(slot), sb_(std::move(sb)) {}
    lease(const lease&) = delete;
    lease& operator=(const lease&) = delete;
    lease(lease&& o) noexcept { *this = std::move(o); }
    lease& operator=(lease&& o) noexcept {
      if (this != &o) {
        release();
        pool_ = o.pool_;
        slot_ = o.slot_;
        sb_ = std::move(o.sb_);
        o.pool_ = nullptr;
      }
      return *this;
    }
    ~lease() { release(); }

    sandbox& get() { return *sb_; }
    sandbox* operator->() { return sb_.get(); }
    bool valid() const { return pool_ != nullptr; }

    // Latency-sensitive work maps to SPIN, bulk work to EVENT; a no-op on
    // in-process backends.
    void sync_hint(work_hint hint) {
      if (sb_ && sb_->backend() == backend_kind::process) {
        sb_->set_sync_mode(hint == work_hint::latency ? sync_mode::spin : sync_mode::event);
      }
    }

    void release() {
      if (pool_) {
        pool_->release_slot(slot_);
        pool_ = nullptr;
        sb_.reset();
      }
    }

  private:
    sandbox_pool* pool_ = nullptr;
    std::size_t slot_ = 0;
    std::shared_ptr<sandbox> sb_;
  };

  lease acquire(const sandbox_key& key) {
    std::unique_lock lock(mu_);
    for (std::size_t i = 0; i < entries_.size(); i++) {
      auto& e = entries_[i];
      if (e.sb && !e.leased && e.key == key) {
        e.leased = true;
        return lease(this, i, e.sb);
      }
    }
    lock.unlock();
    // Creating a sandbox on demand happens outside the pool lock.
    auto sb = sandbox::create(cfg_.sandbox);
    lock.lock();
    entry e;
    e.key = key;
    e.cls = classify_content(key.content_type);
    e.sb = std::move(sb);
    e.leased = true;
    for (std::size_t i = 0; i < entries_.size(); i++) {
      if (!entries_[i].sb) {
        entries_[i] = std::move(e);
        return lease(this, i, entries_[i].sb);
      }
    }
    entries_.push_back(std::move(e));
    return lease(this, entries_.size() - 1, entries_.back().sb);
  }

  std::size_t live_count() {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (auto& e : entries_) n += e.sb ? 1 : 0;
    return n;
  }

  std::size_t idle_count(content_class c) {
    std::lock_guard lock(mu_);
    return idle_count_locked(c);
  }

  std::size_t leased_count() {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (auto& e : entries_) n += (e.sb && e.leased) ? 1 : 0;
    return n;
  }

  const pool_config& config() const { return cfg_; }

private:
  friend class lease;

  struct entry {
    sandbox_key key;
    content_class cls = content_class::decompression;
    std::shared_ptr<sandbox> sb;
    bool leased = false;
    std::uint64_t last_use = 0;
  };

  std::size_t idle_count_locked(content_class c) {
    std::size_t n = 0;
    for (auto& e : entries_) n += (e.sb && !e.leased && e.cls == c) ? 1 : 0;
    return n;
  }

  void release_slot(std::size_t slot) {
    std::vector<std::shared_ptr<sandbox>> doomed;
    {
      std::lock_guard lock(mu_);
      auto& e = entries_[slot];
      e.leased = false;
      e.last_use = ++tick_;
      if (e.cls == content_class::media) {
        doomed.push_back(std::move(e.sb));
        e = entry{};
      } else {
        const std::uint32_t threshold = cfg_.threshold_for(e.cls);
        while (idle_count_locked(e.cls) > threshold) {
          // Evict the least recently used idle instance of this class.
          std::size_t victim = entries_.size();
          std::uint64_t oldest = UINT64_MAX;
          for (std::size_t i = 0; i < entries_.size(); i++) {
            auto& v = entries_[i];
            if (v.sb && !v.leased && v.cls == e.cls && v.last_use < oldest) {
              oldest = v.last_use;
              victim = i;
            }
          }
          if (victim == entries_.size()) break;
          doomed.push_back(std::move(entries_[victim].sb));
          entries_[victim] = entry{};
        }
      }
    }
    // Destruction (region unmap, worker teardown) happens off the lock.
    for (auto& sb : doomed) sb->destroy();
  }

  pool_config cfg_;
  std::mutex mu_;
  std::vector<entry> entries_;
  std::uint64_t tick_ = 0;
};

}  // namespace sandcage
