// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>

#include "sandcage/core.hpp"

namespace sandcage::audit {

using sink_fn = std::function<void(std::string_view line)>;

namespace detail {
struct state {
  std::mutex mu;
  sink_fn sink;
  std::atomic<bool> enabled;
  std::atomic<std::uint64_t> count{0};

  // Off by default; CI turns it on through the environment.
  state() : enabled(std::getenv("SANDCAGE_AUDIT") != nullptr) {}
};
inline state& instance() {
  static state s;
  return s;
}
}  // namespace detail

inline void enable(bool on) {
  detail::instance().enabled.store(on, std::memory_order_relaxed);
}
inline bool enabled() {
  return detail::instance().enabled.load(std::memory_order_relaxed);
}
inline void set_sink(sink_fn sink) {
  auto& s = detail::instance();
  std::lock_guard lock(s.mu);
  s.sink = std::move(sink);
}
inline std::uint64_t unsafe_count() {
  return detail::instance().count.load(std::memory_order_relaxed);
}

// One record per unsafe_unverified call while auditing is on.
inline void record_unsafe(sandbox_id origin, std::string_view site) {
  auto& s = detail::instance();
  if (!s.enabled.load(std::memory_order_relaxed)) return;
  s.count.fetch_add(1, std::memory_order_relaxed);
  std::lock_guard lock(s.mu);
  if (!s.sink) return;
  std::string line = "UNSAFE " + std::to_string(origin) + " ";
  line.append(site.empty() ? std::string_view("<unlabeled>") : site);
  s.sink(line);
}

}  // namespace sandcage::audit
