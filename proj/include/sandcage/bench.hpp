// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "sandcage/sandcage.hpp"

namespace sandcage::bench {

struct stats {
  std::vector<double> samples_ns;
  double p50 = 0;
  double p90 = 0;
  double p99 = 0;

  static stats from_samples(std::vector<double> samples) {
    stats s;
    s.samples_ns = std::move(samples);
    if (s.samples_ns.empty()) return s;
    std::vector<double> sorted = s.samples_ns;
    std::sort(sorted.begin(), sorted.end());
    auto pct = [&](double q) {
      const auto idx = static_cast<std::size_t>(q * (sorted.size() - 1));
      return sorted[idx];
    };
    s.p50 = pct(0.50);
    s.p90 = pct(0.90);
    s.p99 = pct(0.99);
    return s;
  }
};

inline std::uint64_t default_region_size_from_env() {
  if (const char* env = std::getenv("SANDCAGE_REGION_SIZE")) {
    const auto v = std::strtoull(env, nullptr, 10);
    if (v != 0) return v;
  }
  return default_region_size;
}

// Empty-call round-trip latency.  Fast in-process backends are timed in
// batches; the per-call figure is the batch time divided by the batch size.
inline stats transfer_latency(backend_kind backend, sync_mode mode, std::uint64_t iters,
                              std::uint64_t warmup = 1000, std::uint32_t batch = 0,
                              std::uint64_t region_size = 0, std::uint32_t spin_pause = 4) {
  sandbox_config cfg;
  cfg.backend = backend;
  cfg.region_size = region_size ? region_size : default_region_size_from_env();
  cfg.initial_sync = mode;
  cfg.spin_pause_per_yield = spin_pause;
  auto s = sandbox::create(cfg);
  const auto ping = s->lookup("rli_ping");

  if (batch == 0) {
    batch = (backend == backend_kind::process) ? 1 : 64;
  }
  for (std::uint64_t i = 0; i < warmup; i++) {
    s->invoke<tainted<std::uint32_t>>(ping);
  }
  const std::uint64_t rounds = std::max<std::uint64_t>(1, iters / batch);
  std::vector<double> samples;
  samples.reserve(rounds);
  for (std::uint64_t r = 0; r < rounds; r++) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint32_t b = 0; b < batch; b++) {
      s->invoke<tainted<std::uint32_t>>(ping);
    }
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count() / batch);
  }
  return stats::from_samples(std::move(samples));
}

struct latency_suite {
  stats null_backend;
  stats emusfi;
  stats process_spin;
  stats process_event;

  bool ordering_holds() const {
    return null_backend.p50 < process_spin.p50 && process_spin.p50 < process_event.p50;
  }
  double event_spin_ratio() const {
    return process_spin.p50 > 0 ? process_event.p50 / process_spin.p50 : 0;
  }
  double emusfi_null_ratio() const {
    return null_backend.p50 > 0 ? emusfi.p50 / null_backend.p50 : 0;
  }
};

inline latency_suite transfer_latency_ordering(std::uint64_t iters,
                                               std::uint64_t region_size = 1u << 20) {
  latency_suite suite;
  suite.null_backend =
      transfer_latency(backend_kind::null_direct, sync_mode::spin, iters, 1000, 0, region_size);
  suite.emusfi =
      transfer_latency(backend_kind::emusfi, sync_mode::spin, iters, 1000, 0, region_size);
  suite.process_spin =
      transfer_latency(backend_kind::process, sync_mode::spin, iters, 1000, 0, region_size);
  suite.process_event =
      transfer_latency(backend_kind::process, sync_mode::event, iters, 1000, 0, region_size);
  return suite;
}

// Sandbox creation cost (creation only; destruction is outside the timer).
inline stats creation_cost(backend_kind backend, std::uint32_t count,
                           std::uint64_t region_size = 0) {
  sandbox_config cfg;
  cfg.backend = backend;
  cfg.region_size = region_size ? region_size : default_region_size_from_env();
  std::vector<double> samples;
  samples.reserve(count);
  for (std::uint32_t i = 0; i < count; i++) {
    const auto t0 = std::chrono::steady_clock::now();
    auto s = sandbox::create(cfg);
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    s->destroy();
  }
  return stats::from_samples(std::move(samples));
}

inline std::uint64_t resident_bytes() {
  std::FILE* f = std::fopen("/proc/self/statm", "r");
  if (!f) return 0;
  unsigned long total = 0, resident = 0;
  const int got = std::fscanf(f, "%lu %lu", &total, &resident);
  std::fclose(f);
  if (got != 2) return 0;
  return static_cast<std::uint64_t>(resident) *
         static_cast<std::uint64_t>(sysconf(_SC_PAGESIZE));
}

struct scaling_result {
  std::uint32_t sandboxes = 0;
  bool all_oracle_correct = true;
  stats decode_ns;
  std::vector<std::uint64_t> rss_after;     // resident bytes after each added sandbox
  double mean_increment_bytes = 0;
};

// Drives K live sandboxes decoding the same image with row-level
// interleaving from min(K, cores) threads; memory growth is sampled as each
// sandbox joins.  Every sandbox runs the identical workload, including a
// fixed-size working-set touch, so the per-sandbox increment is stable
// enough to assert linearity against page-granular RSS readings.
inline scaling_result scaling_run(std::uint32_t k, std::span<const std::uint8_t> image_bytes,
                                  std::uint64_t region_size = 1u << 22) {
  scaling_result out;
  out.sandboxes = k;
  const auto want = rli::oracle_decode(image_bytes);
  if (!want) {
    out.all_oracle_correct = false;
    return out;
  }

  sandbox_config cfg;
  cfg.backend = backend_kind::emusfi;
  cfg.region_size = region_size;

  std::vector<std::uint8_t> arena(want->pixels.size());
  const std::vector<std::uint8_t> working_set(48 * 1024, 0xA5);
  const auto run_workload = [&](sandbox& s) {
    const auto dims = decode_into(s, image_bytes, arena);
    const bool ok = dims.width == want->width && dims.height == want->height &&
                    std::memcmp(arena.data(), want->pixels.data(), want->pixels.size()) == 0;
    // Deterministic per-sandbox working set at the top of the region.
    s.host_write(s.region_size() - working_set.size(), working_set.data(),
                 working_set.size());
    return ok;
  };

  // Warm the host-side allocator and registry paths before the baseline.
  for (int i = 0; i < 4; i++) {
    auto warm = sandbox::create(cfg);
    run_workload(*warm);
  }

  std::vector<std::shared_ptr<sandbox>> boxes;
  std::vector<std::uint64_t> rss;
  boxes.reserve(k);
  const std::uint64_t rss0 = resident_bytes();
  for (std::uint32_t i = 0; i < k; i++) {
    boxes.push_back(sandbox::create(cfg));
    if (!run_workload(*boxes.back())) out.all_oracle_correct = false;
    rss.push_back(resident_bytes());
  }
  out.rss_after = rss;
  if (k > 0 && rss.back() > rss0) {
    out.mean_increment_bytes = static_cast<double>(rss.back() - rss0) / k;
  }

  // Concurrent decode across all live sandboxes.
  const std::uint32_t threads =
      std::max(1u, std::min(k, std::thread::hardware_concurrency()));
  std::vector<double> samples(k, 0);
  std::atomic<bool> ok{true};
  std::vector<std::thread> pool;
  std::atomic<std::uint32_t> next{0};
  for (std::uint32_t t = 0; t < threads; t++) {
    pool.emplace_back([&] {
      for (;;) {
        const std::uint32_t i = next.fetch_add(1);
        if (i >= k) return;
        const auto t0 = std::chrono::steady_clock::now();
        const auto got = decode_image(*boxes[i], image_bytes);
        const auto t1 = std::chrono::steady_clock::now();
        samples[i] = std::chrono::duration<double, std::nano>(t1 - t0).count();
        if (got.img.pixels != want->pixels) ok = false;
      }
    });
  }
  for (auto& th : pool) th.join();
  out.all_oracle_correct = out.all_oracle_correct && ok;
  out.decode_ns = stats::from_samples(std::move(samples));
  return out;
}

struct decode_throughput_result {
  stats per_image_ns;
  double megabytes_per_second = 0;
  std::uint64_t bytes_total = 0;
};

inline decode_throughput_result decode_throughput(backend_kind backend,
                                                  std::span<const std::vector<std::uint8_t>> corpus,
                                                  std::uint32_t repeats = 1,
                                                  std::uint64_t region_size = 0) {
  sandbox_config cfg;
  cfg.backend = backend;
  cfg.region_size = region_size ? region_size : (1u << 22);
  auto s = sandbox::create(cfg);
  decode_throughput_result out;
  std::vector<double> samples;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint32_t r = 0; r < repeats; r++) {
    for (const auto& bytes : corpus) {
      const auto i0 = std::chrono::steady_clock::now();
      const auto got = decode_image(*s, bytes);
      const auto i1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::nano>(i1 - i0).count());
      out.bytes_total += got.img.pixels.size();
    }
  }
  const auto t1 = std::chrono::steady_clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();
  out.per_image_ns = stats::from_samples(std::move(samples));
  out.megabytes_per_second = secs > 0 ? (out.bytes_total / 1e6) / secs : 0;
  return out;
}

}  // namespace sandcage::bench
