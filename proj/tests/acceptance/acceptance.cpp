// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: each criterion prints one pass/fail line and the binary
// exits with the number of failures.  `--only N` runs a single criterion.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <limits.h>
#include <unistd.h>

#include "sandcage/attacks.hpp"
#include "sandcage/bench.hpp"
#include "sandcage/sandcage.hpp"

#ifndef SANDCAGE_CXX_COMPILER
#define SANDCAGE_CXX_COMPILER "g++"
#endif
#ifndef SANDCAGE_SOURCE_DIR
#define SANDCAGE_SOURCE_DIR "."
#endif

using namespace sandcage;

namespace {

struct criterion_result {
  bool pass = false;
  std::string detail;
};

std::string self_dir() {
  char buf[PATH_MAX];
  const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0) return ".";
  buf[n] = '\0';
  std::string path(buf);
  return path.substr(0, path.rfind('/'));
}

rli::image random_image(std::mt19937& rng, std::uint32_t max_dim) {
  rli::image img;
  img.width = 1 + rng() % max_dim;
  img.height = 1 + rng() % max_dim;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  const bool runs = rng() & 1;
  std::uint8_t v = static_cast<std::uint8_t>(rng());
  for (auto& p : img.pixels) {
    if (!runs || (rng() % 5) == 0) v = static_cast<std::uint8_t>(rng());
    p = v;
  }
  return img;
}

// 1. Swizzle exactness over three region sizes.
criterion_result swizzle_exactness() {
  std::vector<std::uint64_t> sizes = {1ull << 20, 1ull << 26};
  std::uint64_t big = 1ull << 32;
  for (;;) {
    try {
      masked_region probe(big, /*reserve_only=*/true);
      sizes.push_back(big);
      break;
    } catch (const violation_error&) {
      if (big <= (1ull << 27)) break;
      big >>= 1;  // cap at what the platform can reserve
    }
  }
  std::mt19937_64 rng(20260808);
  std::uint64_t checked = 0;
  for (const auto size : sizes) {
    masked_region region(size, /*reserve_only=*/true);
    for (int i = 0; i < 100000; i++) {
      const std::uint64_t off = rng() % size;
      const std::uintptr_t host = region.base() + off;
      const std::uint32_t guest = swizzle_to_guest(host, region.base(), size);
      const std::uintptr_t example = region.base() + (rng() % size);
      if (swizzle_to_host(guest, example, size) != host) {
        return {false, "round trip failed at size " + std::to_string(size)};
      }
      checked++;
    }
  }
  return {true,
          std::to_string(checked) + " offsets across " + std::to_string(sizes.size()) +
              " region sizes (largest 2^" +
              std::to_string(63 - __builtin_clzll(sizes.back())) + ")"};
}

// 2. Bounds soundness under fuzzed access descriptors with guard pages.
criterion_result bounds_soundness() {
  sandbox_config cfg;
  cfg.backend = backend_kind::emusfi;
  cfg.region_size = 1u << 22;
  auto s = sandbox::create(cfg);
  auto& backend = static_cast<inproc_backend&>(s->backend_impl());
  masked_region& region = backend.region();

  std::mt19937_64 rng(777);
  std::uint8_t buf[64];
  std::uint64_t guest_ops = 0, host_ops = 0, rejected = 0;
  for (int i = 0; i < 100000; i++) {
    // Guest-side masked accessors: any offset and width stays in-region
    // (the guard pages fault the whole process otherwise).
    const std::uint64_t off = rng();
    const std::uint32_t width = 1 + static_cast<std::uint32_t>(rng() % 64);
    if (rng() & 1) {
      region.masked_store(off, buf, width);
    } else {
      region.masked_load(off, buf, width);
    }
    guest_ops++;
  }
  for (int i = 0; i < 100000; i++) {
    // Host-side descriptors: in-range succeeds, out-of-range must reject.
    const std::uint64_t off = rng() % (cfg.region_size * 2);
    const std::uint64_t len = rng() % 8192;
    const bool in_range = off <= cfg.region_size && len <= cfg.region_size - off;
    try {
      guest_ref<std::uint8_t> r(static_cast<std::uint32_t>(off), s->id());
      copy_and_verify_array(r, len, [](std::span<const std::uint8_t>) { return true; });
      if (!in_range) return {false, "out-of-range descriptor was accepted"};
    } catch (const violation_error& e) {
      if (in_range) return {false, std::string("in-range descriptor rejected: ") + e.what()};
      if (e.kind() != violation_kind::bounds) {
        return {false, "expected bounds violation, got something else"};
      }
      rejected++;
    }
    host_ops++;
  }
  return {true, std::to_string(guest_ops) + " masked ops + " + std::to_string(host_ops) +
                    " host descriptors, " + std::to_string(rejected) +
                    " out-of-range rejections, zero faults"};
}

// 3. Attack regression: runtime classes on both isolating backends plus the
// static-rejection corpus.
criterion_result attack_regression() {
  auto rep = attack::run_runtime_attacks();
  {
    std::ofstream xml(self_dir() + "/attack_report.xml");
    xml << rep.to_junit_xml();
    std::ofstream txt(self_dir() + "/attack_report.txt");
    txt << rep.to_text();
  }
  if (!rep.all_blocked()) {
    return {false, "runtime attacks escaped:\n" + rep.to_text()};
  }
  if (!attack::clean_control(backend_kind::emusfi) ||
      !attack::clean_control(backend_kind::process)) {
    return {false, "clean control produced violations"};
  }

  attack::static_corpus_config cfg;
  cfg.compiler = SANDCAGE_CXX_COMPILER;
  cfg.flags = "-std=c++20 -fsyntax-only -I" SANDCAGE_SOURCE_DIR "/include -I" SANDCAGE_SOURCE_DIR
              "/vendor";
  cfg.corpus_dir = SANDCAGE_SOURCE_DIR "/tests/static_rejection/cases";
  const auto srep = attack::run_static_rejections(cfg);
  if (!srep.all_ok()) {
    return {false, "static corpus failed:\n" + srep.to_text()};
  }
  return {true, std::to_string(rep.cases.size()) + "/16 runtime cases blocked (8 classes x 2 "
                "backends), 10/10 rejected, 10/10 twins compile"};
}

// 4. Oracle equivalence across null, emusfi and process backends.
criterion_result oracle_equivalence() {
  sandbox_config base;
  base.region_size = 1u << 20;
  std::vector<std::shared_ptr<sandbox>> boxes;
  for (auto kind : {backend_kind::null_direct, backend_kind::null_indirect,
                    backend_kind::emusfi, backend_kind::process}) {
    sandbox_config cfg = base;
    cfg.backend = kind;
    boxes.push_back(sandbox::create(cfg));
  }
  std::mt19937 rng(1000);
  for (int i = 0; i < 1000; i++) {
    const auto img = random_image(rng, 256);
    const auto encoded = rli::encode(img.pixels, img.width, img.height);
    const auto want = rli::oracle_decode(encoded);
    if (!want || want->pixels != img.pixels) {
      return {false, "oracle disagreed with the generator at image " + std::to_string(i)};
    }
    for (auto& sb : boxes) {
      const auto got = decode_image(*sb, encoded);
      if (got.img.pixels != want->pixels) {
        return {false, "backend decode diverged at image " + std::to_string(i)};
      }
    }
  }
  return {true, "1000 images byte-identical across null, null_indirect, emusfi, process"};
}

// 5. Freeze safety under the adversarial mutator.
criterion_result freeze_safety() {
  sandbox_config cfg;
  cfg.backend = backend_kind::emusfi;
  cfg.region_size = 1u << 20;
  auto s = sandbox::create(cfg);
  rli::register_info_record();
  const std::uint32_t info_off = 0x2000;
  guest_ref<rli::info_record> info(info_off, s->id());

  auto& backend = static_cast<inproc_backend&>(s->backend_impl());
  backend.start_scanline_mutator(info_off + 8);  // the m5 mutator thread

  constexpr std::uint32_t host_value = 5;
  constexpr std::uint32_t attacker_value = 0x7FFFFFF0u;
  std::uint64_t tampered = 0, clean = 0;
  for (int run = 0; run < 10000; run++) {
    auto cell = info.freezable_field<std::uint32_t>("output_scanline");
    cell.write(host_value);
    cell.freeze();
    const std::uint32_t pinned = cell.pinned_value();
    if (pinned != host_value && pinned != attacker_value) {
      return {false, "freeze captured a value nobody wrote"};
    }
    try {
      const std::uint32_t consumed =
          cell.frozen_read().unsafe_unverified("freeze-acceptance");
      if (consumed != pinned) {
        return {false, "consumed value diverged from the frozen copy"};
      }
      clean++;
    } catch (const violation_error& e) {
      if (e.kind() != violation_kind::tamper) {
        return {false, std::string("unexpected violation: ") + e.what()};
      }
      tampered++;
    }
  }
  return {true, "10000 runs: " + std::to_string(clean) + " reads equal to the frozen copy, " +
                    std::to_string(tampered) + " tamper detections, 0 attacker values"};
}

// 6. Latency ordering and ratios (paper absolutes are machine-specific).
criterion_result latency_ordering() {
  const auto suite = bench::transfer_latency_ordering(100000, 1u << 20);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "p50 null=%.0fns emusfi=%.0fns spin=%.0fns event=%.0fns "
                "(event/spin=%.2f, emusfi/null=%.2f)",
                suite.null_backend.p50, suite.emusfi.p50, suite.process_spin.p50,
                suite.process_event.p50, suite.event_spin_ratio(), suite.emusfi_null_ratio());
  const bool ok = suite.ordering_holds() && suite.event_spin_ratio() >= 3.0 &&
                  suite.emusfi_null_ratio() <= 20.0;
  return {ok, buf};
}

// 7. Creation cost bounds at the default region size.
criterion_result creation_cost() {
  const auto emusfi = bench::creation_cost(backend_kind::emusfi, 50, 1ull << 26);
  const auto process = bench::creation_cost(backend_kind::process, 20, 1ull << 26);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "median emusfi=%.3fms (<=5ms), process=%.3fms (<=50ms)",
                emusfi.p50 / 1e6, process.p50 / 1e6);
  return {emusfi.p50 <= 5e6 && process.p50 <= 50e6, buf};
}

// 8. Scaling: 64 concurrent emusfi sandboxes, oracle-correct, linear memory.
criterion_result scaling() {
  std::mt19937 rng(64);
  rli::image img;
  img.width = 128;
  img.height = 128;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 11);
  const auto encoded = rli::encode(img.pixels, img.width, img.height);

  const auto result = bench::scaling_run(64, encoded, 1u << 22);
  if (!result.all_oracle_correct) {
    return {false, "a concurrent decode diverged from the oracle"};
  }
  // Linearity: per-sandbox increments averaged over batches of 8 stay
  // within +/-25% of the overall mean increment.
  const auto& rss = result.rss_after;
  const std::size_t batch = 8;
  std::vector<double> increments;
  for (std::size_t i = batch; i <= rss.size(); i += batch) {
    increments.push_back(static_cast<double>(rss[i - 1] - rss[i - batch]) / batch);
  }
  double mean = 0;
  for (const double inc : increments) mean += inc;
  mean /= increments.size();
  if (mean <= 0) {
    return {false, "memory accounting collapsed (zero mean increment)"};
  }
  for (const double inc : increments) {
    if (inc < 0.75 * mean || inc > 1.25 * mean) {
      char buf[160];
      std::snprintf(buf, sizeof(buf),
                    "batch increment %.0f B outside +/-25%% of mean %.0f B/sandbox", inc, mean);
      return {false, buf};
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "64 concurrent decodes oracle-correct; memory %.1f KiB/sandbox, all batch "
                "increments within +/-25%%",
                mean / 1024.0);
  return {true, buf};
}

// 9. Pool policy bounds under randomized stress.
criterion_result pool_policy() {
  pool_config cfg;
  cfg.image_threshold = 10;
  cfg.sandbox.backend = backend_kind::emusfi;
  cfg.sandbox.region_size = 1u << 20;
  sandbox_pool pool(cfg);
  std::mt19937 rng(4242);
  std::vector<sandbox_pool::lease> held;
  for (int op = 0; op < 10000; op++) {
    if (held.size() < 6 && (held.empty() || rng() % 2 == 0)) {
      const int k = static_cast<int>(rng() % 100);
      held.push_back(pool.acquire({"rli", "origin" + std::to_string(k), "image/rli"}));
    } else {
      held.erase(held.begin() + static_cast<long>(rng() % held.size()));
    }
    if (pool.live_count() > 10 + held.size()) {
      return {false, "live_count exceeded threshold + outstanding leases at op " +
                         std::to_string(op)};
    }
  }
  held.clear();
  if (pool.live_count() > 10) {
    return {false, "idle instances exceed the threshold after release"};
  }
  {
    auto media = pool.acquire({"vorbis", "https://a.test", "audio/ogg"});
  }
  const auto after_media = pool.idle_count(content_class::media);
  if (after_media != 0) {
    return {false, "media sandbox survived its release"};
  }
  return {true, "10000 ops, 100 keys: live <= 10 + outstanding held; media destroyed on "
                "release"};
}

// 10. No host address ever lands in guest-readable memory.
criterion_result no_address_leak() {
  std::mt19937 rng(31415);
  std::uint64_t scans = 0;
  for (int session = 0; session < 100; session++) {
    sandbox_config cfg;
    cfg.backend = (session % 2 == 0) ? backend_kind::emusfi : backend_kind::process;
    cfg.region_size = 1u << 20;
    auto s = sandbox::create(cfg);
    const auto img = random_image(rng, 128);
    const auto encoded = rli::encode(img.pixels, img.width, img.height);
    const auto got = decode_image(*s, encoded);
    if (got.img.pixels != img.pixels) {
      return {false, "decode diverged during session " + std::to_string(session)};
    }
    const std::uintptr_t extra[] = {
        reinterpret_cast<std::uintptr_t>(&rng),
        reinterpret_cast<std::uintptr_t>(got.img.pixels.data()),
    };
    const auto needles = attack::detail::live_host_addresses(extra);
    const auto leaks = attack::detail::count_address_leaks(*s, needles);
    if (leaks != 0) {
      return {false, "host address pattern found in guest region during session " +
                         std::to_string(session)};
    }
    scans++;
  }
  return {true, "100 randomized sessions scanned; zero 8-byte windows matching live host "
                "addresses"};
}

struct criterion {
  int number;
  const char* name;
  std::function<criterion_result()> run;
};

const std::vector<criterion>& criteria() {
  static const std::vector<criterion> list = {
      {1, "swizzle exactness", swizzle_exactness},
      {2, "bounds soundness", bounds_soundness},
      {3, "attack regression", attack_regression},
      {4, "oracle equivalence", oracle_equivalence},
      {5, "freeze safety", freeze_safety},
      {6, "latency ordering", latency_ordering},
      {7, "creation cost", creation_cost},
      {8, "scaling", scaling},
      {9, "pool policy", pool_policy},
      {10, "no-host-address leak", no_address_leak},
  };
  return list;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; i++) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: acceptance [--only N]\n");
      return 2;
    }
  }
  int failures = 0;
  for (const auto& c : criteria()) {
    if (only != 0 && c.number != only) continue;
    criterion_result res;
    try {
      res = c.run();
    } catch (const std::exception& e) {
      res = {false, std::string("unhandled exception: ") + e.what()};
    }
    std::printf("[%s] criterion %2d: %-22s %s\n", res.pass ? "PASS" : "FAIL", c.number,
                c.name, res.detail.c_str());
    std::fflush(stdout);
    failures += res.pass ? 0 : 1;
  }
  return failures;
}
