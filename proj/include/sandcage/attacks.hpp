// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <random>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <sys/wait.h>

#include "sandcage/sandcage.hpp"

namespace sandcage::attack {

struct case_result {
  std::string name;
  std::string backend;
  bool blocked = false;
  std::string outcome;
};

struct report {
  std::vector<case_result> cases;

  bool all_blocked() const {
    for (const auto& c : cases) {
      if (!c.blocked) return false;
    }
    return true;
  }

  std::size_t blocked_count() const {
    std::size_t n = 0;
    for (const auto& c : cases) n += c.blocked ? 1 : 0;
    return n;
  }

  std::string to_text() const {
    std::ostringstream out;
    for (const auto& c : cases) {
      out << (c.blocked ? "[blocked] " : "[ESCAPED] ") << c.backend << "/" << c.name << ": "
          << c.outcome << "\n";
    }
    return out.str();
  }

  std::string to_junit_xml() const {
    std::ostringstream out;
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<testsuite name=\"attack-regression\" tests=\"" << cases.size() << "\" failures=\""
        << cases.size() - blocked_count() << "\">\n";
    for (const auto& c : cases) {
      out << "  <testcase classname=\"" << c.backend << "\" name=\"" << c.name << "\"";
      if (c.blocked) {
        out << "/>\n";
      } else {
        out << ">\n    <failure message=\"" << c.outcome << "\"/>\n  </testcase>\n";
      }
    }
    out << "</testsuite>\n";
    return out.str();
  }
};

namespace detail {

inline const char* backend_label(backend_kind k) {
  switch (k) {
    case backend_kind::null_direct: return "null";
    case backend_kind::null_indirect: return "null_indirect";
    case backend_kind::emusfi: return "emusfi";
    case backend_kind::process: return "process";
  }
  return "?";
}

inline std::vector<std::uint8_t> attack_payload() {
  rli::image img;
  img.width = 96;
  img.height = 64;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  std::mt19937 rng(2024);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 17);
  return rli::encode(img.pixels, img.width, img.height);
}

inline constexpr std::size_t canary_pad = 64;
inline constexpr std::uint8_t canary_byte = 0xC9;

struct canary_arena {
  std::vector<std::uint8_t> storage;
  explicit canary_arena(std::size_t payload) : storage(payload + 2 * canary_pad, canary_byte) {}
  std::span<std::uint8_t> pixels() {
    return std::span<std::uint8_t>(storage).subspan(canary_pad, storage.size() - 2 * canary_pad);
  }
  bool intact() const {
    for (std::size_t i = 0; i < canary_pad; i++) {
      if (storage[i] != canary_byte) return false;
      if (storage[storage.size() - 1 - i] != canary_byte) return false;
    }
    return true;
  }
};

struct run_outcome {
  bool threw = false;
  violation_kind kind = violation_kind::none;
  std::int32_t guest_code = 0;
  bool pixels_match = false;
  std::string detail;
};

// One adversarial decode with canaries around the destination buffer.
inline run_outcome run_variant(backend_kind backend, const std::string& variant,
                               const std::vector<std::uint8_t>& payload,
                               std::shared_ptr<sandbox>* out_sb = nullptr) {
  sandbox_config cfg;
  cfg.backend = backend;
  cfg.region_size = 1u << 20;
  cfg.guest = variant;
  auto sb = sandbox::create(cfg);
  if (out_sb) *out_sb = sb;

  const auto want = rli::oracle_decode(payload);
  canary_arena arena(want ? want->pixels.size() : 1 << 16);
  run_outcome out;
  try {
    const auto dims = decode_into(*sb, payload, arena.pixels());
    out.pixels_match = want && dims.width == want->width && dims.height == want->height &&
                       std::memcmp(arena.pixels().data(), want->pixels.data(),
                                   want->pixels.size()) == 0;
  } catch (const decode_error& e) {
    out.threw = true;
    out.kind = e.kind();
    out.guest_code = e.guest_code();
    out.detail = e.what();
  } catch (const violation_error& e) {
    out.threw = true;
    out.kind = e.kind();
    out.detail = e.what();
  }
  if (!arena.intact()) {
    out.detail += " [CANARY SMASHED]";
    out.kind = violation_kind::none;
    out.threw = false;
    out.pixels_match = false;
  }
  return out;
}

// Scans a sandbox region for any 8-byte window equal to one of the live
// host addresses.
inline std::size_t count_address_leaks(sandbox& s, std::span<const std::uintptr_t> needles) {
  const auto* mem = reinterpret_cast<const std::uint8_t*>(s.region_base());
  const auto size = static_cast<std::size_t>(s.region_size());
  std::size_t hits = 0;
  for (const std::uintptr_t needle : needles) {
    if (needle == 0) continue;
    std::uint8_t pat[8];
    std::memcpy(pat, &needle, 8);
    const std::uint8_t* p = mem;
    std::size_t left = size;
    while (left >= 8) {
      const void* found = std::memchr(p, pat[0], left - 7);
      if (!found) break;
      const auto* f = static_cast<const std::uint8_t*>(found);
      if (std::memcmp(f, pat, 8) == 0) hits++;
      left -= static_cast<std::size_t>(f - p) + 1;
      p = f + 1;
    }
  }
  return hits;
}

// The live needle set: every live region base plus the host callback
// function addresses the decode path registers.
inline std::vector<std::uintptr_t> live_host_addresses(std::span<const std::uintptr_t> extra) {
  std::vector<std::uintptr_t> needles;
  sandbox_registry::instance().for_each(
      [&](sandbox_core& core) { needles.push_back(core.region_base()); });
  needles.push_back(reinterpret_cast<std::uintptr_t>(
      static_cast<std::uint32_t (*)(sandbox&, guest_ref<rli::info_record>)>(
          &sandcage::detail::fill_input)));
  needles.push_back(reinterpret_cast<std::uintptr_t>(
      static_cast<void (*)(sandbox&, guest_ref<rli::info_record>, tainted<std::uint32_t>)>(
          &sandcage::detail::skip_input)));
  needles.insert(needles.end(), extra.begin(), extra.end());
  return needles;
}

}  // namespace detail

// Executes the runtime attack classes against one backend and reports the
// observed outcome per case.
inline void run_attacks_on(backend_kind backend, report& rep) {
  const auto payload = detail::attack_payload();
  const char* label = detail::backend_label(backend);
  auto add = [&](const char* name, bool blocked, std::string outcome) {
    rep.cases.push_back(case_result{name, label, blocked, std::move(outcome)});
  };

  // m1: oversized output_scanline caught by the frozen library-invariant
  // validator.
  {
    auto out = detail::run_variant(backend, "m1", payload);
    add("m1-oversized-scanline", out.threw && out.kind == violation_kind::validation,
        out.detail.empty() ? "decode completed" : out.detail);
  }
  // m2: out-of-region input ref caught by bounds at resolution.
  {
    auto out = detail::run_variant(backend, "m2", payload);
    add("m2-out-of-region-ref", out.threw && out.kind == violation_kind::bounds,
        out.detail.empty() ? "decode completed" : out.detail);
  }
  // m3: forged callback slot.
  {
    auto out = detail::run_variant(backend, "m3", payload);
    add("m3-forged-slot", out.threw && out.kind == violation_kind::callback,
        out.detail.empty() ? "decode completed" : out.detail);
  }
  // m4: callback dispatched before the host grants it.
  {
    auto out = detail::run_variant(backend, "m4", payload);
    const bool blocked =
        out.threw && (out.kind == violation_kind::callback || out.guest_code != 0);
    add("m4-early-callback", blocked, out.detail.empty() ? "decode completed" : out.detail);
  }
  // m5: double-fetch mutator; the host-consumed value is the frozen copy,
  // so the only safe outcomes are a tamper/validation stop or a fully
  // correct decode.
  {
    auto out = detail::run_variant(backend, "m5", payload);
    const bool blocked = (out.threw && (out.kind == violation_kind::tamper ||
                                        out.kind == violation_kind::validation)) ||
                         (!out.threw && out.pixels_match);
    add("m5-double-fetch", blocked, out.threw ? out.detail : "decode unaffected");
  }
  // m6: host-address probe; the decode itself runs, the scan must find no
  // live host addresses in guest memory.
  {
    std::shared_ptr<sandbox> sb;
    auto out = detail::run_variant(backend, "m6", payload, &sb);
    const auto needles = detail::live_host_addresses({});
    const std::size_t leaks = detail::count_address_leaks(*sb, needles);
    add("m6-address-probe", !out.threw && out.pixels_match && leaks == 0,
        leaks ? "address pattern found in guest memory" : "no live host address in region");
  }
  // m7: cross-invocation confusion across two sandboxes on two threads;
  // host contexts must never cross.
  {
    std::atomic<bool> crossed{false};
    std::atomic<bool> crashed{false};
    auto worker = [&](int seed) {
      try {
        sandbox_config cfg;
        cfg.backend = backend;
        cfg.region_size = 1u << 20;
        cfg.guest = "m7";
        auto sb = sandbox::create(cfg);
        rli::image img;
        img.width = 32 + seed;
        img.height = 16;
        img.pixels.assign(static_cast<std::size_t>(img.width) * img.height,
                          static_cast<std::uint8_t>(seed));
        const auto bytes = rli::encode(img.pixels, img.width, img.height);
        try {
          auto got = decode_image(*sb, bytes);
          // If the decode survived the self-sabotage, output integrity must
          // hold; a mismatch would mean streams crossed.
          if (got.img.pixels != img.pixels) crossed = true;
        } catch (const decode_error&) {
          // Self-corrupted stream; acceptable.
        } catch (const violation_error&) {
        }
      } catch (...) {
        crashed = true;
      }
    };
    std::thread a(worker, 1), b(worker, 2);
    a.join();
    b.join();
    add("m7-context-confusion", !crossed && !crashed,
        crossed ? "decoder state crossed invocations" : "contexts stayed isolated");
  }
  // m8: dispatch of a slot cached before the host unregistered it.
  {
    auto out = detail::run_variant(backend, "m8", payload);
    add("m8-stale-slot", out.threw && out.kind == violation_kind::callback,
        out.detail.empty() ? "decode completed" : out.detail);
  }
}

inline report run_runtime_attacks(std::span<const backend_kind> backends) {
  report rep;
  for (const auto b : backends) run_attacks_on(b, rep);
  return rep;
}

inline report run_runtime_attacks() {
  const backend_kind both[] = {backend_kind::emusfi, backend_kind::process};
  return run_runtime_attacks(both);
}

// --- static rejection corpus -----------------------------------------------
//
// Discipline breaches must fail compilation.  Each corpus entry is a small
// translation unit expected to be rejected with a diagnostic matching its
// pattern; its .ok twin applies the fix and must compile.

struct static_corpus_config {
  std::string compiler;  // e.g. "g++"
  std::string flags;     // include dirs, -std, -fsyntax-only
  std::string corpus_dir;
};

struct static_case {
  const char* name;
  const char* diagnostic_pattern;  // POSIX extended regex
};

inline std::span<const static_case> static_corpus() {
  static const static_case cases[] = {
      {"01_branch_on_tainted", "could not convert"},
      {"02_host_ref_into_invoke", "host pointers cannot cross"},
      {"03_verify_guest_aggregate", "no member named .verify."},
      {"04_plain_function_as_callback", "callbacks must be registered"},
      {"05_read_freezable_unfrozen", "no member named .read."},
      {"06_tainted_loop_bound", "could not convert"},
      {"07_deref_guest_offset", "no match for .operator\\*."},
      {"08_host_ref_into_record", "use of deleted function"},
      {"09_callback_untainted_params", "callback parameters must be tainted"},
      {"10_tainted_index_host_array", "no match for .operator\\[\\]."},
  };
  return cases;
}

struct static_case_result {
  std::string name;
  bool bad_rejected = false;
  bool diagnostic_matched = false;
  bool twin_compiles = false;
  std::string diagnostic;

  bool ok() const { return bad_rejected && diagnostic_matched && twin_compiles; }
};

struct static_report {
  std::vector<static_case_result> cases;

  bool all_ok() const {
    for (const auto& c : cases) {
      if (!c.ok()) return false;
    }
    return !cases.empty();
  }

  std::string to_text() const {
    std::ostringstream out;
    for (const auto& c : cases) {
      out << (c.ok() ? "[ok] " : "[FAIL] ") << c.name << " rejected=" << c.bad_rejected
          << " matched=" << c.diagnostic_matched << " twin=" << c.twin_compiles << "\n";
    }
    return out.str();
  }
};

namespace detail {

struct command_result {
  int status = -1;
  std::string output;
};

inline command_result run_command(const std::string& cmd) {
  command_result res;
  FILE* pipe = ::popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) return res;
  char buf[4096];
  std::size_t n;
  while ((n = ::fread(buf, 1, sizeof(buf), pipe)) > 0) res.output.append(buf, n);
  const int rc = ::pclose(pipe);
  if (rc >= 0 && WIFEXITED(rc)) res.status = WEXITSTATUS(rc);
  return res;
}

}  // namespace detail

inline static_report run_static_rejections(const static_corpus_config& cfg) {
  static_report rep;
  for (const auto& c : static_corpus()) {
    static_case_result r;
    r.name = c.name;
    const std::string base = cfg.compiler + " " + cfg.flags + " ";
    const auto bad =
        detail::run_command(base + cfg.corpus_dir + "/" + c.name + ".bad.cpp");
    r.bad_rejected = bad.status != 0;
    r.diagnostic = bad.output;
    try {
      std::regex pattern(c.diagnostic_pattern, std::regex::extended);
      r.diagnostic_matched = std::regex_search(bad.output, pattern);
    } catch (const std::regex_error&) {
      r.diagnostic_matched = false;
    }
    const auto ok = detail::run_command(base + cfg.corpus_dir + "/" + c.name + ".ok.cpp");
    r.twin_compiles = ok.status == 0;
    rep.cases.push_back(std::move(r));
  }
  return rep;
}

// Control case: a clean guest generates zero violations.
inline bool clean_control(backend_kind backend) {
  sandbox_config cfg;
  cfg.backend = backend;
  cfg.region_size = 1u << 20;
  auto sb = sandbox::create(cfg);
  const auto payload = detail::attack_payload();
  const auto got = decode_image(*sb, payload);
  const auto want = rli::oracle_decode(payload);
  return want && got.img.pixels == want->pixels && sb->violations().total() == 0;
}

}  // namespace sandcage::attack
