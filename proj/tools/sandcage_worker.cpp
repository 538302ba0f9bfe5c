// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
//
// Guest worker process: maps the shared region the host created, announces
// readiness, then serves the message channel until SHUTDOWN or abort.
//
//   sandcage-worker --shm <name> --size <bytes> --guest <variant>
//                   [--report-base <file>]
//
// Exit codes: 0 clean shutdown, 2 protocol violation, 3 host-initiated abort.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/prctl.h>
#include <sys/resource.h>
#include <sys/stat.h>
#include <unistd.h>

#include "sandcage/guest/env.hpp"
#include "sandcage/rpc.hpp"
#include "sandcage/worker.hpp"

namespace {

void drop_privileges() {
  // Best effort; full syscall filtering is platform policy outside this
  // artifact's scope.
  ::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0);
  rlimit core{0, 0};
  ::setrlimit(RLIMIT_CORE, &core);
}

}  // namespace

int main(int argc, char** argv) {
  std::string shm_name;
  std::string guest = "clean";
  std::string report_base;
  std::uint64_t size = 0;
  std::uint64_t spin_budget = 100'000'000;
  std::uint32_t spin_pause = 4;
  for (int i = 1; i < argc; i++) {
    const std::string arg = argv[i];
    const bool has_value = i + 1 < argc;
    if (arg == "--shm" && has_value) {
      shm_name = argv[++i];
    } else if (arg == "--size" && has_value) {
      size = std::strtoull(argv[++i], nullptr, 10);
    } else if (arg == "--guest" && has_value) {
      guest = argv[++i];
    } else if (arg == "--report-base" && has_value) {
      report_base = argv[++i];
    } else if (arg == "--spin-budget" && has_value) {
      spin_budget = std::strtoull(argv[++i], nullptr, 10);
    } else if (arg == "--spin-pause" && has_value) {
      spin_pause = static_cast<std::uint32_t>(std::strtoul(argv[++i], nullptr, 10));
    } else {
      std::fprintf(stderr, "usage: sandcage-worker --shm <name> --size <bytes> --guest "
                           "<variant> [--spin-budget <n>] [--report-base <file>]\n");
      return sandcage::worker::exit_protocol_violation;
    }
  }
  if (shm_name.empty() || size == 0 || !sandcage::is_power_of_two(size)) {
    return sandcage::worker::exit_protocol_violation;
  }

  sandcage::guest_variant variant;
  try {
    variant = sandcage::parse_guest_variant(guest);
  } catch (const sandcage::violation_error&) {
    return sandcage::worker::exit_protocol_violation;
  }

  const int fd = ::shm_open(shm_name.c_str(), O_RDWR, 0);
  if (fd < 0) return sandcage::worker::exit_protocol_violation;
  struct stat st{};
  if (::fstat(fd, &st) != 0 || static_cast<std::uint64_t>(st.st_size) != size) {
    ::close(fd);
    return sandcage::worker::exit_protocol_violation;
  }

  // Map at a worker-local size-aligned base: all cross-process references
  // are 32-bit offsets, so where the region lands here is immaterial.
  const auto page = static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
  const std::uint64_t reserve_len = size * 2 + 2 * page;
  void* reserved = ::mmap(nullptr, reserve_len, PROT_NONE,
                          MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  if (reserved == MAP_FAILED) {
    ::close(fd);
    return sandcage::worker::exit_protocol_violation;
  }
  auto start = reinterpret_cast<std::uintptr_t>(reserved);
  std::uintptr_t aligned = (start + page + size - 1) & ~(size - 1);
  if (aligned < start + page) aligned += size;
  void* mem = ::mmap(reinterpret_cast<void*>(aligned), size, PROT_READ | PROT_WRITE,
                     MAP_SHARED | MAP_FIXED, fd, 0);
  ::close(fd);
  if (mem == MAP_FAILED) return sandcage::worker::exit_protocol_violation;

  if (!report_base.empty()) {
    if (FILE* f = std::fopen(report_base.c_str(), "w")) {
      std::fprintf(f, "0x%zx\n", reinterpret_cast<std::size_t>(mem));
      std::fclose(f);
    }
  }

  drop_privileges();
  sandcage::worker::runtime rt(static_cast<std::uint8_t*>(mem), size, variant, spin_budget,
                               spin_pause);
  rt.run();  // never returns
}
