// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include <fcntl.h>
#include <limits.h>
#include <signal.h>
#include <spawn.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include "sandcage/error.hpp"
#include "sandcage/guest/rli.hpp"
#include "sandcage/rpc.hpp"
#include "sandcage/sandbox.hpp"

extern char** environ;

namespace sandcage {

namespace detail {

// Maps a shared-memory object at a size-aligned base with inaccessible
// guard pages on both sides.
struct shm_mapping {
  void* reserved = nullptr;
  std::uint64_t reserved_len = 0;
  std::uintptr_t base = 0;
  std::uint64_t size = 0;

  void map(int fd, std::uint64_t sz) {
    const std::uint64_t page = static_cast<std::uint64_t>(sysconf(_SC_PAGESIZE));
    reserved_len = sz * 2 + 2 * page;
    reserved = ::mmap(nullptr, reserved_len, PROT_NONE,
                      MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (reserved == MAP_FAILED) {
      reserved = nullptr;
      raise(violation_kind::creation, "cannot reserve address space for shared region");
    }
    auto start = reinterpret_cast<std::uintptr_t>(reserved);
    std::uintptr_t aligned = (start + page + sz - 1) & ~(sz - 1);
    if (aligned < start + page) aligned += sz;
    void* got = ::mmap(reinterpret_cast<void*>(aligned), sz, PROT_READ | PROT_WRITE,
                       MAP_SHARED | MAP_FIXED, fd, 0);
    if (got == MAP_FAILED) {
      ::munmap(reserved, reserved_len);
      reserved = nullptr;
      raise(violation_kind::creation, "cannot map shared region");
    }
    base = aligned;
    size = sz;
  }

  void unmap() {
    if (reserved) {
      ::munmap(reserved, reserved_len);
      reserved = nullptr;
      base = 0;
    }
  }

  ~shm_mapping() { unmap(); }
};

inline std::string default_worker_path() {
  if (const char* env = std::getenv("SANDCAGE_WORKER")) return env;
  char buf[PATH_MAX];
  const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n > 0) {
    buf[n] = '\0';
    std::string dir(buf);
    const auto slash = dir.rfind('/');
    if (slash != std::string::npos) {
      return dir.substr(0, slash + 1) + "sandcage-worker";
    }
  }
  return "sandcage-worker";
}

}  // namespace detail

// OS-process isolation: the guest library runs in a worker process; the
// shared region holds the guest heap plus the message channel.  One channel,
// one in-flight call, synchronous turn-based protocol.
class process_backend final : public isolation_backend {
public:
  explicit process_backend(const sandbox_config& cfg) : cfg_(cfg) {
    if (!is_power_of_two(cfg.region_size) || cfg.region_size < min_region_size) {
      raise(violation_kind::creation, "region size must be a power of two >= 2^20");
    }
    // Anonymous shared memory object with a collision-proof name.
    std::random_device rd;
    shm_name_ = "/sandcage-" + std::to_string(::getpid()) + "-" +
                std::to_string(rd()) + "-" + std::to_string(rd());
    int fd = ::shm_open(shm_name_.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
    if (fd < 0) {
      raise(violation_kind::creation, "shm_open failed");
    }
    if (::ftruncate(fd, static_cast<off_t>(cfg.region_size)) != 0) {
      ::close(fd);
      ::shm_unlink(shm_name_.c_str());
      raise(violation_kind::creation, "ftruncate of shared region failed");
    }
    try {
      map_.map(fd, cfg.region_size);
    } catch (...) {
      ::close(fd);
      ::shm_unlink(shm_name_.c_str());
      throw;
    }
    ::close(fd);

    ep_ = rpc::endpoint(reinterpret_cast<std::uint8_t*>(map_.base), rpc::side_host);
    ep_.init_control(cfg.initial_sync);
    spawn_worker();
  }

  ~process_backend() override { teardown(); }

  std::uintptr_t region_base() const override { return map_.base; }
  std::uint64_t region_size() const override { return map_.size; }

  std::int64_t resolve_symbol(std::string_view name) override {
    // The worker links the same guest image; the export-name order is the
    // function-index contract.
    const auto names = rli::export_names();
    for (std::size_t i = 0; i < names.size(); i++) {
      if (name == names[i]) return static_cast<std::int64_t>(i);
    }
    return -1;
  }

  wire_value invoke_fn(sandbox& s, std::uint32_t index,
                       std::span<const wire_value> args) override {
    std::lock_guard lock(channel_mu_);
    require_live(s);
    rpc::message m;
    m.opcode = rpc::op_invoke;
    m.fn_or_slot = index;
    m.argc = static_cast<std::uint32_t>(args.size());
    for (std::size_t i = 0; i < args.size() && i < rpc::max_args; i++) m.args[i] = args[i];
    ep_.post(m);
    return pump_for_return(s);
  }

  std::uint32_t guest_malloc(sandbox& s, std::uint32_t size, std::uint32_t align) override {
    std::lock_guard lock(channel_mu_);
    require_live(s);
    rpc::message m;
    m.opcode = rpc::op_malloc;
    m.argc = 2;
    m.args[0] = {wire_kind::u32, size};
    m.args[1] = {wire_kind::u32, align};
    ep_.post(m);
    const rpc::message reply = wait_and_read(s, {rpc::op_return});
    if (reply.status != 0) {
      s.fail(violation_kind::alloc_failure, "worker heap exhausted");
    }
    const auto off = static_cast<std::uint32_t>(reply.args[0].bits);
    // The worker is untrusted: its reply must be an in-region aligned block
    // that fits below the region end.
    if (off < rpc::control_size || off >= map_.size || size > map_.size - off ||
        (align != 0 && off % align != 0)) {
      protocol_fail(s, "worker returned an invalid allocation");
    }
    return off;
  }

  void guest_free(sandbox& s, std::uint32_t offset) override {
    std::lock_guard lock(channel_mu_);
    require_live(s);
    rpc::message m;
    m.opcode = rpc::op_mfree;
    m.argc = 1;
    m.args[0] = {wire_kind::u32, offset};
    ep_.post(m);
    const rpc::message reply = wait_and_read(s, {rpc::op_return});
    if (reply.status != 0) {
      s.fail(violation_kind::invalid_free, "worker rejected the free");
    }
  }

  void set_sync(sync_mode m) override { ep_.set_mode(m); }  // effective next message
  sync_mode sync() const override { return const_cast<rpc::endpoint&>(ep_).mode(); }

  void pin(int core) override {
    cpu_set_t set;
    CPU_ZERO(&set);
    if (core < 0 || core >= CPU_SETSIZE) {
      raise(violation_kind::usage, "core id out of range");
    }
    CPU_SET(core, &set);
    if (::sched_setaffinity(worker_pid_, sizeof(set), &set) != 0) {
      raise(violation_kind::usage, "pinning unsupported: sched_setaffinity failed");
    }
  }

  void shutdown(sandbox&) override { teardown(); }

  pid_t worker_pid() const { return worker_pid_; }

  // Wait status of a reaped worker (valid once worker_exited() returned
  // true or destroy() completed without force-killing).
  bool worker_reaped() const { return worker_reaped_; }
  int worker_exit_status() const { return worker_status_; }

  bool worker_exited(int* status = nullptr) {
    if (worker_pid_ <= 0) return true;
    int st = 0;
    const pid_t r = ::waitpid(worker_pid_, &st, WNOHANG);
    if (r == worker_pid_) {
      worker_reaped_ = true;
      worker_status_ = st;
      worker_pid_ = -1;
      if (status) *status = st;
      return true;
    }
    return false;
  }

private:
  void require_live(sandbox& s) {
    if (dead_) {
      s.fail(violation_kind::sandbox_dead, "worker transport is down");
    }
  }

  [[noreturn]] void protocol_fail(sandbox& s, const std::string& what) {
    // Tell the worker to stop, then report: the sandbox is unusable.
    rpc::message m;
    m.opcode = rpc::op_abort;
    m.status = 2;
    ep_.post(m);
    dead_ = true;
    s.mark_transport_dead();
    s.fail(violation_kind::protocol, what);
  }

  // Waits for our turn and performs untrusted-message validation.
  rpc::message wait_and_read(sandbox& s, std::initializer_list<std::uint32_t> allowed) {
    const auto deadline = std::chrono::steady_clock::now() + cfg_.call_timeout;
    const auto res = ep_.wait_turn(
        deadline, [&] { return !worker_exited(); }, cfg_.spin_relax_budget,
        cfg_.spin_pause_per_yield);
    if (res == rpc::wait_result::peer_dead) {
      dead_ = true;
      s.mark_transport_dead();
      s.fail(violation_kind::transport, "worker process died mid-call");
    }
    if (res == rpc::wait_result::timeout) {
      dead_ = true;
      kill_worker();
      s.mark_transport_dead();
      s.fail(violation_kind::transport, "worker did not answer within the call timeout");
    }
    if (!ep_.seq_ok()) {
      protocol_fail(s, "channel sequence number tampered");
    }
    rpc::message m = ep_.read_message();
    if (!ep_.validate(m, allowed)) {
      protocol_fail(s, "malformed message from guest");
    }
    return m;
  }

  // Blocks until the in-flight call completes, servicing interleaved
  // callback traffic on this thread.
  wire_value pump_for_return(sandbox& s) {
    for (;;) {
      const rpc::message m =
          wait_and_read(s, {rpc::op_return, rpc::op_callback, rpc::op_abort});
      switch (m.opcode) {
        case rpc::op_return: {
          if (m.status != 0) {
            protocol_fail(s, "worker reported an invoke fault");
          }
          return m.args[0];
        }
        case rpc::op_callback: {
          rpc::message reply;
          reply.opcode = rpc::op_cbreturn;
          try {
            reply.args[0] =
                s.dispatch_trampoline(m.fn_or_slot, std::span<const wire_value>(m.args, m.argc));
            reply.argc = 1;
            reply.status = 0;
          } catch (...) {
            // Remember the host-side reason; the worker unwinds its guest
            // stack and answers with ABORT, at which point we rethrow it.
            pending_ = std::current_exception();
            reply.argc = 0;
            reply.status = 1;
          }
          ep_.post(reply);
          break;
        }
        case rpc::op_abort: {
          const auto code = static_cast<std::int32_t>(m.status);
          if (pending_) {
            std::exception_ptr p = pending_;
            pending_ = nullptr;
            std::rethrow_exception(p);
          }
          throw guest_unwind{s.id(), code};
        }
        default:
          protocol_fail(s, "unexpected opcode");
      }
    }
  }

  void spawn_worker() {
    const std::string worker =
        cfg_.worker_path.empty() ? detail::default_worker_path() : cfg_.worker_path;
    const std::string size_str = std::to_string(map_.size);
    const std::string budget_str = std::to_string(cfg_.spin_relax_budget);
    const std::string pause_str = std::to_string(cfg_.spin_pause_per_yield);
    std::vector<const char*> argv = {worker.c_str(),   "--shm",         shm_name_.c_str(),
                                     "--size",         size_str.c_str(), "--guest",
                                     cfg_.guest.c_str(), "--spin-budget", budget_str.c_str(),
                                     "--spin-pause",   pause_str.c_str(), nullptr};
    pid_t pid = -1;
    const int rc = ::posix_spawn(&pid, worker.c_str(), nullptr, nullptr,
                                 const_cast<char* const*>(argv.data()), environ);
    if (rc != 0) {
      ::shm_unlink(shm_name_.c_str());
      raise(violation_kind::creation, "cannot spawn worker at '" + worker + "'");
    }
    worker_pid_ = pid;

    // The worker posts a ready message once its mapping is up.
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
    const auto res = ep_.wait_turn(
        deadline, [&] { return !worker_exited(); }, /*spin_budget=*/0);
    if (res != rpc::wait_result::ready || !ep_.seq_ok()) {
      kill_worker();
      ::shm_unlink(shm_name_.c_str());
      raise(violation_kind::creation, "worker failed to initialize");
    }
    const rpc::message ready = ep_.read_message();
    if (ready.opcode != rpc::op_return) {
      kill_worker();
      ::shm_unlink(shm_name_.c_str());
      raise(violation_kind::creation, "worker sent an unexpected ready message");
    }
    ::shm_unlink(shm_name_.c_str());
    if (cfg_.pin_core >= 0) pin(cfg_.pin_core);
  }

  void kill_worker() {
    if (worker_pid_ > 0) {
      ::kill(worker_pid_, SIGKILL);
      int st = 0;
      ::waitpid(worker_pid_, &st, 0);
      worker_status_ = st;
      worker_pid_ = -1;
      worker_reaped_ = true;
    }
  }

  void teardown() {
    if (torn_down_) return;
    torn_down_ = true;
    if (worker_pid_ > 0 && !dead_) {
      rpc::message m;
      m.opcode = rpc::op_shutdown;
      ep_.post(m);
      // Give it a moment to exit cleanly, then force.
      for (int i = 0; i < 500; i++) {
        if (worker_exited()) break;
        ::usleep(1000);
      }
    }
    kill_worker();
    map_.unmap();
    dead_ = true;
  }

  sandbox_config cfg_;
  std::string shm_name_;
  detail::shm_mapping map_;
  rpc::endpoint ep_;
  pid_t worker_pid_ = -1;
  bool worker_reaped_ = false;
  int worker_status_ = 0;
  bool dead_ = false;
  bool torn_down_ = false;
  std::exception_ptr pending_;
  std::recursive_mutex channel_mu_;
};

}  // namespace sandcage
