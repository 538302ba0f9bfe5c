// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch.hpp>

#include <cstdio>
#include <random>
#include <thread>
#include <vector>

#include "sandcage/sandcage.hpp"

using namespace sandcage;

namespace {

pool_config small_pool(std::uint32_t image_threshold = 10) {
  pool_config cfg;
  cfg.image_threshold = image_threshold;
  cfg.sandbox.backend = backend_kind::emusfi;
  cfg.sandbox.region_size = 1u << 20;
  return cfg;
}

}  // namespace

TEST_CASE("acquire creates on miss and reuses the same instance for a key") {
  sandbox_pool pool(small_pool());
  const sandbox_key key{"rli", "https://example.test", "image/rli"};
  sandbox_id first_id;
  {
    auto lease = pool.acquire(key);
    first_id = lease.get().id();
  }
  {
    auto lease = pool.acquire(key);
    CHECK(lease.get().id() == first_id);  // same sandbox identity
  }
  CHECK(pool.live_count() == 1);
}

TEST_CASE("keys differing in any field never share an instance") {
  sandbox_pool pool(small_pool());
  auto a = pool.acquire({"rli", "https://a.test", "image/rli"});
  auto b = pool.acquire({"rli", "https://b.test", "image/rli"});
  auto c = pool.acquire({"rli", "https://a.test", "application/gzip"});
  auto d = pool.acquire({"zlib", "https://a.test", "image/rli"});
  CHECK(a.get().id() != b.get().id());
  CHECK(a.get().id() != c.get().id());
  CHECK(a.get().id() != d.get().id());
}

TEST_CASE("100 distinct image keys leave at most the threshold idle") {
  sandbox_pool pool(small_pool(10));
  for (int i = 0; i < 100; i++) {
    auto lease = pool.acquire({"rli", "https://origin" + std::to_string(i), "image/rli"});
  }
  CHECK(pool.idle_count(content_class::image) <= 10);
  CHECK(pool.live_count() <= 10);
}

TEST_CASE("media sandboxes are destroyed immediately on release") {
  sandbox_pool pool(small_pool());
  {
    auto lease = pool.acquire({"vorbis", "https://a.test", "audio/ogg"});
    CHECK(pool.live_count() == 1);
  }
  CHECK(pool.live_count() == 0);
  {
    auto lease = pool.acquire({"vpx", "https://a.test", "video/webm"});
  }
  CHECK(pool.live_count() == 0);
}

TEST_CASE("eviction removes the least recently used idle instance") {
  sandbox_pool pool(small_pool(2));
  const sandbox_key k1{"rli", "o1", "image/rli"};
  const sandbox_key k2{"rli", "o2", "image/rli"};
  const sandbox_key k3{"rli", "o3", "image/rli"};
  sandbox_id id1, id2;
  {
    auto l1 = pool.acquire(k1);
    id1 = l1.get().id();
  }
  {
    auto l2 = pool.acquire(k2);
    id2 = l2.get().id();
  }
  {
    auto l1b = pool.acquire(k1);  // k1 becomes most recently used
    CHECK(l1b.get().id() == id1);
  }
  {
    auto l3 = pool.acquire(k3);
  }
  // Threshold 2: k2 (least recently used idle) was evicted, k1 retained.
  CHECK(pool.live_count() == 2);
  auto l1c = pool.acquire(k1);
  CHECK(l1c.get().id() == id1);
  auto l2b = pool.acquire(k2);
  CHECK(l2b.get().id() != id2);  // fresh instance after eviction
}

TEST_CASE("randomized acquire/release stress keeps the live-count bound") {
  sandbox_pool pool(small_pool(10));
  std::mt19937 rng(99);
  std::vector<sandbox_pool::lease> held;
  for (int op = 0; op < 2000; op++) {
    if (held.size() < 4 && (held.empty() || rng() % 2 == 0)) {
      const int k = static_cast<int>(rng() % 100);
      held.push_back(pool.acquire({"rli", "origin" + std::to_string(k), "image/rli"}));
    } else {
      held.erase(held.begin() + static_cast<long>(rng() % held.size()));
    }
    REQUIRE(pool.live_count() <= 10 + held.size());
  }
  held.clear();
  CHECK(pool.live_count() <= 10);
}

TEST_CASE("concurrent acquire and release from many threads") {
  sandbox_pool pool(small_pool(5));
  std::atomic<bool> failed{false};
  auto work = [&](int seed) {
    std::mt19937 rng(seed);
    for (int i = 0; i < 200; i++) {
      try {
        auto lease = pool.acquire(
            {"rli", "origin" + std::to_string(rng() % 20), "image/rli"});
        if (!lease.get().alive()) failed = true;
      } catch (...) {
        failed = true;
      }
    }
  };
  std::thread a(work, 1), b(work, 2), c(work, 3);
  a.join();
  b.join();
  c.join();
  CHECK_FALSE(failed);
  CHECK(pool.idle_count(content_class::image) <= 5);
}

TEST_CASE("sync hint maps to sync modes on process backends only") {
  sandbox_pool pool(small_pool());
  auto lease = pool.acquire({"rli", "o", "image/rli"});
  CHECK_NOTHROW(lease.sync_hint(work_hint::bulk));  // no-op on emusfi

  pool_config pc = small_pool();
  pc.sandbox.backend = backend_kind::process;
  sandbox_pool proc_pool(pc);
  auto please = proc_pool.acquire({"rli", "o", "image/rli"});
  please.sync_hint(work_hint::bulk);
  CHECK(please.get().current_sync_mode() == sync_mode::event);
  please.sync_hint(work_hint::latency);
  CHECK(please.get().current_sync_mode() == sync_mode::spin);
}

TEST_CASE("pool config file parsing") {
  const char* path = "/tmp/sandcage_pool_test.cfg";
  {
    std::FILE* f = std::fopen(path, "w");
    REQUIRE(f);
    std::fputs("# pool settings\n"
               "threshold.image = 4\n"
               "threshold.decompression = 7\n"
               "backend = emusfi\n"
               "region_size = 2097152\n",
               f);
    std::fclose(f);
  }
  const auto cfg = pool_config::from_file(path);
  CHECK(cfg.image_threshold == 4);
  CHECK(cfg.decompression_threshold == 7);
  CHECK(cfg.sandbox.backend == backend_kind::emusfi);
  CHECK(cfg.sandbox.region_size == 2097152);

  {
    std::FILE* f = std::fopen(path, "w");
    REQUIRE(f);
    std::fputs("nonsense = 1\n", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(pool_config::from_file(path), violation_error);
  CHECK_THROWS_AS(pool_config::from_file("/nonexistent/pool.cfg"), violation_error);
  std::remove(path);
}

TEST_CASE("pool-routed decode keys the sandbox by origin and reuses it") {
  pool_config cfg = small_pool();
  sandbox_pool pool(cfg);
  std::mt19937 rng(314);
  rli::image img;
  img.width = 24;
  img.height = 12;
  img.pixels.resize(img.width * img.height);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 4);
  const auto encoded = rli::encode(img.pixels, img.width, img.height);

  const auto a = decode_image(pool, "https://one.test", encoded);
  CHECK(a.img.pixels == img.pixels);
  const auto b = decode_image(pool, "https://two.test", encoded);
  CHECK(b.img.pixels == img.pixels);
  CHECK(pool.live_count() == 2);  // distinct origins, distinct sandboxes

  // Same origin again: the pooled instance is reused, not recreated.
  decode_image(pool, "https://one.test", encoded);
  CHECK(pool.live_count() == 2);
}

TEST_CASE("content classes derive from the content-type prefix") {
  CHECK(classify_content("image/rli") == content_class::image);
  CHECK(classify_content("image/png") == content_class::image);
  CHECK(classify_content("audio/ogg") == content_class::media);
  CHECK(classify_content("video/webm") == content_class::media);
  CHECK(classify_content("application/gzip") == content_class::decompression);
  CHECK(classify_content("text/html") == content_class::decompression);
}
