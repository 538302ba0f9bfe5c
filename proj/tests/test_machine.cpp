// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch.hpp>

#include <cstdint>
#include <limits>

#include "sandcage/machine.hpp"

using namespace sandcage;

TEST_CASE("the guest model is ILP32 little-endian") {
  CHECK(ilp32_le.int_bytes == 4);
  CHECK(ilp32_le.long_bytes == 4);
  CHECK(ilp32_le.address_bytes == 4);
  CHECK(ilp32_le.little_endian);
}

TEST_CASE("narrowing host scalars is lossless or rejected, never silent") {
  // Values at the guest 32-bit boundary narrow fine.
  CHECK(to_guest_scalar(std::int64_t{std::numeric_limits<std::int32_t>::max()}).bits ==
        0x7FFFFFFFu);
  CHECK(to_guest_scalar(std::int64_t{std::numeric_limits<std::int32_t>::min()}).bits ==
        0x80000000u);
  CHECK(to_guest_scalar(std::uint64_t{0xFFFFFFFFull}).bits == 0xFFFFFFFFu);

  // One past the boundary is width-overflow, not a wrap.
  CHECK_THROWS_AS(to_guest_scalar(std::int64_t{std::numeric_limits<std::int32_t>::max()} + 1),
                  violation_error);
  CHECK_THROWS_AS(to_guest_scalar(std::int64_t{std::numeric_limits<std::int32_t>::min()} - 1),
                  violation_error);
  CHECK_THROWS_AS(to_guest_scalar(std::uint64_t{1} << 32), violation_error);
  CHECK_THROWS_AS(to_guest_scalar(std::int64_t{1} << 40), violation_error);
}

TEST_CASE("scalar kinds map by width and signedness") {
  CHECK(to_guest_scalar(std::int32_t{-5}).kind == wire_kind::i32);
  CHECK(to_guest_scalar(std::uint16_t{7}).kind == wire_kind::u32);
  CHECK(to_guest_scalar(std::int8_t{-1}).kind == wire_kind::i32);
  CHECK(to_guest_scalar(1.5f).kind == wire_kind::f32);
  CHECK(to_guest_scalar(2.5).kind == wire_kind::f64);
}

TEST_CASE("widening back to the host reverses the translation") {
  const auto neg = to_guest_scalar(std::int32_t{-123});
  CHECK(from_guest_scalar<std::int64_t>(neg) == -123);  // sign extends
  CHECK(from_guest_scalar<std::int32_t>(neg) == -123);

  const auto big = to_guest_scalar(std::uint32_t{0xFFFFFFFFu});
  CHECK(from_guest_scalar<std::uint64_t>(big) == 0xFFFFFFFFull);

  const auto f = to_guest_scalar(3.25f);
  CHECK(from_guest_scalar<float>(f) == 3.25f);
  const auto d = to_guest_scalar(-7.5);
  CHECK(from_guest_scalar<double>(d) == -7.5);

  wire_value junk{wire_kind::none, 0};
  CHECK_THROWS_AS(from_guest_scalar<std::uint32_t>(junk), violation_error);
}

TEST_CASE("wire kind validity covers exactly the defined kinds") {
  CHECK(wire_kind_valid(0));
  CHECK(wire_kind_valid(8));
  CHECK_FALSE(wire_kind_valid(9));
  CHECK_FALSE(wire_kind_valid(0xFFFFFFFF));
}
