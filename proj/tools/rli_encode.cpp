// Copyright the sandcage authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-data generator: packs a raw byte file into the RLI container.
//
//   rli-encode <raw> <w> <h> -o <file>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "sandcage/guest/rli.hpp"

int main(int argc, char** argv) {
  std::string raw_path, out_path;
  std::uint64_t w = 0, h = 0;
  std::vector<std::string> positional;
  for (int i = 1; i < argc; i++) {
    const std::string arg = argv[i];
    if (arg == "-o" && i + 1 < argc) {
      out_path = argv[++i];
    } else {
      positional.push_back(arg);
    }
  }
  if (positional.size() != 3 || out_path.empty()) {
    std::fprintf(stderr, "usage: rli-encode <raw> <w> <h> -o <file>\n");
    return 2;
  }
  raw_path = positional[0];
  w = std::strtoull(positional[1].c_str(), nullptr, 10);
  h = std::strtoull(positional[2].c_str(), nullptr, 10);

  std::ifstream in(raw_path, std::ios::binary);
  if (!in) {
    std::fprintf(stderr, "rli-encode: cannot open '%s'\n", raw_path.c_str());
    return 2;
  }
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (raw.size() != w * h) {
    std::fprintf(stderr, "rli-encode: raw size %zu does not match %llu x %llu\n", raw.size(),
                 static_cast<unsigned long long>(w), static_cast<unsigned long long>(h));
    return 2;
  }

  const auto encoded = sandcage::rli::encode(raw, static_cast<std::uint32_t>(w),
                                             static_cast<std::uint32_t>(h));
  std::ofstream out(out_path, std::ios::binary);
  if (!out) {
    std::fprintf(stderr, "rli-encode: cannot write '%s'\n", out_path.c_str());
    return 2;
  }
  out.write(reinterpret_cast<const char*>(encoded.data()),
            static_cast<std::streamsize>(encoded.size()));
  return out.good() ? 0 : 2;
}
