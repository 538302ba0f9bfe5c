// Arithmetic derived from tainted data cannot drive a host loop unchecked.
#include "sandcage/taint.hpp"

std::uint32_t sum_rows(sandcage::tainted<std::uint32_t> height) {
  auto rows = height + 1u;
  std::uint32_t sum = 0;
  for (std::uint32_t i = 0; i < rows; i++) {
    sum += i;
  }
  return sum;
}
