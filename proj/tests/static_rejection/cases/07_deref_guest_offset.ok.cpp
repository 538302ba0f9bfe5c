#include "sandcage/memory.hpp"

std::uint8_t first_byte(sandcage::guest_ref<std::uint8_t> buf) {
  return buf.deref().read().unsafe_unverified();
}
