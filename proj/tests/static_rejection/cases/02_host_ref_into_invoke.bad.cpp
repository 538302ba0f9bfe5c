// Pointers into host memory never cross the boundary.
#include "sandcage/sandbox.hpp"

int parse(sandcage::sandbox& s) {
  int header_state = 0;
  auto st = s.invoke<sandcage::tainted<std::uint32_t>>("rli_read_header", &header_state);
  return static_cast<int>(st.unsafe_unverified());
}
