// Host control flow must not branch on unvalidated guest data.
#include "sandcage/taint.hpp"

int main() {
  sandcage::tainted<bool> header_ok(true);
  if (header_ok) {  // rejected: tainted<bool> does not convert to bool
    return 1;
  }
  return 0;
}
