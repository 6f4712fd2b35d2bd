#include "debias_mf/parallel.hpp"

#include <cstdlib>
#include <string>

namespace debias_mf {

int default_threads() {
  if (const char* env = std::getenv("DEBIAS_MF_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  return 1;
}

}  // namespace debias_mf
