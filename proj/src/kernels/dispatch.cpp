#include <atomic>
#include <cstdlib>
#include <string>

#include "debias_mf/kernels.hpp"

namespace debias_mf::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* initial_table() {
  const KernelTable* simd = cpu_has_avx2() ? avx2_table() : nullptr;
  if (const char* env = std::getenv("DEBIAS_MF_SIMD")) {
    const std::string want(env);
    if (want == "scalar") return &scalar_table();
  }
  return simd != nullptr ? simd : &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{initial_table()};
  return table;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

bool select(std::string_view name) {
  if (name == "scalar") {
    current().store(&scalar_table(), std::memory_order_release);
    return true;
  }
  if (name == "avx2" && cpu_has_avx2() && avx2_table() != nullptr) {
    current().store(avx2_table(), std::memory_order_release);
    return true;
  }
  return false;
}

}  // namespace debias_mf::kernels
