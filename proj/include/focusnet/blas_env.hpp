#pragma once

#include <cblas.h>
#include <unistd.h>

#include <cstdlib>
#include <set>
#include <string>

namespace focusnet {

/// OpenBLAS picks its kernels from CPUID at load time. Under hypervisors that
/// mask the CPU model it falls back to generic SSE3 kernels, which are 3-5x
/// slower on these convolution shapes. When that happens on a CPU that
/// supports AVX2 or AVX-512, re-execute the program with OPENBLAS_CORETYPE
/// set. Does nothing when the variable is already set or detection worked.
inline void ensure_blas_kernels(char** argv) {
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
  static const std::set<std::string> generic{"Prescott", "Core2",   "Penryn", "Dunnington",
                                             "Nehalem",  "Katmai",  "Coppermine",
                                             "Northwood", "Banias", "Atom"};
  const char* core = openblas_get_corename();
  if (core == nullptr || !generic.contains(core)) return;
  const char* target = nullptr;
  if (__builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512dq") &&
      __builtin_cpu_supports("avx512bw") && __builtin_cpu_supports("avx512vl"))
    target = "SkylakeX";
  else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
    target = "Haswell";
  if (target == nullptr) return;
  ::setenv("OPENBLAS_CORETYPE", target, 1);
  ::execv("/proc/self/exe", argv);
  // execv only returns on failure; keep running with the generic kernels.
}

}  // namespace focusnet
