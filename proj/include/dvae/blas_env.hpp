#pragma once

// OpenBLAS picks its compute kernels from a CPUID model table at library
// init.  CPUs newer than the table (common on virtual machines) fall back to
// a generic kernel that is several times slower than the AVX-512 one the
// hardware can actually run.  OPENBLAS_CORETYPE overrides the lookup, but it
// must be in the environment before the library initializes, which happens
// in a constructor when OpenBLAS is linked statically.
//
// This header plants our own constructor that publishes the override first.
// Include it from exactly one translation unit per executable (the one
// defining main).  Ordering notes, learned the hard way:
//   - it only works with the static libopenblas archive: with the shared
//     library both constructors run before libc installs the real environ,
//     so any setenv made there is discarded;
//   - the executable's objects precede the archive on the link line, so a
//     plain (unprioritized) constructor here runs before the library's;
//   - __builtin_cpu_supports is unreliable this early (its support table is
//     itself filled by a constructor), hence raw cpuid;
//   - setenv with overwrite=0 keeps any value the user exported themselves.

#include <cpuid.h>

#include <cstdlib>

namespace dvae {

inline bool cpu_has_avx512_core() {
  unsigned a, b, c, d;
  if (!__get_cpuid(1, &a, &b, &c, &d)) return false;
  if (!(c & (1u << 27))) return false;  // OSXSAVE
  unsigned xcr0_lo, xcr0_hi;
  __asm__("xgetbv" : "=a"(xcr0_lo), "=d"(xcr0_hi) : "c"(0));
  if ((xcr0_lo & 0xE6u) != 0xE6u) return false;  // XMM/YMM/ZMM state enabled
  if (!__get_cpuid_count(7, 0, &a, &b, &c, &d)) return false;
  const unsigned need = (1u << 16)    // AVX512F
                        | (1u << 17)  // AVX512DQ
                        | (1u << 30)  // AVX512BW
                        | (1u << 31); // AVX512VL
  return (b & need) == need;
}

}  // namespace dvae

namespace {

__attribute__((constructor)) void dvae_blas_env_hint() {
  if (dvae::cpu_has_avx512_core()) {
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
  }
}

}  // namespace
