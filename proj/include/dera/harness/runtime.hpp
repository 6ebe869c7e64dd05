#pragma once

#include <cstdlib>
#include <string_view>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dera {

/// Keeps glibc from returning freed graph buffers to the kernel after every
/// step; the autodiff tape allocates and drops many medium-sized blocks.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// DERA_DETERMINISTIC=0 opts out of bit-exact execution. Every kernel here
/// is single-threaded with a fixed reduction order, so both settings
/// currently run the same code.
inline bool deterministic_mode() {
  const char* v = std::getenv("DERA_DETERMINISTIC");
  return !(v && std::string_view(v) == "0");
}

}  // namespace dera
