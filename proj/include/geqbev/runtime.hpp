#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace geqbev {

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS; training reallocates the same sizes every step and otherwise pays
/// a page fault per fresh page.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
#endif
}

}  // namespace geqbev
