#pragma once

#if defined(__GLIBC__) || __has_include(<malloc.h>)
#include <malloc.h>
#endif

namespace sarseg {

// Training allocates and frees many large activation buffers per step.
// glibc hands blocks above 128 KiB to mmap and returns them on free, which
// costs a page fault per touched page on every step. Raising the thresholds
// keeps those blocks in the heap. Call once at program start.
inline void configure_allocator() {
#if defined(__GLIBC__) && defined(M_MMAP_THRESHOLD)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace sarseg
