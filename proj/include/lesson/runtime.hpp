#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace lesson {

/// Keeps large freed blocks in the heap so per-batch activation buffers are
/// reused instead of being mapped (and page-faulted) again on every layer.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

}  // namespace lesson
