#pragma once

#include <malloc.h>

namespace moby {

/// Training allocates and frees the same few-megabyte activation buffers
/// every step. With glibc defaults those go back to the kernel each time and
/// page faults cost about a fifth of a step; keep them in the heap instead.
inline void retain_freed_memory() {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
}

}  // namespace moby
