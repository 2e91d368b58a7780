#pragma once

#include <cstddef>
#include <cstdlib>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "prototransfer/errors.hpp"

namespace prototransfer {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// system after every op. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// `requested` if positive, else PROTO_THREADS, else 1.
inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PROTO_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (*end != '\0' || v == 0) {
      throw ConfigError("PROTO_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return v;
  }
  return 1;
}

}  // namespace prototransfer
