#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace enrt {

// Training loops cycle multi-megabyte buffers every optimizer step; with
// glibc defaults those round-trip through mmap/munmap and dominate the
// runtime. Raising the thresholds keeps them on the heap. One-time, safe to
// call from anywhere.
inline void tune_allocator_for_numerics() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

// Failure contracts. Every throwing operation names which of these it can
// raise; anything else escaping a module is a bug.
struct NoConvergence : std::runtime_error { using std::runtime_error::runtime_error; };
struct SingularNetwork : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericalBlowup : std::runtime_error { using std::runtime_error::runtime_error; };
struct ShapeMismatch : std::runtime_error { using std::runtime_error::runtime_error; };
struct NonScalarOutput : std::runtime_error { using std::runtime_error::runtime_error; };
struct LengthMismatch : std::runtime_error { using std::runtime_error::runtime_error; };
struct WidthMismatch : std::runtime_error { using std::runtime_error::runtime_error; };
struct SurrogateMissing : std::runtime_error { using std::runtime_error::runtime_error; };
struct EmptyInput : std::runtime_error { using std::runtime_error::runtime_error; };
struct EmptyTrainingSet : std::runtime_error { using std::runtime_error::runtime_error; };
struct SchemaMismatch : std::runtime_error { using std::runtime_error::runtime_error; };
struct IndexOutOfRange : std::runtime_error { using std::runtime_error::runtime_error; };
struct SampleNotFound : std::runtime_error { using std::runtime_error::runtime_error; };
struct DivisionByZero : std::runtime_error { using std::runtime_error::runtime_error; };

// Shortest decimal representation that round-trips to the same binary64.
// Used everywhere a double lands in a text artifact so that reruns are
// byte-identical and parsed values are exact.
inline std::string fmt_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Probability -> hard label, tie at 0.5 counts as stable (1).
inline int hard_label(double p) { return p >= 0.5 ? 1 : 0; }

constexpr int kFormatVersion = 1;

}  // namespace enrt
