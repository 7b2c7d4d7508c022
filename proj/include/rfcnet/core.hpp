// Shared basics: error types, tensor shape, deterministic RNG, debug toggles.
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace rfc {

/// Dimension/shape mismatch between tensors or kernels.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid argument value (bad config, out-of-range class id, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation invoked in an invalid state (no recorded graph, missing grad).
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data (checkpoints, rasters).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem-level failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense rank-4 extent: batch, channels, height, width.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;

  std::string to_string() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Deterministic RNG. Uniform draws bypass std:: distributions so the
/// stream is identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

 private:
  std::mt19937_64 eng_;
};

namespace detail {
inline bool& debug_checks_flag() {
  static bool flag = false;
  return flag;
}
}  // namespace detail

/// When enabled, every forward op scans its output for non-finite values.
inline void set_debug_checks(bool on) { detail::debug_checks_flag() = on; }
inline bool debug_checks_enabled() { return detail::debug_checks_flag(); }

}  // namespace rfc
