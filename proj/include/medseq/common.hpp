#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace medseq {

// Time constants. A "month" is fixed at 30 days so that the repeatable
// top time bucket (6 months) has an exact integer second count.
namespace duration {
constexpr std::int64_t minute = 60;
constexpr std::int64_t hour = 60 * minute;
constexpr std::int64_t day = 24 * hour;
constexpr std::int64_t month = 30 * day;
constexpr std::int64_t year = 365 * day;
constexpr std::int64_t six_months = 6 * month;
}  // namespace duration

/// Parses "90", "30m", "12h", "90d", "24mo", "2y" into seconds.
/// Bare numbers are seconds; "m" is minutes, "mo" is 30-day months.
std::int64_t parse_duration(const std::string& text);

class MedseqError : public std::runtime_error {
 public:
  explicit MedseqError(const std::string& what) : std::runtime_error(what) {}
};

/// Missing or unreadable/unwritable file.
class FileError : public MedseqError {
 public:
  explicit FileError(const std::string& what) : MedseqError(what) {}
};

/// Unrecognized magic or version in a binary artifact.
class SchemaError : public MedseqError {
 public:
  explicit SchemaError(const std::string& what) : MedseqError(what) {}
};

// Deterministic RNG wrapper. std::mt19937_64 output is pinned by the
// standard; the derived draws below avoid std::*_distribution, whose
// algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, bound). bound must be positive.
  std::uint64_t below(std::uint64_t bound) {
    // Rejection sampling on the top bits keeps the draw unbiased.
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = engine_();
      if (r >= threshold) return r % bound;
    }
  }

  std::int64_t range(std::int64_t lo, std::int64_t hi_inclusive) {
    return lo + static_cast<std::int64_t>(
                    below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Standard normal via Box-Muller (no cached spare, keeps state simple).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Days until a per-day Bernoulli(p) hazard first fires, starting today
  /// (0 means it fires today). Returns a large sentinel when p == 0.
  std::int64_t geometric_days(double p) {
    if (p <= 0.0) return std::numeric_limits<std::int64_t>::max() / 4;
    if (p >= 1.0) return 0;
    double u = uniform01();
    while (u <= 0.0) u = uniform01();
    return static_cast<std::int64_t>(std::floor(std::log(u) / std::log1p(-p)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Stream-splitting helper: derives an independent seed from (seed, id).
/// SplitMix64 finalizer; avalanches so consecutive ids do not correlate.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t id) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (id + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// FNV-1a over raw bytes; used to fingerprint serialized vocabularies.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

std::vector<std::string> split(const std::string& s, char sep);

}  // namespace medseq
