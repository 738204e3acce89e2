#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace sslwb {

// All randomness in the library flows through streams derived from a root
// seed plus a list of tags (strings and integers). Two consumers that derive
// with the same tags see the same stream no matter which other consumers
// exist or in which order they run. This is what makes corpus generation,
// augmentation workers and the training methods reproducible and mutually
// independent.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_tag(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

inline std::uint64_t mix_tag(std::uint64_t h, std::string_view s) {
  for (unsigned char c : s) h = mix_tag(h, static_cast<std::uint64_t>(c) | 0x100);
  return mix_tag(h, 0xfeedULL ^ s.size());
}

inline std::uint64_t derive_seed(std::uint64_t root) { return splitmix64(root); }

template <class Tag, class... Rest>
inline std::uint64_t derive_seed(std::uint64_t root, Tag&& tag, Rest&&... rest) {
  std::uint64_t h;
  if constexpr (std::is_convertible_v<Tag, std::string_view>)
    h = mix_tag(root, std::string_view(tag));
  else
    h = mix_tag(root, static_cast<std::uint64_t>(tag));
  return derive_seed(h, std::forward<Rest>(rest)...);
}

/// Deterministic random stream. The engine (mt19937_64) is fully specified by
/// the standard and the scaling below avoids the implementation-defined
/// std::*_distribution sequences, so outputs are stable across toolchains.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed) {}

  template <class... Tags>
  static RngStream derived(std::uint64_t root, Tags&&... tags) {
    return RngStream(derive_seed(root, std::forward<Tags>(tags)...));
  }

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Lemire multiply-shift; n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller (portable, unlike std::normal_distribution).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// In-place Fisher-Yates shuffle.
  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace sslwb
