#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>

namespace hetsae {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for the stream identified by `key` under `base`. Streams derived this
/// way depend only on (base, key), never on the order in which they are made,
/// which is what keeps replicate studies independent of thread scheduling.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t key) noexcept {
  return mix64(mix64(base) ^ mix64(key ^ 0xD1B54A32D192ED03ULL));
}

/// Anything the samplers can draw from. `log_gamma(shape, rate)` returns the
/// log of a Gamma(shape, rate) variate; sampling on the log scale avoids
/// underflow for the small shapes that Gaussian data rows produce.
template <typename S>
concept RandomStream = requires(S& s, double a, double b) {
  { s.uniform() } -> std::convertible_to<double>;
  { s.normal() } -> std::convertible_to<double>;
  { s.log_gamma(a, b) } -> std::convertible_to<double>;
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on the open interval (0, 1).
  double uniform() {
    double u = 0.0;
    do {
      u = unif_(engine_);
    } while (u == 0.0);
    return u;
  }

  double normal() { return normal_(engine_); }

  double log_gamma(double shape, double rate) {
    if (shape >= 1.0) {
      std::gamma_distribution<double> g(shape, 1.0);
      return std::log(g(engine_)) - std::log(rate);
    }
    // Shape boosted by one: G(a) = G(a + 1) * U^(1/a).
    std::gamma_distribution<double> g(shape + 1.0, 1.0);
    const double boosted = std::log(g(engine_));
    return boosted + std::log(uniform()) / shape - std::log(rate);
  }

  double gamma(double shape, double rate) { return std::exp(log_gamma(shape, rate)); }

  /// Inverse-gamma with shape and scale.
  double inverse_gamma(double shape, double scale) { return 1.0 / gamma(shape, scale); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

static_assert(RandomStream<Rng>);

}  // namespace hetsae
