#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

namespace fwdalloc {

// Purpose tags keep streams that share (step, datum, query) apart.
enum class Purpose : std::uint64_t {
  init = 1,
  shuffle,
  data,
  trace_query,
  query,
  allocator_grad,
  allocation,
  bernoulli,
  selftest,
  step,
};

namespace detail {

inline constexpr std::uint64_t golden_gamma = 0x9E3779B97F4A7C15ULL;

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Counter-based random stream keyed by a seed and a path of labels.
///
/// The key is a hash of (seed, path); draw k is mix64(key + (k + 1) * gamma),
/// i.e. SplitMix64 run in counter mode. Child streams hash an extra label into
/// the key, so any (step, datum, query, purpose) coordinate can be addressed
/// directly without advancing a shared generator. Two streams with equal
/// (seed, path) produce equal sequences regardless of the order in which they
/// are created or the thread they run on.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t seed = 0) : seed_(seed), key_(detail::mix64(seed ^ 0x5EEDULL)) {}

  RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) : RngStream(seed) {
    for (auto label : path) absorb(label);
  }

  [[nodiscard]] RngStream child(std::uint64_t label) const {
    RngStream out = *this;
    out.absorb(label);
    return out;
  }

  [[nodiscard]] RngStream child(Purpose purpose) const {
    return child(static_cast<std::uint64_t>(purpose));
  }

  template <typename... Labels>
  [[nodiscard]] RngStream at(Labels... labels) const {
    RngStream out = *this;
    (out.absorb(static_cast<std::uint64_t>(labels)), ...);
    return out;
  }

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] const std::vector<std::uint64_t>& path() const noexcept { return path_; }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::golden_gamma);
  }

  std::uint64_t operator()() noexcept { return next_u64(); }
  static constexpr std::uint64_t min() noexcept { return 0; }
  static constexpr std::uint64_t max() noexcept { return ~std::uint64_t{0}; }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n), n > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; the tiny bias at n ~ 2^64 is irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  void fill_normal(std::vector<double>& out) noexcept {
    for (auto& v : out) v = normal();
  }

  [[nodiscard]] std::vector<double> normal_vector(std::size_t n) {
    std::vector<double> out(n);
    fill_normal(out);
    return out;
  }

 private:
  void absorb(std::uint64_t label) {
    path_.push_back(label);
    key_ = detail::mix64(key_ ^ detail::mix64(label + detail::golden_gamma * (path_.size() + 1)));
    counter_ = 0;
    has_spare_ = false;
  }

  std::uint64_t seed_;
  std::uint64_t key_;
  std::vector<std::uint64_t> path_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates with RngStream so permutations do not depend on the standard
/// library's shuffle implementation.
template <typename T>
void shuffle(std::vector<T>& items, RngStream& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace fwdalloc
