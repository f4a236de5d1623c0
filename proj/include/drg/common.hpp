#ifndef DRG_COMMON_HPP_
#define DRG_COMMON_HPP_

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace drg {

// Error taxonomy; the CLI maps these onto exit codes.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic RNG. splitmix64-seeded xoshiro-style stream with hand-rolled
// normal sampling, so identical seeds give identical streams regardless of
// standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    state_ = seed;
    // warm up so nearby seeds diverge
    for (int i = 0; i < 4; ++i) next_u64();
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // modulo bias is irrelevant at our scales but rejection is cheap
    uint64_t threshold = (~n + 1) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // standard normal, Box-Muller (one value per call, no cached pair)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_ = 0;
};

// Mix a stream id into a seed so sub-components get independent streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  return z ^ (z >> 27);
}

// ---- string helpers ----

std::vector<std::string> split_ws(std::string_view line);
std::vector<std::string> split_on(std::string_view s, char sep);
std::string join(std::span<const std::string> tokens, std::string_view sep);
std::string lowercase(std::string_view s);
std::string trim(std::string_view s);

// shortest round-trippable decimal form, deterministic across runs
std::string format_double(double v);

// ---- file helpers ----

std::string read_text_file(const std::string& path);  // throws DataError
void write_text_file(const std::string& path, std::string_view content);
bool file_exists(const std::string& path);

// FNV-1a over file bytes, as "fnv1a:%016x"; used for artifact digests
std::string file_digest(const std::string& path);
uint64_t fnv1a(std::string_view bytes);

// ---- small math ----

// in place, numerically stable
template <typename S>
void softmax_inplace(std::span<S> v) {
  S mx = v[0];
  for (S x : v) mx = x > mx ? x : mx;
  S sum = 0;
  for (S& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (S& x : v) x /= sum;
}

}  // namespace drg

#endif  // DRG_COMMON_HPP_
