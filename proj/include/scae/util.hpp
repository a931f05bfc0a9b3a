#pragma once

// Seeded randomness and little-endian binary IO shared by the model files.

#include <bit>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace scae {

using Rng = std::mt19937_64;

// 53-bit uniform in [0,1). Spelled out so draws do not depend on the
// standard library's distribution implementation.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Unbiased integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[uniform_index(rng, i)]);
  }
}

// SplitMix64 finalizer; derives independent per-item seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline std::uint8_t get_u8(std::istream& is) {
  const int c = is.get();
  if (c == std::char_traits<char>::eof()) throw FormatError("unexpected end of file");
  return static_cast<std::uint8_t>(c);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_u8(is)) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(get_u8(is)) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4];
  if (!is.read(buf, 4) || std::string(buf, 4) != std::string(magic, 4)) {
    throw FormatError(std::string("bad magic, expected \"") + magic + "\"");
  }
}

}  // namespace io
}  // namespace scae
