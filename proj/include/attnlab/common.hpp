#pragma once

// Shared error type, seeded random streams and checksums.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

namespace attnlab {

inline constexpr std::string_view kVersion = "0.3.1";

enum class ErrorCode {
  InvalidArgument,
  EmptyInput,
  UnbalancedBrackets,
  MissingOperator,
  StrayToken,
  TooFewOperands,
  RootIsLeaf,
  SpecInfeasible,
  BothPlayersWin,
  NoWinner,
  AllKeysMasked,
  UnknownToken,
  SequenceTooLong,
  NonFiniteLoss,
  InvalidLayerIndex,
  DatasetEmpty,
  RowMassZero,
  NotRowStochastic,
  AnswerTokenAbsent,
  IoFailure,
  ChecksumMismatch,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::UnbalancedBrackets: return "UnbalancedBrackets";
    case ErrorCode::MissingOperator: return "MissingOperator";
    case ErrorCode::StrayToken: return "StrayToken";
    case ErrorCode::TooFewOperands: return "TooFewOperands";
    case ErrorCode::RootIsLeaf: return "RootIsLeaf";
    case ErrorCode::SpecInfeasible: return "SpecInfeasible";
    case ErrorCode::BothPlayersWin: return "BothPlayersWin";
    case ErrorCode::NoWinner: return "NoWinner";
    case ErrorCode::AllKeysMasked: return "AllKeysMasked";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InvalidLayerIndex: return "InvalidLayerIndex";
    case ErrorCode::DatasetEmpty: return "DatasetEmpty";
    case ErrorCode::RowMassZero: return "RowMassZero";
    case ErrorCode::NotRowStochastic: return "NotRowStochastic";
    case ErrorCode::AnswerTokenAbsent: return "AnswerTokenAbsent";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library. `index()` carries the offending
/// token / row / step position when the error has one.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what, std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives a child seed from a parent seed and a label, so that every
/// consumer of randomness gets its own independent stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ splitmix64(fnv1a64(label)));
}

/// Seeded random stream. The engine output is fixed by the standard; the
/// distributions are implemented here so streams are portable across
/// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  Rng derive(std::string_view label) const { return Rng(derive_seed(seed_, label)); }

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

inline std::uint32_t crc32_bytes(std::span<const unsigned char> bytes, std::uint32_t crc = 0) {
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  uLong c = crc;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::uint32_t crc32_string(std::string_view s, std::uint32_t crc = 0) {
  return crc32_bytes({reinterpret_cast<const unsigned char*>(s.data()), s.size()}, crc);
}

inline std::string hex32(std::uint32_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(8, '0');
  for (int i = 7; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return out;
}

}  // namespace attnlab
