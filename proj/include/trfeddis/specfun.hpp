#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <stdexcept>

namespace trfeddis::specfun {

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// ln Gamma(x) for x > 0.
double lgamma(double x);

/// psi(x) = d/dx ln Gamma(x) for x > 0.
double digamma(double x);

/// psi'(x) for x > 0.
double trigamma(double x);

/// ln(1 + e^x) without overflow.
double softplus(double x);

/// d/dx softplus(x), i.e. the logistic function.
double sigmoid(double x);

/// What a stream is used for. Combined with an owner id to form a stream key,
/// so each client and each corruption pass draws from its own sequence.
enum class StreamPurpose : std::uint64_t {
  kInit = 1,
  kData = 2,
  kShuffle = 3,
  kCorruption = 4,
  kTest = 5,
};

constexpr std::uint64_t stream_key(StreamPurpose purpose, std::uint64_t owner) {
  return (static_cast<std::uint64_t>(purpose) << 48) ^ owner;
}

/// Counter-based random stream (Philox4x32-10). The 128-bit counter holds the
/// stream id in its upper half and the draw index in its lower half; the key
/// is the seed. Equal (seed, stream_id) pairs give identical sequences.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on (0, 1].
  double uniform_pos();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  result_type operator()() { return next_u64(); }
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_ = 0;
  std::array<std::uint64_t, 2> block_{};
  int used_ = 2;
};

/// One N(0,1) draw (Box-Muller, cosine branch only, two uniforms per draw).
double standard_normal(RngStream& rng);

}  // namespace trfeddis::specfun
