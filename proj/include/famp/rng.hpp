#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace famp {

// Mixes a list of integers (seed, epoch, slot, ...) into one 64-bit stream
// key. Streams keyed by distinct tuples are independent for all practical
// purposes, which lets any worker reconstruct its stream without sharing
// generator state.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> key);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits; identical on every platform.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Index drawn from a probability vector (need not be exactly normalized).
  std::size_t categorical(std::span<const double> probs);
  bool bernoulli(double p) { return uniform() < p; }
  // Raw 64 bits, e.g. to key a substream.
  std::uint64_t bits() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace famp
