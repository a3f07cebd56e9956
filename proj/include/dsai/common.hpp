#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsai {

// Scalar type for all tensor math. 64-bit keeps gradient checks and the
// determinism contract tight; the model is small enough that doubles are
// not a throughput problem on CPU.
using Real = double;

// Extents of two tensors do not line up (matmul inner dims, axis bounds, ...).
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A configuration value is invalid or inconsistent with the model build.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input data (file contents, labels out of range, length mismatch).
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// An API contract was violated (non-scalar loss, double backward, missing grads).
class ContractError : public std::runtime_error {
public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_str(const std::vector<std::size_t>& shape);

std::size_t shape_numel(const std::vector<std::size_t>& shape);

// Deterministic RNG. mt19937_64 is bit-specified by the standard; the
// distributions are hand-rolled because std::*_distribution output is
// implementation-defined and would break bit-reproducibility.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  Real uniform() {
    return static_cast<Real>(engine_() >> 11) * 0x1.0p-53;
  }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (no caching, so the draw count per call
  // is fixed and replay-stable).
  Real normal();

  bool bernoulli(Real p) { return uniform() < p; }

  // Derive an independent substream seed (splitmix64 over seed ^ stream).
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream);

private:
  std::mt19937_64 engine_;
};

// FNV-1a, used for config hashing.
std::uint64_t fnv1a(const std::string& text);

}  // namespace dsai
