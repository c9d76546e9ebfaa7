#pragma once

// Deterministic scan corruption used for robustness experiments: additive
// Gaussian noise in the per-channel standardized domain and Bernoulli
// removal of occupied cells.

#include <cstdint>
#include <string>

#include "lidargen/projection.hpp"

namespace lidargen {

enum class CorruptionKind { additive_noise, data_removal };

std::string to_string(CorruptionKind kind);
CorruptionKind corruption_kind_from_string(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::additive_noise;
  double level = 0.0;      // sigma for noise, drop probability for removal
  std::uint64_t seed = 0;

  bool operator==(const CorruptionSpec&) const = default;

  std::string to_json() const;
  static CorruptionSpec from_json(const std::string& text);
};

// Adds i.i.d. N(0, sigma) noise to every channel of every occupied cell in
// the standardized domain implied by `stats` (i.e. the metric-space
// perturbation of channel k has standard deviation sigma * stats.std[k]).
// sigma == 0 returns the input unchanged; sigma < 0 throws
// std::domain_error. The mask is untouched. Deterministic for a fixed seed.
GridScan add_noise(const GridScan& grid, const NormStats& stats, double sigma,
                   std::uint64_t seed);

// Independently clears each occupied cell with probability p (channels
// zeroed, mask bit dropped). p outside [0, 1] throws std::domain_error.
// Deterministic for a fixed seed.
GridScan drop_points(const GridScan& grid, double p, std::uint64_t seed);

// Dispatches on spec.kind; noise needs `stats`, removal ignores it.
GridScan apply_corruption(const GridScan& grid, const CorruptionSpec& spec,
                          const NormStats& stats);

}  // namespace lidargen
