#include "lidargen/corruption.hpp"

#include <random>
#include <stdexcept>

#include <json.hpp>

namespace lidargen {

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::additive_noise: return "noise";
    case CorruptionKind::data_removal: return "removal";
  }
  throw precondition_error("unknown corruption kind");
}

CorruptionKind corruption_kind_from_string(const std::string& name) {
  if (name == "noise") return CorruptionKind::additive_noise;
  if (name == "removal") return CorruptionKind::data_removal;
  throw malformed_input_error("unknown corruption kind '" + name + "'");
}

std::string CorruptionSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = to_string(kind);
  j["level"] = level;
  j["seed"] = seed;
  return j.dump();
}

CorruptionSpec CorruptionSpec::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw malformed_input_error(std::string("bad corruption JSON: ") +
                                ex.what());
  }
  CorruptionSpec spec;
  try {
    spec.kind = corruption_kind_from_string(j.at("kind").get<std::string>());
    spec.level = j.at("level").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw malformed_input_error(std::string("bad corruption fields: ") +
                                ex.what());
  }
  return spec;
}

GridScan add_noise(const GridScan& grid, const NormStats& stats, double sigma,
                   std::uint64_t seed) {
  if (sigma < 0.0 || !std::isfinite(sigma)) {
    throw std::domain_error("noise sigma must be finite and non-negative");
  }
  if (grid.normalized) {
    throw precondition_error("add_noise expects an unnormalized grid");
  }
  const int ch = grid.channels();
  if (static_cast<int>(stats.mean.size()) != ch) {
    throw precondition_error("stats channel count does not match grid");
  }
  GridScan out = grid;
  if (sigma == 0.0) return out;

  // Standardize, perturb, de-standardize collapses to adding
  // sigma * std[k] * eta in metric space; doing it that way keeps
  // sigma == 0 bit-exact and avoids a needless round trip.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t cell = 0; cell < grid.cell_count(); ++cell) {
    if (grid.mask[cell] == 0) continue;
    for (int k = 0; k < ch; ++k) {
      const double eta = unit(rng);
      out.data[cell * ch + k] = static_cast<float>(
          static_cast<double>(grid.data[cell * ch + k]) +
          sigma * stats.std[k] * eta);
    }
  }
  return out;
}

GridScan drop_points(const GridScan& grid, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::domain_error("drop probability must lie in [0, 1]");
  }
  GridScan out = grid;
  if (p == 0.0) return out;

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution drop(p);
  const int ch = grid.channels();
  for (std::size_t cell = 0; cell < grid.cell_count(); ++cell) {
    if (grid.mask[cell] == 0) continue;
    if (!drop(rng)) continue;
    out.mask[cell] = 0;
    for (int k = 0; k < ch; ++k) out.data[cell * ch + k] = 0.0f;
  }
  return out;
}

GridScan apply_corruption(const GridScan& grid, const CorruptionSpec& spec,
                          const NormStats& stats) {
  switch (spec.kind) {
    case CorruptionKind::additive_noise:
      return add_noise(grid, stats, spec.level, spec.seed);
    case CorruptionKind::data_removal:
      return drop_points(grid, spec.level, spec.seed);
  }
  throw precondition_error("unknown corruption kind");
}

}  // namespace lidargen
