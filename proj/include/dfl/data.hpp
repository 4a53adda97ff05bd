#pragma once

#include <string>
#include <vector>

#include "dfl/grid.hpp"

namespace dfl {

// Feature layout convention: the first four columns are calendric sin/cos
// encodings (weekday, hour) and are never attackable; the remaining columns
// are meteorological channels in [0,1], six per load bus.
inline constexpr Index kCalendricColumns = 4;

struct Dataset {
  Mat features;  // n_samples x n_features
  Mat loads;     // n_samples x n_load, >= 0
  std::vector<bool> attack_mask;       // per feature column
  std::vector<std::string> split_tag;  // per sample, "" when unsplit

  Index n_samples() const { return features.rows(); }
  Index n_features() const { return features.cols(); }
  Index n_load() const { return loads.cols(); }

  std::vector<Index> indices(const std::string& tag) const;
  Dataset subset(const std::vector<Index>& rows) const;
  std::uint64_t digest() const;
};

// CSV schema: header feature_0..,load_0..[,split]; a sidecar JSON at
// <path>.stats.json carries the attack mask and optional per-column
// normalization stats (computed on the training split only). When stats are
// present they are applied to the meteorological columns on load.
Dataset load_csv(const std::string& path);
void save_csv(const Dataset& ds, const std::string& path);

// Smooth seasonal/diurnal feature processes plus a fixed random
// affine-plus-sinusoid load map. The global load scale is pushed up until
// the dispatch stage first leans on its slack variables (> 5% of samples),
// then backed off one step.
Dataset generate_synthetic(const GridSpec& grid, Index n_samples, std::uint64_t seed);

// Seeded shuffle into disjoint, exhaustive tagged splits. fractions must sum
// to 1 and match tags in length.
void split_dataset(Dataset& ds, const std::vector<Scalar>& fractions,
                   const std::vector<std::string>& tags, std::uint64_t seed);

}  // namespace dfl
