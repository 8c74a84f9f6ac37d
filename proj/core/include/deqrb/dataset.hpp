#pragma once

// Small labelled datasets: synthetic two-class sets and IDX image files.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "deqrb/numkit.hpp"

namespace deqrb {

/// A plain list of labelled examples, e.g. one split of a Dataset.
struct ExampleSet {
  std::vector<Vec64> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
};

struct Splits {
  std::vector<std::size_t> train, dev, test;
};

struct Dataset {
  std::vector<Vec64> inputs;  // each within [0, 1]^l
  std::vector<std::size_t> labels;
  std::size_t num_classes = 2;
  Splits splits;

  std::size_t size() const { return inputs.size(); }
  std::size_t input_dim() const { return inputs.empty() ? 0 : inputs.front().size(); }

  ExampleSet subset(const std::vector<std::size_t>& indices) const;
  ExampleSet train() const { return subset(splits.train); }
  ExampleSet dev() const { return subset(splits.dev); }
  ExampleSet test() const { return subset(splits.test); }

  /// Box bounds and disjoint, covering splits.
  void validate() const;
};

enum class SyntheticKind { Blobs, Moons, Rings };

std::string to_string(SyntheticKind k);
SyntheticKind synthetic_kind_from_string(const std::string& s);

struct SplitFractions {
  double test = 0.25;
  /// Fraction of the non-test part held out as the development set.
  double dev = 0.2;
};

/// Two-class synthetic set in the plane, zero-padded to l dimensions, rotated
/// by a seeded random orthogonal matrix and rescaled into [0, 1]^l.
Dataset gen_synthetic(SyntheticKind kind, std::size_t n, double noise, std::size_t l, std::uint64_t seed,
                      const SplitFractions& fractions = {});

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled to [0, 1]; at most `limit` examples are kept.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit,
                 std::uint64_t seed, const SplitFractions& fractions = {});

/// Seeded shuffle split of n indices.
Splits make_splits(std::size_t n, std::uint64_t seed, const SplitFractions& fractions);

/// Writes IDX files (used by tests and for exporting synthetic sets).
void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<std::vector<std::uint8_t>>& images, std::size_t rows, std::size_t cols,
               const std::vector<std::uint8_t>& labels);

}  // namespace deqrb
