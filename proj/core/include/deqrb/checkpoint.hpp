#pragma once

// JSON checkpoints: model dimensions, activation, every tensor as
// {shape, data}, and the calibrated defense.

#include <string>

#include "deqrb/defenses.hpp"
#include "deqrb/model.hpp"

namespace deqrb {

struct Checkpoint {
  LayerParams params;
  DefenseStrategy defense = DefenseStrategy::final_state();
};

std::string checkpoint_to_json(const Checkpoint& ckpt);
/// Throws FormatError on missing keys, bad shapes or non-numeric data.
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace deqrb
