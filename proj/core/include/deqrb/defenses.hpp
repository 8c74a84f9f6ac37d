#pragma once

// Inference-time readout strategies: which forward state feeds the head.

#include <cstddef>
#include <string>

#include "deqrb/numkit.hpp"
#include "deqrb/solver.hpp"

namespace deqrb {

enum class DefenseKind { Final, Early, Ensemble };

std::string to_string(DefenseKind k);
DefenseKind defense_kind_from_string(const std::string& s);

struct DefenseStrategy {
  DefenseKind kind = DefenseKind::Final;
  std::size_t n_star = 0;  // Early only
  bool calibrated = false;

  static DefenseStrategy final_state() { return {DefenseKind::Final, 0, true}; }
  static DefenseStrategy early(std::size_t n_star) { return {DefenseKind::Early, n_star, true}; }
  static DefenseStrategy uncalibrated_early() { return {DefenseKind::Early, 0, false}; }
  static DefenseStrategy ensemble() { return {DefenseKind::Ensemble, 0, true}; }

  std::string label() const;
  friend bool operator==(const DefenseStrategy&, const DefenseStrategy&) = default;
};

/// Running mean of pushed states. Holds one state-sized sum and a counter,
/// independent of how many states are pushed.
class StreamingEnsemble {
 public:
  void push(const Vec64& z);
  Vec64 finish() const;

  std::size_t count() const { return count_; }
  /// Number of doubles retained.
  std::size_t retained_values() const { return sum_.size(); }

 private:
  Vec64 sum_;
  std::size_t count_ = 0;
};

/// Final -> z_N, Early -> z_{n*}, Ensemble -> mean of z_1..z_N.
Vec64 defended_state(const ForwardTrace& trace, const DefenseStrategy& strategy);

}  // namespace deqrb
