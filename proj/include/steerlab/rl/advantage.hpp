#pragma once

#include <span>
#include <vector>

#include "steerlab/error.hpp"

namespace steerlab {

struct Advantages {
  double baseline = 0.0;
  std::vector<double> values;
};

// b = mean of all N rewards (the sample itself included), a_i = r_i - b.
inline Advantages compute_advantages(std::span<const double> rewards) {
  if (rewards.empty()) throw InputError("compute_advantages: empty reward list");
  if (rewards.size() < 2) throw InputError("compute_advantages: a group needs at least two rollouts");
  Advantages out;
  bool all_equal = true;
  double sum = 0.0;
  for (double r : rewards) {
    sum += r;
    all_equal = all_equal && r == rewards[0];
  }
  // equal rewards must give exactly zero advantages
  out.baseline = all_equal ? rewards[0] : sum / static_cast<double>(rewards.size());
  out.values.reserve(rewards.size());
  for (double r : rewards) out.values.push_back(r - out.baseline);
  return out;
}

}  // namespace steerlab
