#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmrisk/tensor.hpp"

namespace mmrisk {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  int cases = 0;
};

// f maps (tape, inputs) to a scalar loss; inputs arrive tracked when a tape
// is given. Central differences with the given step against the tape
// gradients; relative error |a - n| / max(1, |a|, |n|).
using LossFn = std::function<Tensor(Tape*, const std::vector<Tensor>&)>;
double fd_max_rel_error(const LossFn& f, const std::vector<Tensor>& inputs, double step = 1e-5);

// Randomized finite-difference checks for every primitive operation.
std::vector<GradCheckCase> primitive_gradient_suite(std::uint64_t seed, int cases_per_op = 100);

// Finite differences through the full contrastive + matching objective on a
// small randomized model; checks every parameter element.
GradCheckCase composite_gradient_check(std::uint64_t seed);

}  // namespace mmrisk
