#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "omnifuse/autograd.hpp"

namespace omnifuse {

// One finite-difference case: a rebuildable scalar objective plus every
// tensor (parameters and inputs) its gradient is checked against.
struct GradCheckCase {
  std::shared_ptr<void> keep_alive;
  std::vector<std::pair<std::string, Var>> wrt;
  std::function<Var()> loss;
};

GradCheckCase make_gradcheck_case(const std::string& block_name, uint64_t seed);
std::vector<std::string> gradcheck_block_names();

// Central differences of the case objective against reverse-mode gradients.
// Relative error per coordinate is |a - f| / max(1, |a|, |f|); returns the
// maximum over all checked scalars. eps must lie in [1e-7, 1e-3].
double finite_difference_max_rel_err(GradCheckCase& c, double eps);

// Convenience: build the named block and run the check.
double gradient_check(const std::string& block_name, uint64_t seed, double eps);

}  // namespace omnifuse
