#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtts/grad_check.hpp"

namespace mtts {

struct OpCheck {
  std::string op;
  GradCheckReport report;
};

/// Finite-difference checks of every differentiable primitive on randomly
/// shaped inputs drawn from `seed`. Dropout and batch norm run in their
/// deterministic configurations (fixed mask seed, train-mode statistics).
std::vector<OpCheck> check_primitives(std::uint64_t seed, double tol = 1e-4);

}  // namespace mtts
