#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mtts/tensor.hpp"

namespace mtts {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // number of scalar entries compared
  bool passed = false;
  bool numerical_failure = false;
  std::string detail;  // worst entry or failure reason
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares tape gradients of a scalar function against central finite differences.
///
/// Every input with requires_grad set is perturbed entry by entry. The error
/// for one entry is |tape - fd| / max(|tape|, |fd|, 1e-4); the check passes iff
/// the maximum over all entries is <= tol. A non-finite difference quotient or
/// an exception thrown by f is reported as a numerical failure.
///
/// `expected_scale` states what the tape should produce relative to the true
/// derivative; a gradient reversal layer with factor lambda expects -lambda.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double tol, double step = 1e-5,
                           double expected_scale = 1.0);

}  // namespace mtts
