#include "mtts/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <sstream>

namespace mtts {

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double tol, double step,
                           double expected_scale) {
  GradCheckReport report;
  std::vector<std::vector<double>> analytic(inputs.size());
  try {
    for (const auto& t : inputs) const_cast<Tensor&>(t).zero_grad();
    Tape tape;
    {
      TapeScope scope(tape);
      Tensor loss = f(inputs);
      backward(loss);
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i].requires_grad()) continue;
      analytic[i] = inputs[i].has_grad() ? std::vector<double>(inputs[i].grad().begin(), inputs[i].grad().end())
                                         : std::vector<double>(inputs[i].numel(), 0.0);
    }
  } catch (const std::exception& e) {
    report.numerical_failure = true;
    report.detail = std::string("forward/backward threw: ") + e.what();
    return report;
  }

  auto eval = [&]() {
    NoGradScope no_grad;
    return f(inputs).item();
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    Tensor t = inputs[i];
    auto values = t.mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      double plus, minus;
      try {
        values[j] = saved + step;
        plus = eval();
        values[j] = saved - step;
        minus = eval();
      } catch (const std::exception& e) {
        values[j] = saved;
        report.numerical_failure = true;
        report.detail = std::string("finite difference evaluation threw: ") + e.what();
        return report;
      }
      values[j] = saved;
      const double fd = expected_scale * (plus - minus) / (2.0 * step);
      if (!std::isfinite(fd)) {
        report.numerical_failure = true;
        std::ostringstream os;
        os << "non-finite finite difference at input " << i << " entry " << j;
        report.detail = os.str();
        return report;
      }
      const double a = analytic[i][j];
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
      ++report.checked;
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : INFINITY;
        std::ostringstream os;
        os << "input " << i << " entry " << j << ": tape " << a << " vs fd " << fd;
        report.detail = os.str();
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace mtts
