#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hydra/tensor.hpp"

namespace hydra {

using Graph64 = std::function<Tensor64(const std::vector<Tensor64>&)>;

// Compares the reverse-mode gradient of a scalar graph against five-point
// finite differences (steps +-eps, +-2 eps) for every input that requires a
// gradient. Returns max over elements of |a - n| / max(|a|, |n|, 1e-8).
//
// Callers keep inputs at least 10 * eps away from kinks (ReLU zero, max-pool
// ties); the checker does not detect crossings.
double grad_check(const Graph64& graph, const std::vector<Tensor64>& inputs, double eps);

struct OpCheckReport {
  std::string op;
  std::size_t instances = 0;
  double max_relative_error = 0;
  bool passed = false;
};

inline constexpr double kGradCheckEps = 1e-3;
inline constexpr double kGradCheckTolerance = 1e-4;

// Names accepted by run_gradcheck_suite.
std::vector<std::string> gradcheck_op_names();

// Random-instance sweep per primitive. Unknown names throw UsageError.
std::vector<OpCheckReport> run_gradcheck_suite(const std::vector<std::string>& ops,
                                               std::size_t instances, std::uint64_t seed,
                                               double eps = kGradCheckEps,
                                               double tolerance = kGradCheckTolerance);

}  // namespace hydra
