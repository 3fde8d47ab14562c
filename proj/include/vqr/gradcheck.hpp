#pragma once

#include <functional>

#include "vqr/tensor.hpp"

namespace vqr {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst;  // "input 0, elem 12: tape=.., fd=.." for diagnostics
};

/// Options for grad_check. `sanitize` lets callers keep sampled inputs away
/// from kinks / ties of the op under test (resample contract).
struct GradCheckOpts {
  double h = 1e-3;            // central-difference step on the float32 forward
  double tol = 1e-3;          // max relative error to pass
  float sample_stddev = 1.f;  // inputs ~ N(0, stddev)
  std::function<void(std::vector<Tensor>&)> sanitize;
};

/// Compares tape gradients of a scalar-valued builder against central finite
/// differences. The forward runs in float32; the difference quotient is
/// accumulated in float64 (scalar losses carry a float64 value). Relative
/// error uses |a-b| / max(|a|,|b|,1) so gradients below unit scale are held
/// to an absolute bar of tol, the usual mixed atol/rtol convention.
GradCheckReport grad_check(const std::function<Tensor(std::vector<Tensor>&)>& build,
                           const std::vector<Shape>& input_shapes, uint64_t seed,
                           const GradCheckOpts& opts = {});

}  // namespace vqr
