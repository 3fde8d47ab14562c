#include "vqr/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace vqr {

GradCheckReport grad_check(const std::function<Tensor(std::vector<Tensor>&)>& build,
                           const std::vector<Shape>& input_shapes, uint64_t seed,
                           const GradCheckOpts& opts) {
  Rng rng(seed);
  std::vector<Tensor> inputs;
  inputs.reserve(input_shapes.size());
  for (const auto& s : input_shapes)
    inputs.push_back(Tensor::randn(s, rng, opts.sample_stddev));
  if (opts.sanitize) opts.sanitize(inputs);
  for (auto& t : inputs) t.set_requires_grad(true);

  // analytic gradients
  std::vector<Eigen::ArrayXf> analytic;
  {
    Tape tape;
    Tensor loss = build(inputs);
    tape.backward(loss);
    for (auto& t : inputs) {
      analytic.push_back(t.has_grad() ? t.grad_array()
                                      : Eigen::ArrayXf::Zero(t.size()));
      t.zero_grad();
    }
  }

  // forwards for finite differences run off-tape
  for (auto& t : inputs) t.set_requires_grad(false);
  auto eval = [&]() -> double {
    Tensor loss = build(inputs);
    return loss.item64();
  };

  GradCheckReport rep;
  rep.max_rel_err = 0.0;
  const double h = opts.h;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    for (int64_t i = 0; i < t.size(); ++i) {
      const float saved = t.data()[i];
      t.data()[i] = float(double(saved) + h);
      const double fp = eval();
      t.data()[i] = float(double(saved) - h);
      const double fm = eval();
      t.data()[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = double(analytic[k][i]);
      // mixed bar: relative for large gradients, absolute (= tol) below unit
      // scale, where float32 forward noise would otherwise dominate the ratio
      const double denom = std::max({std::abs(an), std::abs(fd), 1.0});
      const double err = std::abs(an - fd) / denom;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        std::ostringstream os;
        os << "input " << k << ", elem " << i << ": tape=" << an << ", fd=" << fd;
        rep.worst = os.str();
      }
    }
  }
  rep.pass = rep.max_rel_err < opts.tol;
  return rep;
}

}  // namespace vqr
