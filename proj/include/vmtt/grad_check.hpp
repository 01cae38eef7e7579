#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "vmtt/tensor.hpp"

namespace vmtt {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
  double floor = 0.0;  // denominator floor used, see fd_resolution_floor
};

/// Relative error with an absolute floor so coordinates whose true gradient
/// is ~0 are judged on absolute agreement.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Denominator floor for a central difference of f at step eps: the gradient
/// size at which 16 ulps of rounding noise in f would read as a 1e-4
/// relative error. Below it the difference quotient cannot resolve the
/// gradient, so agreement is judged absolutely. Never below 1e-6, and it
/// scales with |f| so the verdict does not depend on the loss scale.
inline double fd_resolution_floor(double f, double eps) {
  const double noise = 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f)) / (2.0 * eps);
  return std::max(1e-6, noise / 1e-4);
}

/// Compares reverse-mode gradients of scalar `f` to central differences
/// (f(x+eps) - f(x-eps)) / 2eps, coordinate by coordinate. `f` must rebuild
/// its graph from the current parameter values on every call.
/// `stride` > 1 checks every stride-th coordinate of each parameter.
inline GradCheckReport grad_check_report(const std::function<Var()>& f, const std::vector<Var>& params, double eps,
                                         std::size_t stride = 1) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  if (stride == 0) stride = 1;
  for (auto p : params) p.zero_grad();
  Var out = f();
  if (out.size() != 1) throw std::invalid_argument("grad_check: f must be scalar");
  if (!std::isfinite(out.item())) throw std::domain_error("grad_check: f is not finite");
  const double floor = fd_resolution_floor(out.item(), eps);
  backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Tensor(p.shape(), 0.0));

  GradCheckReport rep;
  rep.floor = floor;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Var p = params[pi];
    auto& values = p.mutable_value();
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double fp = f().item();
      values[i] = orig - eps;
      const double fm = f().item();
      values[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw std::domain_error("grad_check: f is not finite");
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = relative_error(analytic[pi][i], numeric, floor);
      ++rep.coordinates;
      if (err > rep.max_rel_err || rep.coordinates == 1) {
        rep.max_rel_err = std::max(rep.max_rel_err, err);
        if (err >= rep.max_rel_err) {
          rep.worst_param = pi;
          rep.worst_index = i;
          rep.analytic = analytic[pi][i];
          rep.numeric = numeric;
        }
      }
    }
  }
  return rep;
}

inline double grad_check(const std::function<Var()>& f, const std::vector<Var>& params, double eps) {
  return grad_check_report(f, params, eps).max_rel_err;
}

}  // namespace vmtt
