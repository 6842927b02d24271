#pragma once

#include <functional>
#include <string>

#include "vqim/ops.hpp"

namespace vqim {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  bool pass = false;
};

// Central-difference check of a scalar-valued function of the given params.
// The function is invoked with a live tape for the analytic pass and with
// nullptr for the +/-h probes, so it must route every op through the tape it
// receives. float64 only; finite differences need the headroom.
inline GradCheckReport grad_check(
    const std::function<Tensor64(Tape64*)>& f,
    const std::vector<std::pair<std::string, Tensor64>>& params, double h = 1e-4,
    double tol = 1e-4) {
  for (auto& [name, p] : params) {
    (void)name;
    const_cast<Tensor64&>(p).zero_grad();
  }
  Tape64 tape;
  Tensor64 loss = f(&tape);
  if (!loss.requires_grad())
    throw ConfigError("grad_check: loss does not depend on any tracked param");
  tape.backward(loss);

  GradCheckReport report;
  for (auto& [name, p] : params) {
    Tensor64& param = const_cast<Tensor64&>(p);
    for (int64_t i = 0; i < param.size(); ++i) {
      const double saved = param.data()[i];
      param.data()[i] = saved + h;
      const double fp = f(nullptr).item();
      param.data()[i] = saved - h;
      const double fm = f(nullptr).item();
      param.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = param.grad()[i];
      const double rel =
          std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-4);
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_coord = i;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace vqim
