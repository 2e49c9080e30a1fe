#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include <cmath>
#include <functional>
#include <string>

#include "vmmt/params.hpp"

namespace vmmt {

struct GradCheckReport {
  bool ok = false;
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t coords_checked = 0;
  std::string message;
};

// Scalar loss over a parameter set. When `grads` is non-null the call must
// also fill reverse-mode gradients keyed by parameter name. The function
// must be deterministic given the parameters: the caller freezes epsilon
// draws and dropout masks (e.g. by reseeding per call).
using ScalarLossFn = std::function<double(const ParamStore&, ParamGrads*)>;

// Central difference for one parameter coordinate, computed by the caller
// (typically against an independent reference forward, possibly at extended
// precision). The store is handed over non-const so the evaluator can
// perturb-and-restore in place.
using FdEval =
    std::function<double(ParamStore&, const std::string&, size_t, double)>;

inline GradCheckReport grad_check(ParamStore& params, const ScalarLossFn& f,
                                  double step = 1e-5, double tol = 1e-4) {
  GradCheckReport report;
  ParamGrads ad;
  double base = f(params, &ad);
  if (!std::isfinite(base)) {
    report.message = "loss is non-finite at the evaluation point";
    return report;
  }

  for (auto& p : params.all()) {
    const std::vector<double>* g_ad = nullptr;
    auto it = ad.find(p.name);
    if (it != ad.end()) g_ad = &it->second;
    for (size_t i = 0; i < p.data.size(); ++i) {
      double saved = p.data[i];
      p.data[i] = saved + step;
      double up = f(params, nullptr);
      p.data[i] = saved - step;
      double down = f(params, nullptr);
      p.data[i] = saved;
      double fd = (up - down) / (2.0 * step);
      double adg = g_ad ? (*g_ad)[i] : 0.0;
      if (!std::isfinite(fd) || !std::isfinite(adg)) {
        report.message = "non-finite gradient for parameter '" + p.name +
                         "' at index " + std::to_string(i);
        report.worst_param = p.name;
        report.worst_index = static_cast<int64_t>(i);
        return report;
      }
      double rel =
          std::abs(adg - fd) / std::max(1e-8, std::abs(adg) + std::abs(fd));
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name;
        report.worst_index = static_cast<int64_t>(i);
      }
    }
  }
  report.ok = report.max_rel_err < tol;
  if (!report.ok && report.message.empty()) {
    report.message = "max relative error " +
                     std::to_string(report.max_rel_err) + " at '" +
                     report.worst_param + "'[" +
                     std::to_string(report.worst_index) + "]";
  }
  return report;
}

// Variant with an external finite-difference evaluator. Coordinates whose
// gradient magnitude falls below `refine_below` are re-differenced with
// `fd_precise` (when supplied): double-precision differencing drowns in
// rounding noise exactly where gradients are tiny, so those few coordinates
// get the extended-precision treatment.
inline GradCheckReport grad_check(ParamStore& params, const ScalarLossFn& f,
                                  const FdEval& fd_fast,
                                  const FdEval& fd_precise, double step = 1e-5,
                                  double tol = 1e-4,
                                  double refine_below = 1e-4) {
  GradCheckReport report;
  ParamGrads ad;
  double base = f(params, &ad);
  if (!std::isfinite(base)) {
    report.message = "loss is non-finite at the evaluation point";
    return report;
  }
  for (auto& p : params.all()) {
    const std::vector<double>* g_ad = nullptr;
    auto it = ad.find(p.name);
    if (it != ad.end()) g_ad = &it->second;
    for (size_t i = 0; i < p.data.size(); ++i) {
      double adg = g_ad ? (*g_ad)[i] : 0.0;
      double fd = fd_fast(params, p.name, i, step);
      if (fd_precise && std::abs(adg) + std::abs(fd) < refine_below)
        fd = fd_precise(params, p.name, i, step);
      if (!std::isfinite(fd) || !std::isfinite(adg)) {
        report.message = "non-finite gradient for parameter '" + p.name +
                         "' at index " + std::to_string(i);
        report.worst_param = p.name;
        report.worst_index = static_cast<int64_t>(i);
        return report;
      }
      double rel =
          std::abs(adg - fd) / std::max(1e-8, std::abs(adg) + std::abs(fd));
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name;
        report.worst_index = static_cast<int64_t>(i);
      }
    }
  }
  report.ok = report.max_rel_err < tol;
  if (!report.ok && report.message.empty()) {
    report.message = "max relative error " +
                     std::to_string(report.max_rel_err) + " at '" +
                     report.worst_param + "'[" +
                     std::to_string(report.worst_index) + "]";
  }
  return report;
}

}  // namespace vmmt
