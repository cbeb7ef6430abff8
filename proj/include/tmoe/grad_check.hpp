#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tmoe/error.hpp"
#include "tmoe/tensor.hpp"

namespace tmoe {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Central-difference check of d f / d params against autodiff. The relative
// error of each element is |a - n| / max(|a|, |n|, 1e-8). `f` is re-run for
// every perturbation, so anything discrete inside it (routing) must already
// be frozen by the caller.
template <class T>
GradCheckReport grad_check_params(const std::function<BasicTensor<T>()>& f,
                                  std::vector<BasicTensor<T>> params, double epsilon) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    std::vector<double> g(static_cast<std::size_t>(p.numel()), 0.0);
    const auto pg = p.grad();
    for (std::size_t i = 0; i < pg.size(); ++i) g[i] = static_cast<double>(pg[i]);
    analytic.push_back(std::move(g));
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      data[i] = static_cast<T>(static_cast<double>(saved) + epsilon);
      const double plus = static_cast<double>(f().item());
      data[i] = static_cast<T>(static_cast<double>(saved) - epsilon);
      const double minus = static_cast<double>(f().item());
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

// Single-input form: f must be scalar-valued, x small (at most 1000 elements).
template <class T>
double grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, BasicTensor<T> x,
                  double epsilon) {
  require(x.numel() <= 1000, ErrorCategory::kContract,
          "grad_check: input too large for finite differences (" + std::to_string(x.numel()) +
              " elements)");
  std::function<BasicTensor<T>()> g = [&]() { return f(x); };
  return grad_check_params<T>(g, {x}, epsilon).max_rel_error;
}

}  // namespace tmoe
