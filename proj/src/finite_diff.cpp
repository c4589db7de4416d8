#include "attnhess/finite_diff.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace attnhess {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

double check_finite(double value) {
  if (!std::isfinite(value)) throw ValidationError("fd: non-finite loss evaluation");
  return value;
}

Vec second_order_steps(const Vec& theta, double step_scale) {
  const double base = std::pow(kEps, 0.25) * step_scale;
  return base * theta.array().abs().max(1.0);
}

Vec first_order_steps(const Vec& theta, double step_scale) {
  const double base = std::pow(kEps, 1.0 / 3.0) * step_scale;
  return base * theta.array().abs().max(1.0);
}

}  // namespace

OracleReport compare(const Mat& analytic, const Mat& oracle) {
  if (analytic.rows() != oracle.rows() || analytic.cols() != oracle.cols()) {
    throw ShapeError("compare: shape mismatch");
  }
  OracleReport report;
  report.analytic_norm = analytic.norm();
  report.oracle_norm = oracle.norm();
  const Mat diff = analytic - oracle;
  report.max_abs_error = 0.0;
  for (Index j = 0; j < diff.cols(); ++j) {
    for (Index i = 0; i < diff.rows(); ++i) {
      const double e = std::abs(diff(i, j));
      if (e > report.max_abs_error) {
        report.max_abs_error = e;
        report.worst_row = i;
        report.worst_col = j;
      }
    }
  }
  report.rel_frobenius_error = diff.norm() / std::max(1.0, report.oracle_norm);
  return report;
}

Mat fd_hessian(const std::function<double(const Vec&)>& f, const Vec& theta,
               const FdOptions& options) {
  const Index n = theta.size();
  if (static_cast<std::size_t>(n) > options.parameter_cap) {
    throw SizeLimitError("fd_hessian: " + std::to_string(n) + " parameters exceed cap " +
                         std::to_string(options.parameter_cap));
  }
  const Vec h = second_order_steps(theta, options.step_scale);
  Mat hess(n, n);
  Vec p(theta.size());
  const auto eval = [&](Index i, double si, Index j, double sj) {
    p = theta;
    p(i) += si * h(i);
    p(j) += sj * h(j);
    return check_finite(f(p));
  };
  for (Index i = 0; i < n; ++i) {
    for (Index j = i; j < n; ++j) {
      const double v = (eval(i, 1, j, 1) - eval(i, 1, j, -1) - eval(i, -1, j, 1) +
                        eval(i, -1, j, -1)) /
                       (4.0 * h(i) * h(j));
      hess(i, j) = v;
      hess(j, i) = v;
    }
  }
  return 0.5 * (hess + hess.transpose());
}

Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& theta,
                const FdOptions& options) {
  const Index n = theta.size();
  if (static_cast<std::size_t>(n) > options.parameter_cap) {
    throw SizeLimitError("fd_jacobian: parameter count exceeds cap");
  }
  const Vec h = first_order_steps(theta, options.step_scale);
  Vec p = theta;
  p(0) += h(0);
  Vec sample = f(p);
  Mat jac(sample.size(), n);
  for (Index j = 0; j < n; ++j) {
    p = theta;
    p(j) += h(j);
    const Vec plus = f(p);
    p(j) -= 2.0 * h(j);
    const Vec minus = f(p);
    if (!plus.allFinite() || !minus.allFinite()) {
      throw ValidationError("fd: non-finite forward evaluation");
    }
    jac.col(j) = (plus - minus) / (2.0 * h(j));
  }
  return jac;
}

Mat fd_hessian(const AttentionSpec& spec, const Sequence& seq, const std::vector<ParamKey>& keys,
               const FdOptions& options) {
  validate(spec, seq);
  const Vec theta = pack_parameters(spec, keys);
  const auto f = [&](const Vec& t) {
    const AttentionSpec perturbed = with_parameters(spec, keys, t);
    const ForwardCache cache = forward(perturbed, seq);
    return loss(cache, seq);
  };
  return fd_hessian(f, theta, options);
}

Mat fd_jacobian(const AttentionSpec& spec, const Sequence& seq, const ParamKey& key,
                const FdOptions& options) {
  validate(spec, seq);
  const std::vector<ParamKey> keys{key};
  const Vec theta = pack_parameters(spec, keys);
  const auto f = [&](const Vec& t) {
    const AttentionSpec perturbed = with_parameters(spec, keys, t);
    return vecr(forward(perturbed, seq).output);
  };
  return fd_jacobian(f, theta, options);
}

}  // namespace attnhess
