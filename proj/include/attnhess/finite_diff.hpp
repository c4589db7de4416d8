#pragma once

#include "attnhess/attention.hpp"

#include <functional>

// Independent ground truth: central finite differences of the scalar loss
// (and of the flattened forward map) with respect to flattened parameters.
// Steps follow the standard optimal-step rule with per-coordinate relative
// scaling: h = eps^(1/3) max(1,|theta|) for first derivatives and
// h = eps^(1/4) max(1,|theta|) for second derivatives.

namespace attnhess {

struct OracleReport {
  double max_abs_error = 0.0;
  double rel_frobenius_error = 0.0;
  Index worst_row = 0;
  Index worst_col = 0;
  double analytic_norm = 0.0;
  double oracle_norm = 0.0;
};

/// Error metrics between an analytic matrix and its oracle.
/// rel_frobenius_error = ||A - O||_F / max(1, ||O||_F).
OracleReport compare(const Mat& analytic, const Mat& oracle);

struct FdOptions {
  /// Multiplies the default step. A large value is only valid when the
  /// differentiated function is exactly quadratic along the perturbed
  /// coordinates (then the 4-point rule has no truncation error and the
  /// larger step suppresses cancellation against the loss offset).
  double step_scale = 1.0;
  std::size_t parameter_cap = 4096;
};

/// Symmetrized 4-point central-difference Hessian of a scalar function:
/// H_ij = [f(+h_i,+h_j) - f(+h_i,-h_j) - f(-h_i,+h_j) + f(-h_i,-h_j)] / (4 h_i h_j).
Mat fd_hessian(const std::function<double(const Vec&)>& f, const Vec& theta,
               const FdOptions& options = {});

/// Central-difference Jacobian of a vector function.
Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& theta,
                const FdOptions& options = {});

/// Loss Hessian w.r.t. the flattened weights addressed by `keys`, in order.
Mat fd_hessian(const AttentionSpec& spec, const Sequence& seq, const std::vector<ParamKey>& keys,
               const FdOptions& options = {});

/// Jacobian of vecr(f(X)) w.r.t. one flattened weight matrix.
Mat fd_jacobian(const AttentionSpec& spec, const Sequence& seq, const ParamKey& key,
                const FdOptions& options = {});

}  // namespace attnhess
