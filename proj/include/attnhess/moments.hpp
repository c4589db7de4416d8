#pragma once

#include "attnhess/attention.hpp"

// Attention moment matrices M1, M2, M3 and the data matrices Z1, Z2.
// Each attention row is a distribution over tokens; M_k stacks its k-th
// (centered for k >= 2) moments of the token embeddings:
//   M1 = A X                                  (L x d_v)
//   [M2]_i = sum_j A_ij (x_j - m_i)(x_j - m_i)^T        (blocks d_v x d_v)
//   [M3]_i = sum_j A_ij (x_j - m_i) ⊗ (x_j - m_i)(x_j - m_i)^T
//                                              (blocks d_v^2 x d_v)
// with m_i the i-th row of M1. The data matrices
//   Z1 = (I_L ⊗ X^T) (dA/dT) (X ⊗ X)                    (L d_v   x d_v^2)
//   Z2 = (I_L ⊗ X^T ⊗ X^T ⊗ X^T) (d^2A/dT^2) (X ⊗ X)    (L d_v^3 x d_v^2)
// admit the equivalent moment forms
//   Z1 = X * M2,   Z2 = (I_L ⊗ K_{d_v,d_v} ⊗ I_{d_v}) (X * X^T * M3),
// with * the Khatri-Rao product over row blocks. Both routes are kept and
// tested against each other.

namespace attnhess {

struct MomentSet {
  Mat m1;  // L x d_v
  Mat m2;  // L d_v x d_v
  Mat m3;  // L d_v^2 x d_v
  Mat z1;  // L d_v x d_v^2
  Mat z2;  // L d_v^3 x d_v^2
};

/// M1, M2, M3 for a row-stochastic attention matrix (row sums within 1e-8
/// of one), leaving z1/z2 empty. Takes an explicit A so controlled regimes
/// (uniform, one-hot) are expressible.
MomentSet moments(const Mat& attention, const Mat& embeddings);

/// Z1 from its definition (softmax Jacobian route).
Mat z1_direct(const Mat& embeddings, const Mat& softmax_jac);

/// Z1 = X * M2.
Mat z1_via_moments(const Mat& embeddings, const Mat& m2);

/// Z2 from its definition (dense softmax second-derivative route).
Mat z2_direct(const Mat& embeddings, const Mat& softmax_second);

/// Z2 = (I_L ⊗ K_{d_v,d_v} ⊗ I_{d_v}) (X * X^T * M3).
Mat z2_via_moments(const Mat& embeddings, const Mat& m3);

/// Everything the closed-form Hessian blocks consume for one head:
/// M1..M3 (softmax only), Z1, Z2. Z1 uses the definitional route; Z2 uses
/// the third-moment route, which avoids the dense L^4 x L^2 tensor. For the
/// identity activation Z1 = X ⊗ X^T X and Z2 = 0.
MomentSet data_terms(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq,
                     std::size_t head = 0);

}  // namespace attnhess
