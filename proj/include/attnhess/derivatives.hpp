#pragma once

#include "attnhess/attention.hpp"

// First and second derivatives of the attention map, and the Jacobians of
// the layer output w.r.t. each weight matrix. Layout follows the row-major
// flattening convention: d f / d W := d vecr(f) / d vecr(W).

namespace attnhess {

/// First and second derivatives of row-wise softmax at an attention matrix.
struct SoftmaxJet {
  Mat jacobian;  // dA/dT, L^2 x L^2, block-diagonal
  Mat second;    // d^2A/dT^2, L^4 x L^2, block-diagonal of block columns
};

/// dA/dT: block-diagonal with row blocks diag(a_i) - a_i a_i^T.
Mat softmax_jacobian(const Mat& attention);

/// Hessian of one attention entry w.r.t. its similarity row:
/// A_ij (2 a_i a_i^T + E_jj - diag(a_i) - e_j a_i^T - a_i e_j^T).
Mat softmax_entry_hessian(const Mat& attention, Index i, Index j);

/// Per-row block D_i (L^3 x L) of the softmax second derivative.
Mat softmax_second_row(const Mat& attention, Index i);

/// d^2A/dT^2, materialized densely (cap-checked; use softmax_second_row
/// above the cap).
Mat softmax_second(const Mat& attention);

SoftmaxJet softmax_jet(const Mat& attention);

/// dA/dT for the spec's activation: softmax_jacobian(A) or I_{L^2}.
Mat attention_jacobian(const AttentionSpec& spec, const Mat& attention);

/// df/dW_V = A X ⊗ I_{d_v}.
Mat jac_value(const ForwardCache& cache, const Sequence& seq, std::size_t head = 0);

/// df/dW_Q = (I_L ⊗ W_V^T X^T) dA/dT (X ⊗ X W_K) / (t sqrt(d_k)).
Mat jac_query(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq,
              std::size_t head = 0);

/// df/dW_K = (I_L ⊗ W_V^T X^T) dA/dT (X W_Q ⊗ X) K_{d_k,d_v} / (t sqrt(d_k)).
/// The trailing commutation factor matches the arrangement of the (Q,K)
/// Hessian block, so downstream assembly needs no re-permutation.
Mat jac_key(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq,
            std::size_t head = 0);

/// df/dW_QK = (I_L ⊗ W_V^T X^T) dA/dT (X ⊗ X) / t  (single-matrix form).
Mat jac_qk_single(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq);

/// Jacobian addressed by parameter key.
Mat attention_jacobian_for(const AttentionSpec& spec, const ForwardCache& cache,
                           const Sequence& seq, const ParamKey& key);

}  // namespace attnhess
