#pragma once

#include "attnhess/attention.hpp"
#include "attnhess/moments.hpp"

#include <string>
#include <utility>
#include <vector>

// Closed-form blocks of the loss Hessian of a single self-attention layer,
// split into the Gauss-Newton parts
//   H = H_o + H_f,  H_o(W_i,W_j) = (df/dW_i)^T (d2l/df2) (df/dW_j),
//                   H_f(W_i,W_j) = (dl/df ⊗ I) d2f/dW_i dW_j,
// plus the similarity-level (T) decomposition of the query-key sub-grid,
// the identity-activation closed forms, the single-matrix form, and the
// multi-head grid.
//
// Blocks involving the key weights are not printed in the source results;
// they are fixed here once by carrying the W_K-transposition commutation
// factor K_{d_k,d_v} through the chain rule (the same factor that appears in
// the (Q,K) block), and are pinned by finite-difference oracle tests.

namespace attnhess {

enum class Part { outer, functional, full };

struct HessianBlock {
  ParamKey row_param;
  ParamKey col_param;
  Part part = Part::full;
  Mat m;
};

/// Grid of Hessian blocks over an ordered parameter list; block (i,j) of a
/// part is stored row-major, with block(j,i) = block(i,j)^T by construction.
struct HessianGrid {
  std::vector<ParamKey> params;
  std::vector<Index> sizes;              // flattened size per parameter
  std::vector<Mat> outer_blocks;         // params.size()^2, row-major
  std::vector<Mat> functional_blocks;
  Index seq_len = 0, embed_dim = 0, key_dim = 0;

  std::size_t count() const { return params.size(); }
  const Mat& outer(std::size_t i, std::size_t j) const;
  const Mat& functional(std::size_t i, std::size_t j) const;
  Mat full(std::size_t i, std::size_t j) const;
  Mat block(Part part, std::size_t i, std::size_t j) const;
  /// All blocks of a part assembled into one matrix in parameter order.
  Mat matrix(Part part) const;
  Index total_size() const;
  std::size_t index_of(const ParamKey& key) const;
};

std::string param_label(const ParamKey& key, bool with_head = false);
std::string part_label(Part part);

/// Outer-product block for a parameter pair (classical parameterization,
/// softmax or identity activation).
HessianBlock outer_block(ParamTag row, ParamTag col, const AttentionSpec& spec,
                         const ForwardCache& cache, const MomentSet& terms);

/// Functional block for a parameter pair; the (V,V) block is exactly zero.
HessianBlock functional_block(ParamTag row, ParamTag col, const AttentionSpec& spec,
                              const ForwardCache& cache, const MomentSet& terms);

/// Full grid for any supported spec. Parameter ordering is [Q, K, V] per
/// head ([QK, V] for the single-matrix parameterization).
HessianGrid assemble(const AttentionSpec& spec, const Sequence& seq);

/// Identity-activation closed forms in terms of the intra-sequence
/// covariance Sigma = X^T X / L. Functional diagonal blocks are exact zeros.
HessianGrid linear_blocks(const AttentionSpec& spec, const Sequence& seq);

/// Full (QK,QK) Hessian of the single-matrix parameterization.
HessianBlock single_matrix_block(const AttentionSpec& spec, const Sequence& seq);

/// Batch mean of per-sequence Hessians (the formulas are single-sequence;
/// a batch is their average).
HessianGrid assemble_batch_mean(const AttentionSpec& spec, const std::vector<Sequence>& batch);

// ---------------------------------------------------------------------------
// Similarity-level decomposition of the query-key sub-grid (classical
// parameterization): H[QK-subgrid] = T_outer + T_functional with
//   T_outer      = V^T U V / d_k,
//   T_functional = [[0, B^T],[B, 0]] ⊗ I_{d_k} / sqrt(d_k)  (block-hollow),
// where U absorbs the square-loss scale 2/(L d_v) and the 1/t^2 temperature
// factor, and B the 2/(L d_v) and 1/t factors.
// ---------------------------------------------------------------------------

struct TDecomposition {
  Mat t_outer;       // 2 d_v d_k x 2 d_v d_k
  Mat t_functional;  // same shape, block-hollow
  Mat v_factor;      // V = [I ⊗ W_K | (W_Q ⊗ I) K_{d_k,d_v}], d_v^2 x 2 d_v d_k
  Mat u_core;        // U, d_v^2 x d_v^2
  Mat b_offdiag;     // B, d_v x d_v
};

/// Softmax-derived quantities frozen so that only the explicit temperature
/// prefactors vary.
struct FrozenQK {
  Mat z1;
  Mat z2;
  Vec residual;
  Mat w_query, w_key, w_value;
  Index seq_len = 0;
};

FrozenQK freeze_qk(const AttentionSpec& spec, const Sequence& seq);

/// T-decomposition with internal verification that T_outer + T_functional
/// equals the [Q,K]x[Q,K] sub-grid of assemble().
TDecomposition t_decompose(const AttentionSpec& spec, const Sequence& seq);

/// (T_outer, T_functional) assembled from frozen inputs with prefactors
/// 1/(t^2 d_k) and 1/(t sqrt(d_k)).
std::pair<Mat, Mat> temperature_prefactors(const FrozenQK& frozen, double temperature);

/// Multi-head grid over (head, parameter) pairs. Inter-head functional
/// blocks are exact zeros; inter-head outer blocks are Jacobian cross
/// products.
HessianGrid multihead_assemble(const AttentionSpec& spec, const Sequence& seq);

}  // namespace attnhess
