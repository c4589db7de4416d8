#pragma once

#include "attnhess/tensor_ops.hpp"

#include <cstddef>
#include <vector>

// Generalized single self-attention layer under square loss:
//   f(X) = sum_h A^h(X) X W_V^h,   A^h(X) = a(T^h(X)),
// with T(X) = X W_Q W_K^T X^T / (t sqrt(d_k)) for the classical
// parameterization and T(X) = X W_QK X^T / t for the single-matrix one.
// The activation a is row-wise softmax or the identity.

namespace attnhess {

enum class Activation { softmax, identity };
enum class Parameterization { classical, single_matrix };

/// One training sequence: token embeddings X and labels Y, both L x d_v.
struct Sequence {
  Mat embeddings;
  Mat labels;

  Index seq_len() const { return embeddings.rows(); }
  Index embed_dim() const { return embeddings.cols(); }
};

struct HeadWeights {
  Mat w_query;  // d_v x d_k
  Mat w_key;    // d_v x d_k
  Mat w_value;  // d_v x d_v
};

struct AttentionSpec {
  Parameterization parameterization = Parameterization::classical;
  Activation activation = Activation::softmax;
  double temperature = 1.0;
  std::vector<HeadWeights> heads;  // classical; at least one head
  Mat w_qk;                        // single_matrix: d_v x d_v
  Mat w_value_single;              // single_matrix: d_v x d_v

  std::size_t head_count() const;
  Index embed_dim() const;  // d_v
  Index key_dim() const;    // d_k (equals d_v for single_matrix)
};

AttentionSpec classical_spec(Mat w_query, Mat w_key, Mat w_value,
                             Activation activation = Activation::softmax,
                             double temperature = 1.0);
AttentionSpec single_matrix_spec(Mat w_qk, Mat w_value,
                                 Activation activation = Activation::softmax,
                                 double temperature = 1.0);
AttentionSpec multihead_spec(std::vector<HeadWeights> heads,
                             Activation activation = Activation::softmax,
                             double temperature = 1.0);

/// Throws ShapeError / ValidationError if the spec or the pair does not conform.
void validate(const AttentionSpec& spec, const Sequence& seq);

// ---------------------------------------------------------------------------
// Parameter addressing. A parameter of the layer is identified by (head, tag);
// its entries are flattened row-major, and grids/oracles order parameters as
// [Q, K, V] per head ([QK, V] for the single-matrix parameterization).
// ---------------------------------------------------------------------------

enum class ParamTag { query, key, value, qk_combined };

struct ParamKey {
  std::size_t head = 0;
  ParamTag tag = ParamTag::query;

  bool operator==(const ParamKey&) const = default;
};

/// Canonical parameter ordering for the spec.
std::vector<ParamKey> parameter_order(const AttentionSpec& spec);

/// The weight matrix a key addresses.
const Mat& parameter_matrix(const AttentionSpec& spec, const ParamKey& key);
Index parameter_size(const AttentionSpec& spec, const ParamKey& key);

/// Flattened (row-major) parameters in the order of `keys`.
Vec pack_parameters(const AttentionSpec& spec, const std::vector<ParamKey>& keys);

/// Copy of `spec` with the addressed weights replaced by `theta`.
AttentionSpec with_parameters(const AttentionSpec& spec, const std::vector<ParamKey>& keys,
                              const Vec& theta);

// ---------------------------------------------------------------------------
// Forward map and loss.
// ---------------------------------------------------------------------------

struct HeadCache {
  Mat similarity;  // T, L x L
  Mat attention;   // A = a(T), L x L
};

/// Shared intermediates every derivative formula consumes. Immutable after
/// construction.
struct ForwardCache {
  std::vector<HeadCache> heads;
  Mat output;    // f(X), L x d_v
  Vec residual;  // vecr(f(X) - Y)
};

/// Query-key similarity T^h(X).
Mat similarity(const AttentionSpec& spec, const Sequence& seq, std::size_t head = 0);

/// Row-wise softmax (with row-max subtraction) or identity, per spec.
Mat attend(const AttentionSpec& spec, const Mat& sim);

ForwardCache forward(const AttentionSpec& spec, const Sequence& seq);

/// Square loss ||f(X) - Y||_F^2 / (L d_v).
double loss(const ForwardCache& cache, const Sequence& seq);

/// Gradient of the loss w.r.t. vecr(f): (2 / (L d_v)) vecr(f - Y).
Vec loss_gradient(const ForwardCache& cache, const Sequence& seq);

/// Hessian of the loss w.r.t. vecr(f): (2 / (L d_v)) I.
Mat loss_hessian(const Sequence& seq);

}  // namespace attnhess
