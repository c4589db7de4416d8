#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <vector>

// Dense kernels for the vectorization convention used throughout this
// library and for the Kronecker-family operations the closed-form Hessian
// expressions are written in.
//
// Conventions (fixed once, everywhere):
//   * matrices are flattened row-major ("vecr"); vecr(A)[i*cols + j] = A(i,j)
//   * commutation(n, m) maps vecr(A) -> vecr(A^T) for any m x n matrix A
//   * all scalars are IEEE double precision

namespace attnhess {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

class SizeLimitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class PartitionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Cap on the element count of any dense matrix these kernels materialize.
/// Exceeding it throws SizeLimitError instead of silently allocating;
/// Z2-sized tensors grow like L*d_v^3 x d_v^2 and must fail loudly.
std::size_t element_cap();
void set_element_cap(std::size_t cap);

/// Throws SizeLimitError if a rows x cols allocation would exceed the cap.
void check_element_cap(Index rows, Index cols, const char* label);

/// Row-major flattening of a matrix into a column vector.
Vec vecr(const Mat& m);

/// Inverse of vecr for a known shape.
Mat unvecr(const Vec& v, Index rows, Index cols);

/// Kronecker product, materialized densely (cap-checked).
Mat kron(const Mat& a, const Mat& b);

/// Commutation matrix K_{n,m} of size mn x mn: an explicit 0/1 permutation
/// with commutation(n, m) * vecr(A) = vecr(A^T) for every m x n matrix A.
Mat commutation(Index n, Index m);

/// How a matrix is split into a grid of blocks before a block-wise
/// Kronecker product. Block sizes must sum to the partitioned dimensions.
struct BlockPartition {
  std::vector<Index> row_sizes;
  std::vector<Index> col_sizes;

  /// Single-block partition covering the whole matrix.
  static BlockPartition single(Index rows, Index cols);
  /// `count` equal row blocks of `rows_per_block` rows, one column block.
  static BlockPartition row_blocks(Index count, Index rows_per_block, Index cols);

  Index total_rows() const;
  Index total_cols() const;
};

/// Khatri-Rao (block-wise Kronecker) product: block (i,j) of the result is
/// kron(block_a(i,j), block_b(i,j)). Partitions must have the same grid
/// shape and must tile their matrices exactly.
Mat khatri_rao(const Mat& a, const BlockPartition& pa, const Mat& b, const BlockPartition& pb);

/// Shuffling matrix S = (I_d ⊗ K_{d,d})(vecr(I_d) ⊗ I_d) of size d^3 x d.
/// Identically equal to (K_{d,d} ⊗ I_d)(I_d ⊗ vecr(I_d)).
Mat shuffle_matrix(Index d);

/// Direct sum of the given blocks; off-block entries are exactly zero.
Mat block_diag(const std::vector<Mat>& blocks);

}  // namespace attnhess
