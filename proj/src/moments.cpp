#include "attnhess/moments.hpp"

#include "attnhess/derivatives.hpp"

#include <cmath>

namespace attnhess {

MomentSet moments(const Mat& attention, const Mat& embeddings) {
  const Index L = attention.rows();
  const Index d_v = embeddings.cols();
  if (attention.cols() != L) throw ShapeError("moments: attention must be square");
  if (embeddings.rows() != L) throw ShapeError("moments: embeddings row count must match attention");
  for (Index i = 0; i < L; ++i) {
    if (std::abs(attention.row(i).sum() - 1.0) > 1e-8) {
      throw ValidationError("moments: attention rows must sum to one");
    }
  }

  MomentSet out;
  out.m1 = attention * embeddings;
  out.m2 = Mat::Zero(L * d_v, d_v);
  out.m3 = Mat::Zero(L * d_v * d_v, d_v);
  for (Index i = 0; i < L; ++i) {
    const Vec mean = out.m1.row(i).transpose();
    Mat second = Mat::Zero(d_v, d_v);
    Mat third = Mat::Zero(d_v * d_v, d_v);
    for (Index j = 0; j < L; ++j) {
      const Vec centered = embeddings.row(j).transpose() - mean;
      const Mat outer = centered * centered.transpose();
      second += attention(i, j) * outer;
      third += attention(i, j) * kron(centered, outer);
    }
    out.m2.block(i * d_v, 0, d_v, d_v) = second;
    out.m3.block(i * d_v * d_v, 0, d_v * d_v, d_v) = third;
  }
  return out;
}

Mat z1_direct(const Mat& embeddings, const Mat& softmax_jac) {
  const Index L = embeddings.rows();
  if (softmax_jac.rows() != L * L || softmax_jac.cols() != L * L) {
    throw ShapeError("z1_direct: softmax Jacobian must be L^2 x L^2");
  }
  const Mat left = kron(Mat::Identity(L, L), embeddings.transpose());
  return left * softmax_jac * kron(embeddings, embeddings);
}

Mat z1_via_moments(const Mat& embeddings, const Mat& m2) {
  const Index L = embeddings.rows();
  const Index d_v = embeddings.cols();
  if (m2.rows() != L * d_v || m2.cols() != d_v) throw ShapeError("z1_via_moments: bad M2 shape");
  // X split into rows, M2 into d_v x d_v row blocks.
  const BlockPartition px = BlockPartition::row_blocks(L, 1, d_v);
  const BlockPartition pm = BlockPartition::row_blocks(L, d_v, d_v);
  return khatri_rao(embeddings, px, m2, pm);
}

Mat z2_direct(const Mat& embeddings, const Mat& softmax_second) {
  const Index L = embeddings.rows();
  const Index d_v = embeddings.cols();
  if (softmax_second.rows() != L * L * L * L || softmax_second.cols() != L * L) {
    throw ShapeError("z2_direct: second derivative must be L^4 x L^2");
  }
  const Mat xt = embeddings.transpose();
  const Mat left = kron(kron(kron(Mat::Identity(L, L), xt), xt), xt);
  check_element_cap(L * d_v * d_v * d_v, d_v * d_v, "Z2");
  return left * softmax_second * kron(embeddings, embeddings);
}

Mat z2_via_moments(const Mat& embeddings, const Mat& m3) {
  const Index L = embeddings.rows();
  const Index d_v = embeddings.cols();
  if (m3.rows() != L * d_v * d_v || m3.cols() != d_v) throw ShapeError("z2_via_moments: bad M3 shape");
  check_element_cap(L * d_v * d_v * d_v, d_v * d_v, "Z2");
  // X * X^T * M3 has row blocks x_i x_i^T ⊗ [M3]_i; the column blocks of
  // X^T are the rows of X, i.e. the d_v x 1 blocks of vecr(X).
  const Mat x_cols = unvecr(vecr(embeddings), L * d_v, 1);
  const Mat xxt = khatri_rao(embeddings, BlockPartition::row_blocks(L, 1, d_v),
                             x_cols, BlockPartition::row_blocks(L, d_v, 1));
  const Mat stacked = khatri_rao(xxt, BlockPartition::row_blocks(L, d_v, d_v),
                                 m3, BlockPartition::row_blocks(L, d_v * d_v, d_v));
  // Apply I_L ⊗ K_{d_v,d_v} ⊗ I_{d_v} as a row permutation: the commutation
  // factor swaps the middle two indices of the (i, a, b, c) row super-index.
  Mat out(stacked.rows(), stacked.cols());
  for (Index i = 0; i < L; ++i) {
    for (Index a = 0; a < d_v; ++a) {
      for (Index b = 0; b < d_v; ++b) {
        const Index src = ((i * d_v + a) * d_v + b) * d_v;
        const Index dst = ((i * d_v + b) * d_v + a) * d_v;
        out.middleRows(dst, d_v) = stacked.middleRows(src, d_v);
      }
    }
  }
  return out;
}

MomentSet data_terms(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq,
                     std::size_t head) {
  const Mat& x = seq.embeddings;
  const Mat& a = cache.heads.at(head).attention;
  const Index L = seq.seq_len();
  const Index d_v = seq.embed_dim();

  MomentSet out;
  if (spec.activation == Activation::softmax) {
    out = moments(a, x);
    out.z1 = z1_direct(x, softmax_jacobian(a));
    out.z2 = z2_via_moments(x, out.m3);
  } else {
    out.m1 = a * x;
    out.z1 = kron(x, x.transpose() * x);  // (I ⊗ X^T)(X ⊗ X)
    out.z2 = Mat::Zero(L * d_v * d_v * d_v, d_v * d_v);
  }
  return out;
}

}  // namespace attnhess
