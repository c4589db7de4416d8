#include "attnhess/derivatives.hpp"

#include <cmath>

namespace attnhess {

namespace {

double qk_scale(const AttentionSpec& spec) {
  if (spec.parameterization == Parameterization::classical) {
    return 1.0 / (spec.temperature * std::sqrt(static_cast<double>(spec.key_dim())));
  }
  return 1.0 / spec.temperature;
}

}  // namespace

Mat softmax_jacobian(const Mat& attention) {
  const Index L = attention.rows();
  if (attention.cols() != L) throw ShapeError("softmax_jacobian: attention must be square");
  check_element_cap(L * L, L * L, "softmax_jacobian");
  Mat out = Mat::Zero(L * L, L * L);
  for (Index i = 0; i < L; ++i) {
    const Vec a = attention.row(i).transpose();
    out.block(i * L, i * L, L, L) = Mat(a.asDiagonal()) - a * a.transpose();
  }
  return out;
}

Mat softmax_entry_hessian(const Mat& attention, Index i, Index j) {
  const Index L = attention.rows();
  const Vec a = attention.row(i).transpose();
  Mat h = 2.0 * a * a.transpose();
  h -= Mat(a.asDiagonal());
  h(j, j) += 1.0;
  h.col(j) -= a;
  h.row(j) -= a.transpose();
  return attention(i, j) * h;
}

Mat softmax_second_row(const Mat& attention, Index i) {
  const Index L = attention.rows();
  if (attention.cols() != L) throw ShapeError("softmax_second_row: attention must be square");
  // D_i stacks e_i ⊗ (d^2 A_ij / dT_i^2) over j; only the i-th L x L slice
  // of each L^2 x L block is nonzero.
  Mat d = Mat::Zero(L * L * L, L);
  for (Index j = 0; j < L; ++j) {
    d.block(j * L * L + i * L, 0, L, L) = softmax_entry_hessian(attention, i, j);
  }
  return d;
}

Mat softmax_second(const Mat& attention) {
  const Index L = attention.rows();
  if (attention.cols() != L) throw ShapeError("softmax_second: attention must be square");
  check_element_cap(L * L * L * L, L * L, "softmax_second");
  Mat out = Mat::Zero(L * L * L * L, L * L);
  for (Index i = 0; i < L; ++i) {
    out.block(i * L * L * L, i * L, L * L * L, L) = softmax_second_row(attention, i);
  }
  return out;
}

SoftmaxJet softmax_jet(const Mat& attention) {
  return {softmax_jacobian(attention), softmax_second(attention)};
}

Mat attention_jacobian(const AttentionSpec& spec, const Mat& attention) {
  if (spec.activation == Activation::identity) {
    const Index n = attention.rows() * attention.cols();
    return Mat::Identity(n, n);
  }
  return softmax_jacobian(attention);
}

Mat jac_value(const ForwardCache& cache, const Sequence& seq, std::size_t head) {
  const Mat& a = cache.heads.at(head).attention;
  return kron(a * seq.embeddings, Mat::Identity(seq.embed_dim(), seq.embed_dim()));
}

Mat jac_query(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq,
              std::size_t head) {
  if (spec.parameterization != Parameterization::classical) {
    throw ValidationError("jac_query requires the classical parameterization");
  }
  const Mat& x = seq.embeddings;
  const HeadWeights& h = spec.heads.at(head);
  const Mat left = kron(Mat::Identity(seq.seq_len(), seq.seq_len()),
                        h.w_value.transpose() * x.transpose());
  const Mat g = attention_jacobian(spec, cache.heads.at(head).attention);
  return qk_scale(spec) * (left * g * kron(x, x * h.w_key));
}

Mat jac_key(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq,
            std::size_t head) {
  if (spec.parameterization != Parameterization::classical) {
    throw ValidationError("jac_key requires the classical parameterization");
  }
  const Mat& x = seq.embeddings;
  const HeadWeights& h = spec.heads.at(head);
  const Mat left = kron(Mat::Identity(seq.seq_len(), seq.seq_len()),
                        h.w_value.transpose() * x.transpose());
  const Mat g = attention_jacobian(spec, cache.heads.at(head).attention);
  const Mat comm = commutation(h.w_key.cols(), h.w_key.rows());  // K_{d_k, d_v}
  return qk_scale(spec) * (left * g * kron(x * h.w_query, x) * comm);
}

Mat jac_qk_single(const AttentionSpec& spec, const ForwardCache& cache, const Sequence& seq) {
  if (spec.parameterization != Parameterization::single_matrix) {
    throw ValidationError("jac_qk_single requires the single-matrix parameterization");
  }
  const Mat& x = seq.embeddings;
  const Mat left = kron(Mat::Identity(seq.seq_len(), seq.seq_len()),
                        spec.w_value_single.transpose() * x.transpose());
  const Mat g = attention_jacobian(spec, cache.heads.at(0).attention);
  return qk_scale(spec) * (left * g * kron(x, x));
}

Mat attention_jacobian_for(const AttentionSpec& spec, const ForwardCache& cache,
                           const Sequence& seq, const ParamKey& key) {
  switch (key.tag) {
    case ParamTag::query: return jac_query(spec, cache, seq, key.head);
    case ParamTag::key: return jac_key(spec, cache, seq, key.head);
    case ParamTag::value: return jac_value(cache, seq, key.head);
    case ParamTag::qk_combined: return jac_qk_single(spec, cache, seq);
  }
  throw ValidationError("unknown parameter tag");
}

}  // namespace attnhess
