#include "attnhess/attention.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace attnhess;
using testutil::max_abs_diff;
using testutil::random_mat;

namespace {

// Naive triple-loop similarity oracle: T_ij = x_i^T Wq Wk^T x_j / sqrt(dk).
Mat naive_similarity(const Mat& x, const Mat& wq, const Mat& wk) {
  const Index L = x.rows(), d_v = x.cols(), d_k = wq.cols();
  Mat t = Mat::Zero(L, L);
  for (Index i = 0; i < L; ++i) {
    for (Index j = 0; j < L; ++j) {
      double acc = 0;
      for (Index a = 0; a < d_k; ++a) {
        double qa = 0, ka = 0;
        for (Index b = 0; b < d_v; ++b) {
          qa += x(i, b) * wq(b, a);
          ka += x(j, b) * wk(b, a);
        }
        acc += qa * ka;
      }
      t(i, j) = acc;
    }
  }
  return t / std::sqrt(static_cast<double>(d_k));
}

Sequence make_seq(std::uint64_t seed, Index L, Index d_v, double sx = 1.0, double sy = 1.0) {
  return {random_mat(L, d_v, seed, sx), random_mat(L, d_v, seed + 5000, sy)};
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("similarity") {
  const Sequence seq = make_seq(1, 3, 4);

  SUBCASE("zero weights give a zero map") {
    const AttentionSpec spec = classical_spec(Mat::Zero(4, 2), Mat::Zero(4, 2), random_mat(4, 4, 2));
    CHECK(similarity(spec, seq).norm() == 0);
  }

  SUBCASE("single token") {
    const Sequence one = make_seq(3, 1, 4);
    const Mat wq = random_mat(4, 2, 4), wk = random_mat(4, 2, 5);
    const AttentionSpec spec = classical_spec(wq, wk, Mat::Identity(4, 4));
    const Mat t = similarity(spec, one);
    CHECK(t.rows() == 1);
    CHECK(max_abs_diff(t, naive_similarity(one.embeddings, wq, wk)) <= 1e-14);
  }

  SUBCASE("random instance against the naive loop") {
    const Mat wq = random_mat(4, 2, 6), wk = random_mat(4, 2, 7);
    const AttentionSpec spec = classical_spec(wq, wk, Mat::Identity(4, 4));
    CHECK(max_abs_diff(similarity(spec, seq), naive_similarity(seq.embeddings, wq, wk)) <= 1e-13);
  }

  SUBCASE("single-matrix parameterization") {
    const Mat wqk = random_mat(4, 4, 8);
    const AttentionSpec spec = single_matrix_spec(wqk, Mat::Identity(4, 4));
    CHECK(max_abs_diff(similarity(spec, seq), seq.embeddings * wqk * seq.embeddings.transpose()) <=
          1e-14);
  }
}

TEST_CASE("attend") {
  const AttentionSpec softmax_spec =
      classical_spec(Mat::Zero(2, 1), Mat::Zero(2, 1), Mat::Zero(2, 2));

  SUBCASE("zero similarity gives uniform rows") {
    const Mat a = attend(softmax_spec, Mat::Zero(3, 3));
    CHECK(max_abs_diff(a, Mat::Constant(3, 3, 1.0 / 3.0)) <= 1e-15);
  }

  SUBCASE("identity activation passes through") {
    AttentionSpec spec = softmax_spec;
    spec.activation = Activation::identity;
    const Mat t = random_mat(3, 3, 9);
    CHECK(max_abs_diff(attend(spec, t), t) == 0);
  }

  SUBCASE("closed-form row") {
    Mat sim(2, 2);
    sim << 0.0, std::log(3.0), 0.0, std::log(3.0);
    const Mat a = attend(softmax_spec, sim);
    CHECK(a(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(a(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  }

  SUBCASE("rows sum to one and are shift invariant") {
    const Mat t = random_mat(4, 4, 10, 3.0);
    const Mat a = attend(softmax_spec, t);
    for (Index i = 0; i < 4; ++i) CHECK(a.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    Mat shifted = t;
    for (Index i = 0; i < 4; ++i) shifted.row(i).array() += 0.7 * static_cast<double>(i + 1);
    CHECK(max_abs_diff(attend(softmax_spec, shifted), a) <= 1e-12);
  }

  SUBCASE("extreme rows stay finite") {
    Mat t(2, 2);
    t << 1e4, -1e4, 500.0, 400.0;
    const Mat a = attend(softmax_spec, t);
    CHECK(a.allFinite());
    CHECK(a(0, 0) == doctest::Approx(1.0));
  }
}

TEST_CASE("forward") {
  SUBCASE("identity attention with identity values reproduces the input") {
    // T = I via identity activation and W_Q W_K^T = sqrt(d_k) I on X = I.
    const Index d = 2;
    const double c = std::pow(static_cast<double>(d), 0.25);
    AttentionSpec spec = classical_spec(c * Mat::Identity(d, d), c * Mat::Identity(d, d),
                                        Mat::Identity(d, d), Activation::identity);
    Sequence seq{Mat::Identity(d, d), Mat::Zero(d, d)};
    const ForwardCache cache = forward(spec, seq);
    CHECK(max_abs_diff(cache.heads[0].similarity, Mat::Identity(d, d)) <= 1e-14);
    CHECK(max_abs_diff(cache.output, seq.embeddings) <= 1e-14);
  }

  SUBCASE("zero value weights") {
    const Sequence seq = make_seq(11, 3, 4);
    const AttentionSpec spec =
        classical_spec(random_mat(4, 2, 12), random_mat(4, 2, 13), Mat::Zero(4, 4));
    const ForwardCache cache = forward(spec, seq);
    CHECK(cache.output.norm() == 0);
    CHECK(max_abs_diff(Mat(cache.residual), Mat(-vecr(seq.labels))) == 0);
  }

  SUBCASE("random instance against a naive matmul chain") {
    const Sequence seq = make_seq(14, 3, 4);
    const Mat wq = random_mat(4, 2, 15), wk = random_mat(4, 2, 16), wv = random_mat(4, 4, 17);
    const AttentionSpec spec = classical_spec(wq, wk, wv);
    const ForwardCache cache = forward(spec, seq);
    const Mat a = attend(spec, naive_similarity(seq.embeddings, wq, wk));
    Mat f = Mat::Zero(3, 4);
    for (Index i = 0; i < 3; ++i) {
      for (Index j = 0; j < 4; ++j) {
        for (Index k = 0; k < 3; ++k) {
          for (Index b = 0; b < 4; ++b) f(i, j) += a(i, k) * seq.embeddings(k, b) * wv(b, j);
        }
      }
    }
    CHECK(max_abs_diff(cache.output, f) <= 1e-13);
  }

  SUBCASE("two heads sum exactly") {
    const Sequence seq = make_seq(18, 3, 4);
    HeadWeights h1{random_mat(4, 2, 19), random_mat(4, 2, 20), random_mat(4, 4, 21)};
    HeadWeights h2{random_mat(4, 2, 22), random_mat(4, 2, 23), random_mat(4, 4, 24)};
    const ForwardCache both = forward(multihead_spec({h1, h2}), seq);
    const ForwardCache first = forward(classical_spec(h1.w_query, h1.w_key, h1.w_value), seq);
    const ForwardCache second = forward(classical_spec(h2.w_query, h2.w_key, h2.w_value), seq);
    CHECK(max_abs_diff(both.output, first.output + second.output) == 0);
  }
}

TEST_CASE("loss") {
  const Sequence seq = make_seq(25, 3, 4);

  SUBCASE("zero exactly at the labels") {
    AttentionSpec spec =
        classical_spec(random_mat(4, 2, 26), random_mat(4, 2, 27), random_mat(4, 4, 28));
    ForwardCache cache = forward(spec, seq);
    Sequence fitted = seq;
    fitted.labels = cache.output;
    const ForwardCache refit = forward(spec, fitted);
    CHECK(loss(refit, fitted) == 0);
    CHECK(loss(cache, seq) > 0);
  }

  SUBCASE("scalar case") {
    Sequence one{Mat::Constant(1, 1, 2.0), Mat::Constant(1, 1, -1.0)};
    AttentionSpec spec = single_matrix_spec(Mat::Zero(1, 1), Mat::Identity(1, 1));
    const ForwardCache cache = forward(spec, one);
    CHECK(cache.output(0, 0) == doctest::Approx(2.0));
    CHECK(loss(cache, one) == doctest::Approx(9.0));
  }

  SUBCASE("elementwise sum oracle and companion accessors") {
    const AttentionSpec spec =
        classical_spec(random_mat(4, 2, 29), random_mat(4, 2, 30), random_mat(4, 4, 31));
    const ForwardCache cache = forward(spec, seq);
    double acc = 0;
    for (Index i = 0; i < 3; ++i) {
      for (Index j = 0; j < 4; ++j) {
        const double d = cache.output(i, j) - seq.labels(i, j);
        acc += d * d;
      }
    }
    CHECK(loss(cache, seq) == doctest::Approx(acc / 12.0).epsilon(1e-13));
    CHECK(max_abs_diff(Mat(loss_gradient(cache, seq)), Mat((2.0 / 12.0) * cache.residual)) == 0);
    CHECK(max_abs_diff(loss_hessian(seq), (2.0 / 12.0) * Mat::Identity(12, 12)) == 0);
  }
}

TEST_CASE("temperature equals query rescaling") {
  const Sequence seq = make_seq(32, 3, 4);
  const Mat wq = random_mat(4, 2, 33), wk = random_mat(4, 2, 34);
  const double t = 2.7;
  const AttentionSpec heated = classical_spec(wq, wk, Mat::Identity(4, 4), Activation::softmax, t);
  const AttentionSpec rescaled = classical_spec(wq / t, wk, Mat::Identity(4, 4));
  CHECK(max_abs_diff(similarity(heated, seq), similarity(rescaled, seq)) <= 1e-14);
}

TEST_CASE("validation errors") {
  Sequence bad{random_mat(3, 4, 35), random_mat(2, 4, 36)};
  const AttentionSpec spec =
      classical_spec(random_mat(4, 2, 37), random_mat(4, 2, 38), random_mat(4, 4, 39));
  CHECK_THROWS_AS(forward(spec, bad), ShapeError);

  Sequence seq = make_seq(40, 3, 4);
  const AttentionSpec mis =
      classical_spec(random_mat(5, 2, 41), random_mat(5, 2, 42), random_mat(5, 5, 43));
  CHECK_THROWS_AS(forward(mis, seq), ShapeError);

  AttentionSpec cold = spec;
  cold.temperature = 0.0;
  CHECK_THROWS_AS(forward(cold, seq), ValidationError);
}

TEST_CASE("parameter packing round trip") {
  const AttentionSpec spec =
      classical_spec(random_mat(4, 2, 44), random_mat(4, 2, 45), random_mat(4, 4, 46));
  const auto keys = parameter_order(spec);
  CHECK(keys.size() == 3);
  const Vec theta = pack_parameters(spec, keys);
  CHECK(theta.size() == 8 + 8 + 16);
  const Vec bumped = theta + Vec::Ones(theta.size());
  const AttentionSpec moved = with_parameters(spec, keys, bumped);
  CHECK(max_abs_diff(Mat(pack_parameters(moved, keys)), Mat(bumped)) == 0);
}

}  // TEST_SUITE
