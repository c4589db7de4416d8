#include "attnhess/hessian.hpp"

#include "attnhess/derivatives.hpp"
#include "attnhess/finite_diff.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace attnhess;
using testutil::max_abs_diff;
using testutil::random_mat;

namespace {

Sequence make_seq(std::uint64_t seed, Index L, Index d_v, double sx = 0.4, double sy = 0.4) {
  return {random_mat(L, d_v, seed, sx), random_mat(L, d_v, seed + 5000, sy)};
}

AttentionSpec make_spec(std::uint64_t seed, Index d_v, Index d_k,
                        Activation act = Activation::softmax, double w = 0.4) {
  return classical_spec(random_mat(d_v, d_k, seed, w), random_mat(d_v, d_k, seed + 100, w),
                        random_mat(d_v, d_v, seed + 200, w), act);
}

}  // namespace

TEST_SUITE("hessian") {

TEST_CASE("outer blocks") {
  SUBCASE("value-value with identity attention is X^T X kron I") {
    const Index d = 2;
    const double c = std::pow(static_cast<double>(d), 0.25);
    const AttentionSpec spec = classical_spec(c * Mat::Identity(d, d), c * Mat::Identity(d, d),
                                              random_mat(d, d, 1), Activation::identity);
    Sequence seq{Mat::Identity(d, d), Mat::Zero(d, d)};  // T = I, so A = I
    const ForwardCache cache = forward(spec, seq);
    const MomentSet terms = data_terms(spec, cache, seq);
    const HessianBlock block = outer_block(ParamTag::value, ParamTag::value, spec, cache, terms);
    const Mat expected = (2.0 / 4.0) * kron(Mat(seq.embeddings.transpose() * seq.embeddings),
                                            Mat::Identity(d, d));
    CHECK(max_abs_diff(block.m, expected) <= 1e-13);
  }

  SUBCASE("zero value weights kill the query-query block") {
    const Sequence seq = make_seq(2, 3, 4);
    const AttentionSpec spec =
        classical_spec(random_mat(4, 2, 3), random_mat(4, 2, 4), Mat::Zero(4, 4));
    const ForwardCache cache = forward(spec, seq);
    const MomentSet terms = data_terms(spec, cache, seq);
    CHECK(outer_block(ParamTag::query, ParamTag::query, spec, cache, terms).m.norm() == 0);
  }

  SUBCASE("random blocks against the Gauss-Newton oracle") {
    const Sequence seq = make_seq(5, 3, 4, 0.3, 0.3);
    const AttentionSpec spec = make_spec(6, 4, 2);
    const ForwardCache cache = forward(spec, seq);
    const MomentSet terms = data_terms(spec, cache, seq);
    const double scale = 2.0 / 12.0;
    const Mat jq = fd_jacobian(spec, seq, {0, ParamTag::query});
    const Mat jk = fd_jacobian(spec, seq, {0, ParamTag::key});
    const Mat jv = fd_jacobian(spec, seq, {0, ParamTag::value});
    const auto gn = [&](const Mat& a, const Mat& b) { return Mat(scale * a.transpose() * b); };
    CHECK(max_abs_diff(outer_block(ParamTag::query, ParamTag::query, spec, cache, terms).m,
                       gn(jq, jq)) <= 1e-6);
    CHECK(max_abs_diff(outer_block(ParamTag::key, ParamTag::key, spec, cache, terms).m,
                       gn(jk, jk)) <= 1e-6);
    CHECK(max_abs_diff(outer_block(ParamTag::value, ParamTag::value, spec, cache, terms).m,
                       gn(jv, jv)) <= 1e-6);
    CHECK(max_abs_diff(outer_block(ParamTag::query, ParamTag::key, spec, cache, terms).m,
                       gn(jq, jk)) <= 1e-6);
    CHECK(max_abs_diff(outer_block(ParamTag::value, ParamTag::query, spec, cache, terms).m,
                       gn(jv, jq)) <= 1e-6);
    CHECK(max_abs_diff(outer_block(ParamTag::value, ParamTag::key, spec, cache, terms).m,
                       gn(jv, jk)) <= 1e-6);
  }
}

TEST_CASE("functional blocks") {
  SUBCASE("value-value is exactly zero") {
    const Sequence seq = make_seq(7, 3, 4);
    const AttentionSpec spec = make_spec(8, 4, 2);
    const ForwardCache cache = forward(spec, seq);
    const MomentSet terms = data_terms(spec, cache, seq);
    const HessianBlock block =
        functional_block(ParamTag::value, ParamTag::value, spec, cache, terms);
    CHECK(block.m.rows() == 16);
    CHECK(block.m.cols() == 16);
    CHECK(block.m.norm() == 0);
  }

  SUBCASE("zero residual kills every functional block") {
    Sequence seq = make_seq(9, 3, 4);
    const AttentionSpec spec = make_spec(10, 4, 2);
    seq.labels = forward(spec, seq).output;  // fit exactly
    const ForwardCache cache = forward(spec, seq);
    const MomentSet terms = data_terms(spec, cache, seq);
    for (ParamTag r : {ParamTag::query, ParamTag::key, ParamTag::value}) {
      for (ParamTag c : {ParamTag::query, ParamTag::key, ParamTag::value}) {
        CHECK(functional_block(r, c, spec, cache, terms).m.norm() <= 1e-14);
      }
    }
  }

  SUBCASE("functional equals full oracle minus outer") {
    const Sequence seq = make_seq(11, 3, 3, 0.3, 0.3);
    const AttentionSpec spec = make_spec(12, 3, 2);
    const HessianGrid grid = assemble(spec, seq);
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    const Mat functional_oracle = oracle - grid.matrix(Part::outer);
    CHECK(max_abs_diff(grid.matrix(Part::functional), functional_oracle) <= 1e-5);
  }
}

TEST_CASE("assemble") {
  SUBCASE("grid symmetry is exact by construction") {
    const Sequence seq = make_seq(13, 3, 4);
    const AttentionSpec spec = make_spec(14, 4, 2);
    const HessianGrid grid = assemble(spec, seq);
    for (std::size_t i = 0; i < grid.count(); ++i) {
      for (std::size_t j = 0; j < grid.count(); ++j) {
        CHECK(max_abs_diff(grid.outer(j, i), grid.outer(i, j).transpose()) == 0);
        CHECK(max_abs_diff(grid.functional(j, i), grid.functional(i, j).transpose()) == 0);
      }
    }
  }

  SUBCASE("small instance against the oracle") {
    const Sequence seq = make_seq(0, 2, 2, 0.5, 0.5);
    const AttentionSpec spec = make_spec(0, 2, 1, Activation::softmax, 0.5);
    const HessianGrid grid = assemble(spec, seq);
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    CHECK(compare(grid.matrix(Part::full), oracle).max_abs_error <= 1e-5);
  }

  SUBCASE("zero values and zero labels leave only the value outer block") {
    Sequence seq = make_seq(15, 3, 4);
    seq.labels.setZero();
    const AttentionSpec spec =
        classical_spec(random_mat(4, 2, 16), random_mat(4, 2, 17), Mat::Zero(4, 4));
    const HessianGrid grid = assemble(spec, seq);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(grid.functional(i, j).norm() == 0);  // residual is zero
        const bool is_vv = grid.params[i].tag == ParamTag::value &&
                           grid.params[j].tag == ParamTag::value;
        if (!is_vv) CHECK(grid.outer(i, j).norm() == 0);
      }
    }
    const std::size_t v = grid.index_of({0, ParamTag::value});
    CHECK(grid.outer(v, v).norm() > 0);
  }

  SUBCASE("temperature variants still match the oracle") {
    const Sequence seq = make_seq(18, 3, 4, 0.3, 0.3);
    AttentionSpec spec = make_spec(19, 4, 2);
    spec.temperature = 3.0;
    const HessianGrid grid = assemble(spec, seq);
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    CHECK(compare(grid.matrix(Part::full), oracle).max_abs_error <= 1e-5);
  }
}

TEST_CASE("gauss-newton consistency sweep") {
  // outer + functional equals the fd Hessian for L<=3, d_v<=4, d_k<=2.
  for (std::uint64_t s = 0; s < 6; ++s) {
    const Index L = 2 + static_cast<Index>(s % 2);
    const Index d_v = 2 + static_cast<Index>(s % 3);
    const Index d_k = 1 + static_cast<Index>(s % 2);
    const Sequence seq = make_seq(600 + s, L, d_v, 0.3, 0.3);
    const Activation act = s % 2 ? Activation::identity : Activation::softmax;
    const AttentionSpec spec = make_spec(700 + s, d_v, d_k, act);
    const HessianGrid grid = assemble(spec, seq);
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    CHECK(compare(grid.matrix(Part::full), oracle).max_abs_error <= 1e-5);
  }
}

TEST_CASE("outer grid is positive semidefinite") {
  const Sequence seq = make_seq(20, 3, 4);
  const AttentionSpec spec = make_spec(21, 4, 2);
  const Mat outer = assemble(spec, seq).matrix(Part::outer);
  const Vec eig = Eigen::SelfAdjointEigenSolver<Mat>(outer).eigenvalues();
  CHECK(eig.minCoeff() >= -1e-8 * eig.maxCoeff());
}

TEST_CASE("value-weight scaling moves the query block quadratically") {
  const Sequence seq = make_seq(22, 3, 4);
  const Mat wq = random_mat(4, 2, 23), wk = random_mat(4, 2, 24), wv = random_mat(4, 4, 25);
  const double s = 2.0;
  const AttentionSpec base = classical_spec(wq, wk, wv);
  const AttentionSpec scaled = classical_spec(wq, wk, Mat(s * wv));
  const ForwardCache cache_b = forward(base, seq);
  const ForwardCache cache_s = forward(scaled, seq);
  const MomentSet terms_b = data_terms(base, cache_b, seq);
  const MomentSet terms_s = data_terms(scaled, cache_s, seq);
  const Mat qq_b = outer_block(ParamTag::query, ParamTag::query, base, cache_b, terms_b).m;
  const Mat qq_s = outer_block(ParamTag::query, ParamTag::query, scaled, cache_s, terms_s).m;
  CHECK(max_abs_diff(qq_s, Mat(s * s * qq_b)) == 0);  // attention ignores W_V
}

TEST_CASE("linear attention closed forms") {
  SUBCASE("functional diagonal blocks vanish") {
    const Sequence seq = make_seq(26, 3, 4);
    const AttentionSpec spec = make_spec(27, 4, 2, Activation::identity);
    const HessianGrid grid = linear_blocks(spec, seq);
    for (std::size_t i = 0; i < 3; ++i) CHECK(grid.functional(i, i).norm() == 0);
  }

  SUBCASE("unit covariance with identity weights") {
    // X with orthonormal rows times sqrt(L): Sigma = I. All weights identity,
    // d_k = d_v: the value outer block is (2 L^2 / (d_v d_k)) I.
    const Index L = 2, d = 2;
    Sequence seq{std::sqrt(static_cast<double>(L)) * Mat::Identity(L, d), Mat::Zero(L, d)};
    const AttentionSpec spec = classical_spec(Mat::Identity(d, d), Mat::Identity(d, d),
                                              Mat::Identity(d, d), Activation::identity);
    const HessianGrid grid = linear_blocks(spec, seq);
    const std::size_t v = grid.index_of({0, ParamTag::value});
    const double expected = 2.0 * L * L / static_cast<double>(d * d);
    CHECK(max_abs_diff(grid.outer(v, v), expected * Mat::Identity(d * d, d * d)) <= 1e-13);
  }

  SUBCASE("random instance against assemble and the oracle") {
    const Sequence seq = make_seq(28, 3, 3, 0.4, 0.4);
    const AttentionSpec spec = make_spec(29, 3, 2, Activation::identity);
    const HessianGrid closed = linear_blocks(spec, seq);
    const HessianGrid general = assemble(spec, seq);
    CHECK(max_abs_diff(closed.matrix(Part::outer), general.matrix(Part::outer)) <= 1e-12);
    CHECK(max_abs_diff(closed.matrix(Part::functional), general.matrix(Part::functional)) <=
          1e-12);
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    CHECK(compare(closed.matrix(Part::full), oracle).max_abs_error <= 1e-6);
  }

  SUBCASE("softmax spec is rejected") {
    const Sequence seq = make_seq(30, 3, 3);
    CHECK_THROWS_AS(linear_blocks(make_spec(31, 3, 2), seq), ValidationError);
  }
}

TEST_CASE("single-matrix parameterization") {
  SUBCASE("zero values and labels give a zero block") {
    Sequence seq = make_seq(32, 3, 3);
    seq.labels.setZero();
    const AttentionSpec spec = single_matrix_spec(random_mat(3, 3, 33), Mat::Zero(3, 3));
    CHECK(single_matrix_block(spec, seq).m.norm() == 0);
  }

  SUBCASE("saturated attention gives a zero block") {
    // Huge similarities underflow the off-argmax entries to exact zeros.
    Sequence seq{100.0 * Mat::Identity(3, 3), random_mat(3, 3, 34)};
    const AttentionSpec spec = single_matrix_spec(Mat::Identity(3, 3), random_mat(3, 3, 35));
    CHECK(single_matrix_block(spec, seq).m.norm() == 0);
  }

  SUBCASE("random instance against the oracle") {
    const Sequence seq = make_seq(36, 3, 3, 0.4, 0.4);
    const AttentionSpec spec =
        single_matrix_spec(random_mat(3, 3, 37, 0.4), random_mat(3, 3, 38, 0.4));
    const HessianGrid grid = assemble(spec, seq);
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    CHECK(compare(grid.matrix(Part::full), oracle).max_abs_error <= 1e-5);
    CHECK(max_abs_diff(single_matrix_block(spec, seq).m, grid.full(0, 0)) == 0);
  }
}

TEST_CASE("t-decomposition") {
  const Sequence seq = make_seq(39, 3, 4, 0.4, 0.6);
  const AttentionSpec spec = make_spec(40, 4, 2);

  SUBCASE("zero residual zeroes the hollow part") {
    Sequence fitted = seq;
    fitted.labels = forward(spec, fitted).output;
    const TDecomposition td = t_decompose(spec, fitted);
    CHECK(td.b_offdiag.norm() <= 1e-14);
    CHECK(td.t_functional.norm() <= 1e-14);
  }

  SUBCASE("sum reproduces the query-key sub-grid") {
    const TDecomposition td = t_decompose(spec, seq);  // throws on mismatch
    const HessianGrid grid = assemble(spec, seq);
    Mat sub(16, 16);
    sub.topLeftCorner(8, 8) = grid.full(0, 0);
    sub.topRightCorner(8, 8) = grid.full(0, 1);
    sub.bottomLeftCorner(8, 8) = grid.full(1, 0);
    sub.bottomRightCorner(8, 8) = grid.full(1, 1);
    CHECK((td.t_outer + td.t_functional - sub).norm() <= 1e-10 * std::max(1.0, sub.norm()));
  }

  SUBCASE("hollow structure and paired spectrum") {
    const TDecomposition td = t_decompose(spec, seq);
    CHECK(td.t_functional.topLeftCorner(8, 8).norm() == 0);
    CHECK(td.t_functional.bottomRightCorner(8, 8).norm() == 0);
    const Vec eig = Eigen::SelfAdjointEigenSolver<Mat>(td.t_functional).eigenvalues();
    const Index n = eig.size();
    for (Index i = 0; i < n; ++i) {
      CHECK(std::abs(eig(i) + eig(n - 1 - i)) <= 1e-8);
    }
    // Each +/- lambda appears with multiplicity d_k = 2.
    for (Index g = n / 2; g + 1 < n; g += 2) {
      CHECK(std::abs(eig(g) - eig(g + 1)) <= 1e-8 * std::max(1.0, eig.cwiseAbs().maxCoeff()));
    }
  }

  SUBCASE("outer rank bound for d_k < d_v") {
    const TDecomposition td = t_decompose(spec, seq);
    const Vec eig = Eigen::SelfAdjointEigenSolver<Mat>(td.t_outer).eigenvalues();
    const double tol = 1e-8 * eig.cwiseAbs().maxCoeff();
    const Index rank = (eig.cwiseAbs().array() > tol).count();
    CHECK(rank <= 2 * 2 * 4 - 2 * 2);  // 2 d_k d_v - d_k^2 = 12
  }
}

TEST_CASE("temperature prefactors") {
  const Sequence seq = make_seq(41, 3, 4, 0.4, 0.6);
  const AttentionSpec spec = make_spec(42, 4, 2);
  const FrozenQK frozen = freeze_qk(spec, seq);

  SUBCASE("t = 1 matches the decomposition") {
    const TDecomposition td = t_decompose(spec, seq);
    const auto [outer1, functional1] = temperature_prefactors(frozen, 1.0);
    CHECK(max_abs_diff(outer1, td.t_outer) == 0);
    CHECK(max_abs_diff(functional1, td.t_functional) == 0);
  }

  SUBCASE("exact prefactor ratios") {
    const auto [outer1, functional1] = temperature_prefactors(frozen, 1.0);
    const auto [outer2, functional2] = temperature_prefactors(frozen, 2.0);
    CHECK(max_abs_diff(outer2, Mat(outer1 / 4.0)) <= 1e-12 * outer1.cwiseAbs().maxCoeff());
    CHECK(max_abs_diff(functional2, Mat(functional1 / 2.0)) <=
          1e-12 * functional1.cwiseAbs().maxCoeff());
  }

  SUBCASE("large temperature tilts the balance to the functional part") {
    const auto [outer1, functional1] = temperature_prefactors(frozen, 1.0);
    const auto [outer10, functional10] = temperature_prefactors(frozen, 10.0);
    const double ratio1 = outer1.norm() / functional1.norm();
    const double ratio10 = outer10.norm() / functional10.norm();
    CHECK(ratio10 == doctest::Approx(ratio1 / 10.0).epsilon(1e-10));
  }

  SUBCASE("non-positive temperature is rejected") {
    CHECK_THROWS_AS(temperature_prefactors(frozen, 0.0), ValidationError);
  }
}

TEST_CASE("multi-head assembly") {
  const Sequence seq = make_seq(43, 3, 4, 0.3, 0.3);

  SUBCASE("one head is identical to assemble") {
    const AttentionSpec spec = make_spec(44, 4, 2);
    const HessianGrid a = assemble(spec, seq);
    const HessianGrid b = multihead_assemble(spec, seq);
    CHECK(max_abs_diff(a.matrix(Part::full), b.matrix(Part::full)) == 0);
  }

  SUBCASE("two heads: inter-head functional blocks vanish, full grid matches the oracle") {
    HeadWeights h1{random_mat(4, 2, 45, 0.4), random_mat(4, 2, 46, 0.4), random_mat(4, 4, 47, 0.4)};
    HeadWeights h2{random_mat(4, 2, 48, 0.4), random_mat(4, 2, 49, 0.4), random_mat(4, 4, 50, 0.4)};
    const AttentionSpec spec = multihead_spec({h1, h2});
    const HessianGrid grid = multihead_assemble(spec, seq);
    CHECK(grid.count() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        if (grid.params[i].head != grid.params[j].head) {
          CHECK(grid.functional(i, j).norm() == 0);
        }
      }
    }
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    CHECK(compare(grid.matrix(Part::full), oracle).max_abs_error <= 1e-5);
  }

  SUBCASE("zeroed second head still matches the oracle") {
    HeadWeights h1{random_mat(4, 2, 51, 0.4), random_mat(4, 2, 52, 0.4), random_mat(4, 4, 53, 0.4)};
    HeadWeights h2{Mat::Zero(4, 2), Mat::Zero(4, 2), Mat::Zero(4, 4)};
    const AttentionSpec spec = multihead_spec({h1, h2});
    const HessianGrid grid = multihead_assemble(spec, seq);
    const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
    CHECK(compare(grid.matrix(Part::full), oracle).max_abs_error <= 1e-5);
    // Head-2 value curvature reflects only the uniform attention at T = 0.
    const std::size_t v2 = grid.index_of({1, ParamTag::value});
    CHECK(grid.outer(v2, v2).norm() > 0);
  }
}

TEST_CASE("batch mean is the average of per-sequence grids") {
  const AttentionSpec spec = make_spec(54, 3, 2);
  const std::vector<Sequence> batch{make_seq(55, 3, 3), make_seq(56, 3, 3), make_seq(57, 3, 3)};
  const HessianGrid mean = assemble_batch_mean(spec, batch);
  Mat expected = Mat::Zero(mean.total_size(), mean.total_size());
  for (const Sequence& seq : batch) expected += assemble(spec, seq).matrix(Part::full);
  expected /= 3.0;
  CHECK(max_abs_diff(mean.matrix(Part::full), expected) <= 1e-15);
}

}  // TEST_SUITE
