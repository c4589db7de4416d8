#include "attnhess/finite_diff.hpp"

#include "attnhess/derivatives.hpp"
#include "attnhess/hessian.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace attnhess;
using testutil::max_abs_diff;
using testutil::random_mat;

TEST_SUITE("finite_diff") {

TEST_CASE("quadratic recovers its Hessian") {
  Mat m = random_mat(5, 5, 1, 0.3);
  m = Mat(0.5 * (m + m.transpose()));
  const auto f = [&](const Vec& theta) { return double(theta.transpose() * m * theta); };
  const Vec theta = random_mat(5, 1, 2, 0.3);
  CHECK(max_abs_diff(fd_hessian(f, theta), 2.0 * m) <= 1e-8);
}

TEST_CASE("inactive coordinates give zero rows and columns") {
  const auto f = [](const Vec& theta) { return theta(0) * theta(0) + std::sin(theta(2)); };
  Vec theta(3);
  theta << 0.3, 1.7, -0.2;
  const Mat h = fd_hessian(f, theta);
  CHECK(h.row(1).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(h.col(1).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("parameter cap") {
  const auto f = [](const Vec& theta) { return theta.squaredNorm(); };
  CHECK_THROWS_AS(fd_hessian(f, Vec::Zero(10), FdOptions{1.0, 4}), SizeLimitError);
}

TEST_CASE("non-finite loss is rejected") {
  const auto f = [](const Vec& theta) { return std::log(theta(0)); };
  Vec theta(1);
  theta << 1e-9;  // log goes negative-infinite across the stencil
  CHECK_THROWS_AS(fd_hessian(f, theta), ValidationError);
}

TEST_CASE("attention instance against the analytic assembly") {
  Sequence seq{random_mat(3, 4, 3, 0.3), random_mat(3, 4, 4, 0.3)};
  const AttentionSpec spec = classical_spec(random_mat(4, 2, 5, 0.4), random_mat(4, 2, 6, 0.4),
                                            random_mat(4, 4, 7, 0.4));
  const HessianGrid grid = assemble(spec, seq);
  const Mat oracle = fd_hessian(spec, seq, parameter_order(spec));
  CHECK(compare(grid.matrix(Part::full), oracle).max_abs_error <= 1e-5);
}

TEST_CASE("fd_jacobian") {
  Sequence seq{random_mat(3, 4, 8, 0.5), random_mat(3, 4, 9, 0.5)};

  SUBCASE("linear dependence on the value weights is exact") {
    const AttentionSpec spec = classical_spec(random_mat(4, 2, 10), random_mat(4, 2, 11),
                                              random_mat(4, 4, 12), Activation::identity);
    const ForwardCache cache = forward(spec, seq);
    CHECK(max_abs_diff(fd_jacobian(spec, seq, {0, ParamTag::value}), jac_value(cache, seq)) <=
          1e-10);
  }

  SUBCASE("zero value weights give a zero query direction") {
    const AttentionSpec spec =
        classical_spec(random_mat(4, 2, 13), random_mat(4, 2, 14), Mat::Zero(4, 4));
    CHECK(fd_jacobian(spec, seq, {0, ParamTag::query}).cwiseAbs().maxCoeff() <= 1e-11);
  }
}

TEST_CASE("compare") {
  SUBCASE("identical inputs") {
    const Mat a = random_mat(3, 4, 15);
    const OracleReport r = compare(a, a);
    CHECK(r.max_abs_error == 0);
    CHECK(r.rel_frobenius_error == 0);
    CHECK(r.analytic_norm == r.oracle_norm);
  }

  SUBCASE("single-entry perturbation is located") {
    const Mat o = random_mat(3, 4, 16);
    Mat a = o;
    a(2, 1) += 1e-3;
    const OracleReport r = compare(a, o);
    CHECK(r.max_abs_error == doctest::Approx(1e-3));
    CHECK(r.worst_row == 2);
    CHECK(r.worst_col == 1);
  }

  SUBCASE("random pair against direct loops") {
    const Mat a = random_mat(4, 3, 17);
    const Mat o = random_mat(4, 3, 18);
    const OracleReport r = compare(a, o);
    double max_abs = 0, fro = 0, onorm = 0;
    for (Index i = 0; i < 4; ++i) {
      for (Index j = 0; j < 3; ++j) {
        max_abs = std::max(max_abs, std::abs(a(i, j) - o(i, j)));
        fro += (a(i, j) - o(i, j)) * (a(i, j) - o(i, j));
        onorm += o(i, j) * o(i, j);
      }
    }
    CHECK(r.max_abs_error == doctest::Approx(max_abs));
    CHECK(r.rel_frobenius_error ==
          doctest::Approx(std::sqrt(fro) / std::max(1.0, std::sqrt(onorm))));
    CHECK_THROWS_AS(compare(a, random_mat(3, 3, 19)), ShapeError);
  }
}

TEST_CASE("hessian equals J^T J plus residual term where the functional part vanishes") {
  // Identity activation, value diagonal block: the loss is quadratic in W_V,
  // so fd_hessian must equal fd_jacobian^T (2/(L d_v)) fd_jacobian.
  Sequence seq{random_mat(3, 3, 20, 0.5), random_mat(3, 3, 21, 0.5)};
  const AttentionSpec spec = classical_spec(random_mat(3, 2, 22), random_mat(3, 2, 23),
                                            random_mat(3, 3, 24), Activation::identity);
  const Mat h = fd_hessian(spec, seq, {{0, ParamTag::value}});
  const Mat j = fd_jacobian(spec, seq, {0, ParamTag::value});
  CHECK(max_abs_diff(h, Mat(j.transpose() * (2.0 / 9.0) * j)) <= 1e-5);
  CHECK(max_abs_diff(h, h.transpose()) == 0);  // symmetrized by construction
}

TEST_CASE("step policy sanity on a quartic") {
  // Truncation error shrinks as the step shrinks until rounding dominates.
  const auto f = [](const Vec& theta) { return std::pow(theta(0), 4.0); };
  Vec theta(1);
  theta << 1.0;
  const double exact = 12.0;  // d^2/dx^2 x^4 at 1
  double prev = std::abs(fd_hessian(f, theta, FdOptions{1e4, 4096})(0, 0) - exact);
  bool decreased = true;
  for (double scale : {1e3, 1e2, 1e1, 1.0}) {
    const double err = std::abs(fd_hessian(f, theta, FdOptions{scale, 4096})(0, 0) - exact);
    decreased = decreased && err < prev;
    prev = err;
  }
  CHECK(decreased);  // still in the truncation-dominated regime at scale 1
}

}  // TEST_SUITE
