#include <doctest.h>

#include <elffr/basis.hpp>
#include <elffr/covariance.hpp>

#include "oracles.hpp"

#include <random>

using namespace elffr;

namespace {

struct Grouped {
  std::vector<long> ids;
  SubjectIndex subjects;
};

Grouped groups(const std::vector<int>& visits) {
  Grouped g;
  for (std::size_t i = 0; i < visits.size(); ++i)
    for (int j = 0; j < visits[i]; ++j) g.ids.push_back(static_cast<long>(i));
  g.subjects = index_subjects(g.ids);
  return g;
}

// Direct average of r_ij(l) r_ik(m) over the pair set: j != k always,
// j == k only when l != m.
MatrixXd averaged_products(const MatrixXd& r, const SubjectIndex& s) {
  const Index L = r.cols();
  MatrixXd out(L, L);
  for (Index l = 0; l < L; ++l) {
    for (Index m = 0; m < L; ++m) {
      double sum = 0.0;
      double count = 0.0;
      for (const auto& rows : s.rows)
        for (const Index a : rows)
          for (const Index b : rows) {
            if (a == b && l == m) continue;
            sum += r(a, l) * r(b, m);
            count += 1.0;
          }
      out(l, m) = sum / count;
    }
  }
  return out;
}

double min_eigenvalue(const MatrixXd& A) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(A).eigenvalues().minCoeff();
}

}  // namespace

TEST_CASE("moment estimator equals direct pair averaging for a random intercept") {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    std::uniform_int_distribution<int> nv(1, 5);
    std::vector<int> visits;
    for (int i = 0; i < 12; ++i) visits.push_back(nv(rng));
    visits[0] = 3;
    const Grouped g = groups(visits);
    const Index n = static_cast<Index>(g.ids.size());
    const MatrixXd r = oracle::random_matrix(n, 7, rng);
    const CovarianceField G = estimate_G_mom(r, MatrixXd::Ones(n, 1), g.subjects);
    const MatrixXd expected = averaged_products(r, g.subjects);
    CHECK((G.G - expected).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, expected.cwiseAbs().maxCoeff()));
    CHECK(G.G == G.G.transpose());
  }
}

TEST_CASE("moment estimator on noiseless intercepts") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> b_draw(0.0, std::sqrt(2.0));
  const std::vector<int> visits{3, 5, 2, 4, 4, 1, 6};
  const Grouped g = groups(visits);
  const Index n = static_cast<Index>(g.ids.size());
  VectorXd b(static_cast<Index>(visits.size()));
  for (Index i = 0; i < b.size(); ++i) b(i) = b_draw(rng);
  MatrixXd r(n, 6);
  for (Index row = 0; row < n; ++row) r.row(row).setConstant(b(g.subjects.row_subject(row)));

  // exact moment values from the drawn b
  double off_num = 0, off_den = 0, diag_num = 0, diag_den = 0;
  for (std::size_t i = 0; i < visits.size(); ++i) {
    const double J = visits[i];
    off_num += J * J * b(static_cast<Index>(i)) * b(static_cast<Index>(i));
    off_den += J * J;
    diag_num += J * (J - 1) * b(static_cast<Index>(i)) * b(static_cast<Index>(i));
    diag_den += J * (J - 1);
  }
  const CovarianceField G = estimate_G_mom(r, MatrixXd::Ones(n, 1), g.subjects);
  for (Index l = 0; l < 6; ++l)
    for (Index m = 0; m < 6; ++m) {
      const double expected = l == m ? diag_num / diag_den : off_num / off_den;
      CHECK(G(0, 0, l, m) == doctest::Approx(expected).epsilon(1e-10));
    }
}

TEST_CASE("moment estimator on white noise stays small") {
  int small = 0;
  for (int seed = 0; seed < 40; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const Grouped g = groups(std::vector<int>(200, 5));
    const MatrixXd r = oracle::random_matrix(1000, 10, rng);  // sigma_eps = 1
    const CovarianceField G = estimate_G_mom(r, MatrixXd::Ones(1000, 1), g.subjects);
    if (G.G.cwiseAbs().maxCoeff() <= 0.1) ++small;
  }
  CHECK(small >= 36);
}

TEST_CASE("moment estimator is scale equivariant and symmetric for q = 2") {
  std::mt19937_64 rng(8);
  const Grouped g = groups({4, 3, 5, 2, 4, 3, 3, 5});
  const Index n = static_cast<Index>(g.ids.size());
  MatrixXd Z(n, 2);
  Z.col(0).setOnes();
  Z.col(1) = oracle::random_matrix(n, 1, rng);
  const MatrixXd r = oracle::random_matrix(n, 5, rng);
  const CovarianceField G = estimate_G_mom(r, Z, g.subjects);
  const CovarianceField G3 = estimate_G_mom(-3.0 * r, Z, g.subjects);
  CHECK(oracle::max_rel(G3.G, 9.0 * G.G) <= 1e-12);
  for (Index t = 0; t < 2; ++t)
    for (Index v = 0; v < 2; ++v)
      for (Index l = 0; l < 5; ++l)
        for (Index m = 0; m < 5; ++m) CHECK(std::abs(G(t, v, l, m) - G(v, t, m, l)) <= 1e-10);
  CHECK(G.block_at(1, 2).rows() == 2);
}

TEST_CASE("moment estimator needs within-subject pairs") {
  const Grouped g = groups({1, 1, 1, 1});
  std::mt19937_64 rng(2);
  CHECK_THROWS_AS(estimate_G_mom(oracle::random_matrix(4, 5, rng), MatrixXd::Ones(4, 1), g.subjects), Error);
}

TEST_CASE("marginal covariance estimator") {
  std::mt19937_64 rng(13);
  SUBCASE("zero coefficients give the sample covariance") {
    const MatrixXd Y = oracle::random_matrix(40, 6, rng);
    const MatrixXd X = oracle::random_matrix(40, 3, rng);
    const CovarianceField G = estimate_G_marginal(Y, X, MatrixXd::Zero(3, 6));
    const MatrixXd yc = Y.rowwise() - Y.colwise().mean();
    CHECK(oracle::max_rel(G.G, yc.transpose() * yc / 40.0) <= 1e-12);
  }
  SUBCASE("agrees with moments on balanced centered intercepts") {
    const Grouped g = groups(std::vector<int>(9, 4));
    VectorXd b = oracle::random_matrix(9, 1, rng) * std::sqrt(2.0);
    b.array() -= b.mean();
    MatrixXd Y(36, 5);
    for (Index row = 0; row < 36; ++row) Y.row(row).setConstant(b(g.subjects.row_subject(row)));
    const MatrixXd X = MatrixXd::Ones(36, 1);
    const CovarianceField marginal = estimate_G_marginal(Y, X, MatrixXd::Zero(1, 5));
    const CovarianceField mom = estimate_G_mom(Y, MatrixXd::Ones(36, 1), g.subjects);
    CHECK((marginal.G - mom.G).cwiseAbs().maxCoeff() <= 1e-6);
  }
  SUBCASE("only for random intercepts") {
    try {
      estimate_G_marginal(MatrixXd::Zero(4, 4), MatrixXd::Ones(4, 1), MatrixXd::Zero(1, 4), 2);
      FAIL("accepted q = 2");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UnsupportedQ);
    }
  }
}

TEST_CASE("psd trimming") {
  MatrixXd A(2, 2);
  A << 1, 0, 0, -0.5;
  MatrixXd expected(2, 2);
  expected << 1, 0, 0, 0;
  CHECK((psd_trim(A) - expected).cwiseAbs().maxCoeff() <= 1e-15);

  std::mt19937_64 rng(4);
  const MatrixXd F = oracle::random_matrix(6, 6, rng);
  const MatrixXd psd = F * F.transpose();
  CHECK((psd_trim(psd) - psd).cwiseAbs().maxCoeff() <= 1e-10);

  for (int rep = 0; rep < 20; ++rep) {
    const MatrixXd R = oracle::random_matrix(6, 6, rng);
    const MatrixXd S = (R + R.transpose()) / 2.0;
    const MatrixXd T = psd_trim(S);
    CHECK(min_eigenvalue(T) >= -1e-10);
    const VectorXd ev = Eigen::SelfAdjointEigenSolver<MatrixXd>(S).eigenvalues();
    const double negative = ev.cwiseMin(0.0).norm();
    CHECK((T - S).norm() == doctest::Approx(negative).epsilon(1e-10));
  }
}

TEST_CASE("covariance smoothing") {
  const VectorXd grid = equally_spaced(20);
  SUBCASE("constant field") {
    CovarianceField f;
    f.L = 20;
    f.G = MatrixXd::Constant(20, 20, 1.3);
    const CovarianceField s = smooth_covariance(f, grid, 10);
    CHECK((s.G - f.G).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(s.smoothed);
    CHECK(s.trimmed);
  }
  SUBCASE("noisy intercept structure") {
    int closer = 0;
    for (int seed = 0; seed < 50; ++seed) {
      std::mt19937_64 rng(seed);
      const MatrixXd truth = MatrixXd::Constant(20, 20, 2.0);
      const MatrixXd E = 0.2 * oracle::random_matrix(20, 20, rng);
      CovarianceField f;
      f.L = 20;
      f.G = truth + (E + E.transpose()) / 2.0;
      const CovarianceField s = smooth_covariance(f, grid, 10);
      if ((s.G - truth).norm() < (f.G - truth).norm()) ++closer;
      CHECK(min_eigenvalue(s.G) >= -1e-8);
      CHECK(s.G.isApprox(s.G.transpose(), 1e-12));
    }
    CHECK(closer >= 45);
  }
}
