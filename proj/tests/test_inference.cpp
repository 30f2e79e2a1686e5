#include <doctest.h>

#include <elffr/inference.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"

#include <Eigen/Eigenvalues>

#include <random>

using namespace elffr;

namespace {

struct Fitted {
  FunctionalDataset d;
  PointwiseFitAll all;
  std::vector<PointwiseFit> fits;
};

Fitted fitted(Index subjects, Index L, std::uint64_t seed, Index q = 1) {
  Fitted f;
  f.d = fixture::random_dataset(subjects, 2, 1, 10, L, seed, q);
  PointwiseModelConfig cfg;
  cfg.K_w = 4;
  cfg.K_g = 4;
  f.all = fit_all(f.d, cfg);
  REQUIRE(f.all.complete());
  f.fits = complete_fits(f.all);
  return f;
}

MatrixXd subject_design(const MatrixXd& Z, const SubjectIndex& s) {
  const Index q = Z.cols();
  MatrixXd out = MatrixXd::Zero(Z.rows(), q * s.n_subjects());
  for (Index a = 0; a < Z.rows(); ++a) out.block(a, s.row_subject(a) * q, 1, q) = Z.row(a);
  return out;
}

CovarianceField random_field(Index q, Index L, std::mt19937_64& rng) {
  const MatrixXd F = oracle::random_matrix(q * L, q * L, rng);
  CovarianceField G;
  G.q = q;
  G.L = L;
  G.G = F * F.transpose() / static_cast<double>(q * L);
  return G;
}

// Dense A = (X*' V^-1 X* + (lambda / sigma2) D)^-1 for one location.
MatrixXd dense_a(const Fitted& f, const PointwiseFit& fit, const MatrixXd& Vinv) {
  const Design& design = f.all.model.design;
  return oracle::penalized_inverse(design.Xstar, Vinv, design.D, fit.lambda(0) / fit.sigma2_eps);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// q with P(max of n independent |N(0,1)| <= q) = level.
double independent_max_quantile(int n, double level) {
  const double target = (1.0 + std::pow(level, 1.0 / n)) / 2.0;
  double lo = 0.0, hi = 10.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = (lo + hi) / 2.0;
    (normal_cdf(mid) < target ? lo : hi) = mid;
  }
  return (lo + hi) / 2.0;
}

PipelineConfig small_pipeline() {
  PipelineConfig cfg;
  cfg.model.K_w = 4;
  cfg.model.K_g = 4;
  cfg.smoothing.beta_knots = 4;
  cfg.smoothing.knots_s = 6;
  cfg.smoothing.knots_u = 4;
  return cfg;
}

}  // namespace

TEST_CASE("pointwise covariance matches the dense formula") {
  for (Index q : {1, 2}) {
    CAPTURE(q);
    std::mt19937_64 rng(40 + q);
    const Fitted f = fitted(14, 4, 7 + q, q);
    const MixedModelSystem system(f.all.model.design, f.d.Z, f.all.model.subjects);
    const CovarianceField G = random_field(q, 4, rng);
    const MatrixXd& X = f.all.model.design.Xstar;
    const MatrixXd Zs = subject_design(f.d.Z, f.all.model.subjects);
    std::vector<MatrixXd> Vinv, A;
    for (const auto& fit : f.fits) {
      Vinv.push_back(oracle::inverse(oracle::dense_v(f.d.Z, f.d.subject_id, fit.H, fit.sigma2_eps)));
      A.push_back(dense_a(f, fit, Vinv.back()));
      CHECK(oracle::max_rel(fit.xtvx_inv, A.back()) <= 1e-8);
    }
    const CrossCovariance all = cross_covariance(system, f.fits, G);
    for (Index l = 0; l < 4; ++l) {
      for (Index m = 0; m < 4; ++m) {
        MatrixXd expected;
        if (l == m) {
          expected = A[l] * X.transpose() * Vinv[l] * X * A[l];
        } else {
          MatrixXd bigG = MatrixXd::Zero(Zs.cols(), Zs.cols());
          for (Index i = 0; i < f.all.model.subjects.n_subjects(); ++i)
            bigG.block(i * q, i * q, q, q) = G.block_at(l, m);
          expected = A[l] * X.transpose() * Vinv[l] * Zs * bigG * Zs.transpose() * Vinv[m] * X * A[m];
        }
        const MatrixXd got = cov_beta_star(system, f.fits, G, l, m);
        CHECK(oracle::max_rel(got, expected) <= 1e-8);
        CHECK(oracle::max_rel(MatrixXd(all.block(l, m)), got) <= 1e-10);
      }
    }
  }
}

TEST_CASE("pointwise covariance special cases") {
  const Fitted f = fitted(12, 4, 3);
  const MixedModelSystem system(f.all.model.design, f.d.Z, f.all.model.subjects);
  CovarianceField zero;
  zero.L = 4;
  zero.G = MatrixXd::Zero(4, 4);
  CHECK(cov_beta_star(system, f.fits, zero, 0, 2).isZero(0.0));

  // no random effect, no penalty: ordinary least squares covariance
  const Design& design = f.all.model.design;
  const double sigma2 = 1.7;
  std::vector<PointwiseFit> ols{
      system.solve(f.d.Y.col(0), MatrixXd::Zero(1, 1), sigma2, VectorXd::Zero(design.n_blocks()))};
  const MatrixXd expected = sigma2 * oracle::inverse(design.Xstar.transpose() * design.Xstar);
  CovarianceField one;
  one.L = 1;
  one.G = MatrixXd::Zero(1, 1);
  CHECK(oracle::max_rel(cov_beta_star(system, ols, one, 0, 0), expected) <= 1e-8);
}

TEST_CASE("smoother propagation matches the explicit Kronecker product") {
  std::mt19937_64 rng(6);
  SUBCASE("identity smoothers") {
    const MatrixXd F = oracle::random_matrix(12, 12, rng);
    const MatrixXd V = F * F.transpose();
    const MatrixXd out =
        propagate_smoother_variance(V, MatrixXd(MatrixXd::Identity(4, 4)), MatrixXd(MatrixXd::Identity(3, 3)));
    CHECK((out - V).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("white noise through a smoother") {
    const MatrixXd S1 = oracle::random_matrix(4, 4, rng);
    const MatrixXd S2 = oracle::random_matrix(3, 3, rng);
    const MatrixXd out = propagate_smoother_variance(MatrixXd(2.0 * MatrixXd::Identity(12, 12)), S1, S2);
    const MatrixXd K = oracle::kron(S1, S2);
    CHECK(oracle::max_rel(out, 2.0 * K * K.transpose()) <= 1e-12);
  }
  SUBCASE("random covariance") {
    for (int rep = 0; rep < 10; ++rep) {
      const MatrixXd S1 = oracle::random_matrix(4, 4, rng);
      const MatrixXd S2 = oracle::random_matrix(3, 3, rng);
      const MatrixXd F = oracle::random_matrix(12, 12, rng);
      const MatrixXd V = F * F.transpose();
      const MatrixXd K = oracle::kron(S1, S2);
      CHECK(oracle::max_rel(propagate_smoother_variance(V, S1, S2), K * V * K.transpose()) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(propagate_smoother_variance(MatrixXd(MatrixXd::Zero(5, 5)), MatrixXd(MatrixXd::Identity(2, 2)),
                                              MatrixXd(MatrixXd::Identity(2, 2))),
                  Error);
}

TEST_CASE("surface variance from coefficient covariance") {
  std::mt19937_64 rng(10);
  const Index L = 5, K = 3, R = 6;
  const MatrixXd phi = oracle::random_matrix(R, K, rng);
  const MatrixXd F = oracle::random_matrix(L * K, L * K, rng);
  const MatrixXd C = F * F.transpose();

  // selector: one coefficient picks one column of phi
  MatrixXd e = MatrixXd::Zero(K, K);
  e(1, 1) = 1.0;
  CHECK(oracle::max_rel(var_gamma_raw(e, phi), phi.col(1) * phi.col(1).transpose()) <= 1e-14);
  CHECK(oracle::max_rel(var_gamma_raw(MatrixXd::Identity(K, K), phi), phi * phi.transpose()) <= 1e-14);

  const MatrixXd full = surface_covariance(C, phi);
  CHECK(oracle::max_rel(full, oracle::kron(MatrixXd::Identity(L, L), phi) * C *
                                  oracle::kron(MatrixXd::Identity(L, L), phi).transpose()) <= 1e-12);
  const MatrixXd raw = raw_surface_variance(C, phi);
  for (Index l = 0; l < L; ++l)
    for (Index r = 0; r < R; ++r) CHECK(raw(r, l) == doctest::Approx(full(l * R + r, l * R + r)).epsilon(1e-12));

  const MatrixXd S1 = oracle::random_matrix(L, L, rng);
  const MatrixXd S2 = oracle::random_matrix(R, R, rng);
  const MatrixXd smoothed = smoothed_surface_variance(C, phi, S1, S2);
  const MatrixXd propagated = propagate_smoother_variance(full, S1, S2);
  for (Index l = 0; l < L; ++l)
    for (Index r = 0; r < R; ++r)
      CHECK(smoothed(r, l) == doctest::Approx(propagated(l * R + r, l * R + r)).epsilon(1e-10));
}

TEST_CASE("pointwise bands") {
  MatrixXd est(1, 3), var(1, 3);
  est << 0.0, 1.0, -2.0;
  var << 1.0, 0.0, 4.0;
  const ConfidenceBand b = pointwise_bands(est, var, 0.95);
  CHECK(b.upper(0, 0) == doctest::Approx(1.959964).epsilon(1e-6));
  CHECK(b.lower(0, 0) == doctest::Approx(-1.959964).epsilon(1e-6));
  CHECK(b.lower(0, 1) == 1.0);
  CHECK(b.upper(0, 1) == 1.0);
  CHECK(b.upper(0, 2) - b.lower(0, 2) == doctest::Approx(4 * 1.959964).epsilon(1e-6));
  CHECK(normal_critical_value(0.90) == doctest::Approx(1.644854).epsilon(1e-6));
  var(0, 1) = -1e-3;
  try {
    pointwise_bands(est, var, 0.95);
    FAIL("negative variance accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NegativeVariance);
  }
}

TEST_CASE("simultaneous critical values") {
  SUBCASE("single point") {
    const double q = cma_critical_value(VectorXd::Ones(1), AnalyticMcSource{MatrixXd::Ones(1, 1), 100000}, 0.95);
    CHECK(q >= 1.93);
    CHECK(q <= 1.99);
  }
  SUBCASE("perfectly correlated points behave like one") {
    const double q = cma_critical_value(VectorXd::Constant(8, 2.0),
                                        AnalyticMcSource{MatrixXd::Constant(8, 8, 2.0), 100000}, 0.95);
    CHECK(q == doctest::Approx(1.96).epsilon(0.02));
  }
  SUBCASE("independent points") {
    const double expected = independent_max_quantile(10, 0.95);
    for (auto sampling : {CmaSampling::Joint, CmaSampling::Marginal}) {
      const double q = cma_critical_value(VectorXd::Ones(10),
                                          AnalyticMcSource{MatrixXd::Identity(10, 10), 100000, sampling, 3}, 0.95);
      CHECK(std::abs(q - expected) <= 0.02);
    }
  }
  SUBCASE("grows with the number of independent points") {
    double previous = 0.0;
    for (int n : {1, 5, 25}) {
      const double q = cma_critical_value(VectorXd::Ones(n),
                                          AnalyticMcSource{MatrixXd::Identity(n, n), 20000}, 0.95);
      CHECK(q > previous);
      previous = q;
    }
  }
  SUBCASE("bootstrap replicates") {
    std::mt19937_64 rng(5);
    std::vector<VectorXd> reps;
    for (int b = 0; b < 4000; ++b) reps.push_back(oracle::random_matrix(10, 1, rng));
    const double q = cma_critical_value(VectorXd::Zero(10), VectorXd::Ones(10), BootstrapSource{reps}, 0.95);
    CHECK(std::abs(q - independent_max_quantile(10, 0.95)) <= 0.1);
  }
  SUBCASE("band contains the pointwise band") {
    std::mt19937_64 rng(2);
    const VectorXd est = oracle::random_matrix(6, 1, rng);
    const VectorXd var = oracle::random_matrix(6, 1, rng).cwiseAbs();
    const ConfidenceBand point = pointwise_bands(est.transpose(), var.transpose(), 0.95);
    for (double q : {0.5, 1.96, 3.0}) {
      const ConfidenceBand cma = cma_bands(est, var, q, 0.95);
      CHECK((cma.lower.array() <= point.lower.array() + 1e-15).all());
      CHECK((cma.upper.array() >= point.upper.array() - 1e-15).all());
    }
  }
}

TEST_CASE("sample variance") {
  CHECK(sample_variance({MatrixXd::Constant(1, 1, 1.0), MatrixXd::Constant(1, 1, 3.0)})(0, 0) == 2.0);
  CHECK(sample_variance(std::vector<MatrixXd>(5, MatrixXd::Constant(2, 2, 0.7))).isZero(1e-30));

  std::mt19937_64 rng(3);
  std::vector<MatrixXd> reps;
  for (int b = 0; b < 50; ++b) reps.push_back((1e6 + oracle::random_matrix(3, 4, rng).array()).matrix());
  MatrixXd mean = MatrixXd::Zero(3, 4);
  for (const auto& r : reps) mean += r;
  mean /= 50.0;
  MatrixXd ss = MatrixXd::Zero(3, 4);
  for (const auto& r : reps) ss += (r - mean).cwiseAbs2();
  CHECK(oracle::max_rel(sample_variance(reps), ss / 49.0) <= 1e-8);
}

TEST_CASE("cluster bootstrap") {
  const FunctionalDataset d = fixture::random_dataset(30, 2, 1, 12, 14, 17);
  const PipelineConfig cfg = small_pipeline();

  SUBCASE("resampling copies whole subjects") {
    const SubjectIndex s = index_subjects(d.subject_id);
    const FunctionalDataset r = resample_subjects(d, s, {2, 2, 5});
    const Index rows = 2 * static_cast<Index>(s.rows[2].size()) + static_cast<Index>(s.rows[5].size());
    CHECK(r.n_obs() == rows);
    CHECK(index_subjects(r.subject_id).n_subjects() == 3);
    CHECK(r.Y.row(0) == d.Y.row(s.rows[2][0]));
  }
  SUBCASE("identity draw reproduces the full fit") {
    std::vector<Index> all(30);
    for (Index i = 0; i < 30; ++i) all[static_cast<std::size_t>(i)] = i;
    const BootstrapEstimates reps = bootstrap(d, cfg, {all, all}, 1);
    const ModelFit full = fit_model(d, cfg);
    REQUIRE(reps.B == 2);
    CHECK(reps.beta_raw[0] == reps.beta_raw[1]);
    CHECK(oracle::max_rel(reps.beta_raw[0], full.result.beta_hat) <= 1e-10);
    CHECK(oracle::max_rel(reps.gamma_smooth[0][0], full.result.gamma_smooth[0]) <= 1e-10);
  }
  SUBCASE("deterministic and independent of worker count") {
    const BootstrapEstimates a = bootstrap(d, cfg, 6, 99, 1);
    const BootstrapEstimates b = bootstrap(d, cfg, 6, 99, 1);
    const BootstrapEstimates c = bootstrap(d, cfg, 6, 99, 4);
    REQUIRE(a.B == 6);
    REQUIRE(c.B == 6);
    for (int r = 0; r < 6; ++r) {
      CHECK(a.beta_raw[r] == b.beta_raw[r]);
      CHECK(a.beta_raw[r] == c.beta_raw[r]);
      CHECK(a.gamma_smooth[r][0] == c.gamma_smooth[r][0]);
      CHECK(a.indices_log[r] == c.indices_log[r]);
    }
    const BootstrapEstimates other = bootstrap(d, cfg, 6, 100, 1);
    CHECK(other.indices_log[0] != a.indices_log[0]);
  }
}

TEST_CASE("shifting the outcome moves only the intercept") {
  FunctionalDataset d = fixture::random_dataset(30, 2, 1, 12, 14, 23);
  const PipelineConfig cfg = small_pipeline();
  InferenceConfig inf;
  inf.cma_samples = 2000;
  const ModelFit base = fit_model(d, cfg);
  const InferenceResult base_inf = analytic_inference(d, base, cfg.smoothing, inf);
  d.Y.array() += 3.0;
  const ModelFit shifted = fit_model(d, cfg);
  const InferenceResult shifted_inf = analytic_inference(d, shifted, cfg.smoothing, inf);

  CHECK((shifted.result.beta_hat.row(0).array() - base.result.beta_hat.row(0).array() - 3.0).abs().maxCoeff() <=
        1e-6);
  CHECK(oracle::max_rel(shifted.result.beta_hat.bottomRows(1), base.result.beta_hat.bottomRows(1)) <= 1e-6);
  CHECK(oracle::max_rel(shifted.result.gamma_smooth[0], base.result.gamma_smooth[0]) <= 1e-6);
  CHECK(oracle::max_rel(shifted_inf.beta_variance, base_inf.beta_variance) <= 1e-5);
  CHECK(oracle::max_rel(shifted_inf.surface[0].upper, base_inf.surface[0].upper) <= 1e-5);
}
