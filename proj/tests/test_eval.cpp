#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "nppc/errors.hpp"
#include "nppc/eval.hpp"

namespace {

using nppc::Matrix;
using nppc::Vector;

nppc::NppcOutput output_of(const Matrix& w, const Vector& sigma2) { return {w, sigma2, w}; }

TEST(NppcGaussian, SingleDirection) {
    const auto g = nppc::nppc_gaussian(Vector{1, 2}, output_of(Matrix::from_rows({{1, 0}}), {4}));
    EXPECT_EQ(g.mean, (Vector{1, 2}));
    EXPECT_EQ(g.covariance, Matrix::from_rows({{4, 0}, {0, 0}}));
}

TEST(NppcGaussian, ZeroVariancesArePointMass) {
    const auto g = nppc::nppc_gaussian(Vector{1, 2}, output_of(Matrix::from_rows({{0.6, 0.8}}), {0}));
    EXPECT_EQ(g.covariance, Matrix(2, 2, 0.0));
}

TEST(NppcGaussian, SpectrumAndTrace) {
    std::mt19937_64 rng(1);
    const Matrix o = nppc::random_orthogonal(5, rng);
    Matrix w(3, 5);
    for (std::size_t k = 0; k < 3; ++k) std::copy(o.row(k).begin(), o.row(k).end(), w.row(k).begin());
    const Vector s2{9, 4, 1};
    const auto g = nppc::nppc_gaussian(Vector(5, 0.0), output_of(w, s2));
    const auto spec = nppc::eigh_sym(g.covariance);
    EXPECT_NEAR(spec.values[0], 9, 1e-12);
    EXPECT_NEAR(spec.values[1], 4, 1e-12);
    EXPECT_NEAR(spec.values[2], 1, 1e-12);
    EXPECT_NEAR(spec.values[3], 0, 1e-12);
    EXPECT_NEAR(g.covariance.trace(), 14.0, 1e-12);

    const Matrix f = nppc::scaled_pc_factor(output_of(w, s2));
    EXPECT_EQ(f.rows(), 5u);
    EXPECT_EQ(f.cols(), 3u);
    EXPECT_NEAR(nppc::norm(f.col_vector(1)), 2.0, 1e-14);
    EXPECT_THROW(nppc::scaled_pc_factor(output_of(w, s2), 4), nppc::BadIndex);
}

// Tiny world: every test point has the same known Gaussian.
struct FixedWorld {
    Matrix cov = Matrix::from_rows({{4, 1, 0}, {1, 3, 0.5}, {0, 0.5, 1}});
    nppc::MomentsFn oracle = [this](std::span<const double> y) {
        return nppc::GaussianMoments{Vector(y.begin(), y.end()), cov};
    };
    Matrix ys = Matrix::from_rows({{0, 0, 0}, {1, 2, 3}, {-1, 0, 4}});
};

nppc::W2Method truncation_method(const Matrix& cov, const Matrix& ys) {
    return [cov, ys](std::size_t i, std::span<const double>, std::size_t k) {
        const auto s = nppc::eigh_sym(cov);
        Matrix f(cov.rows(), k);
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t r = 0; r < cov.rows(); ++r) f(r, c) = s.vectors(r, c) * std::sqrt(s.values[c]);
        return nppc::FactoredGaussian{ys.row_vector(i), f};
    };
}

TEST(W2Table, GroundTruthMethodScoresZero) {
    const FixedWorld w;
    const auto mean_of = [&](std::size_t i) { return w.ys.row_vector(i); };
    const auto r = nppc::w2_table(w.oracle,
                                  {{"baseline", nppc::point_mass_method(mean_of)},
                                   {"exact", truncation_method(w.cov, w.ys)}},
                                  w.ys, {0, 1, 2, 3});
    ASSERT_EQ(r.cells.size(), 2u);
    for (const auto& cell : r.cells[1]) EXPECT_NEAR(cell.mean, 0.0, 1e-10);
    EXPECT_NEAR(r.cells[0][0].mean, r.cells[1][0].mean, 1e-12);
    const auto s = nppc::eigh_sym(w.cov);
    EXPECT_NEAR(r.cells[0][1].mean, s.values[0], 1e-10);
    EXPECT_NEAR(r.cells[0][3].mean, w.cov.trace(), 1e-10);
    for (std::size_t k = 1; k < 4; ++k) EXPECT_GT(r.cells[0][k].mean, r.cells[0][k - 1].mean);
    EXPECT_EQ(r.cells[0][2].n, 3u);
    EXPECT_EQ(r.test_size, 3u);
}

TEST(W2Table, FullReferenceMode) {
    const FixedWorld w;
    const auto mean_of = [&](std::size_t i) { return w.ys.row_vector(i); };
    const auto r = nppc::w2_table(w.oracle, {{"baseline", nppc::point_mass_method(mean_of)}}, w.ys, {0, 2},
                                  nppc::ReferenceMode::Full);
    EXPECT_NEAR(r.cells[0][0].mean, w.cov.trace(), 1e-10);
    EXPECT_NEAR(r.cells[0][1].mean, w.cov.trace(), 1e-10);
}

TEST(W2Table, OrderAndThreadInvariant) {
    const auto mix_cov = Matrix::from_rows({{2, 0.3}, {0.3, 1}});
    nppc::MomentsFn oracle = [&](std::span<const double> y) {
        return nppc::GaussianMoments{Vector{y[0] * 0.5, y[1] * 0.5}, (1.0 + y[0] * y[0] / 10) * mix_cov};
    };
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0, 1);
    Matrix ys(40, 2);
    for (auto& v : ys.data()) v = n(rng);
    Matrix rev(40, 2);
    for (std::size_t i = 0; i < 40; ++i) std::copy(ys.row(39 - i).begin(), ys.row(39 - i).end(), rev.row(i).begin());

    const auto method = [](const Matrix& src) {
        return nppc::point_mass_method([src](std::size_t i) { return Vector{src(i, 0) * 0.4, src(i, 1) * 0.6}; });
    };
    const auto a = nppc::w2_table(oracle, {{"m", method(ys)}, {"z", method(ys)}}, ys, {0, 1, 2});
    const auto b = nppc::w2_table(oracle, {{"z", method(rev)}, {"m", method(rev)}}, rev, {0, 1, 2},
                                  nppc::ReferenceMode::Truncated, 4);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(a.cells[0][k].mean, b.cells[1][k].mean);
        EXPECT_EQ(a.cells[0][k].sem, b.cells[1][k].sem);
    }
}

TEST(W2Table, FailingCellIsPoisoned) {
    const FixedWorld w;
    nppc::W2Method bad = [](std::size_t i, std::span<const double> y, std::size_t k) -> nppc::FactoredGaussian {
        if (i == 1 && k == 2) throw nppc::NotPsd("synthetic");
        return {Vector(y.begin(), y.end()), Matrix(3, 0)};
    };
    const auto r = nppc::w2_table(w.oracle, {{"bad", bad}}, w.ys, {1, 2});
    EXPECT_FALSE(r.cells[0][0].poisoned);
    EXPECT_TRUE(r.cells[0][1].poisoned);
    EXPECT_EQ(r.cells[0][1].n, 2u);
    EXPECT_TRUE(std::isnan(r.cells[0][1].per_point[1]));
}

TEST(W2Table, RejectsBadInputs) {
    const FixedWorld w;
    const auto m = nppc::point_mass_method([&](std::size_t i) { return w.ys.row_vector(i); });
    EXPECT_THROW(nppc::w2_table(w.oracle, {{"m", m}}, w.ys, {4}), nppc::InvalidConfig);
    EXPECT_THROW(nppc::w2_table(w.oracle, {{"m", m}}, Matrix(0, 3), {1}), nppc::InvalidConfig);
}

TEST(ResidualNorm, Cases) {
    const Matrix w = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}});
    EXPECT_DOUBLE_EQ(nppc::residual_norm(Vector{3, 4, 0}, w), 0.0);
    EXPECT_DOUBLE_EQ(nppc::residual_norm(Vector{0, 0, 7}, w), 7.0);
    std::mt19937_64 rng(2);
    const Matrix full = nppc::random_orthogonal(3, rng);
    EXPECT_NEAR(nppc::residual_norm(Vector{1, -2, 3}, full), 0.0, 1e-14);
    EXPECT_THROW(nppc::residual_norm(Vector{1, 0}, Matrix::from_rows({{2, 0}})), nppc::NotOrthonormal);
}

TEST(ResidualNorm, PythagoreanIdentity) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0, 3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 2 + trial % 7;
        const Matrix o = nppc::random_orthogonal(d, rng);
        const std::size_t k = 1 + trial % d;
        Matrix w(k, d);
        for (std::size_t i = 0; i < k; ++i) std::copy(o.row(i).begin(), o.row(i).end(), w.row(i).begin());
        Vector e(d);
        for (auto& v : e) v = n(rng);
        double captured = 0;
        for (std::size_t i = 0; i < k; ++i) captured += std::pow(nppc::dot(w.row(i), e), 2);
        const double r = nppc::residual_norm(e, w);
        EXPECT_NEAR(r * r + captured, nppc::dot(e, e), 1e-8);
    }
}

TEST(Rmse, Cases) {
    const Matrix x = Matrix::from_rows({{1, 2}, {3, 4}});
    EXPECT_DOUBLE_EQ(nppc::rmse(x, x), 0.0);
    EXPECT_DOUBLE_EQ(nppc::rmse(x, Matrix::from_rows({{2, 2}, {4, 4}})), 1.0);
}

TEST(UnexplainedCurve, PlaneErrors) {
    const Matrix e = Matrix::from_rows({{1, 2, 0}, {-3, 1, 0}, {0.5, 0.5, 0}});
    const Matrix w = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}});
    const auto c = nppc::unexplained_curve(e, w);
    ASSERT_EQ(c.size(), 3u);
    EXPECT_EQ(c[0], 1.0);
    EXPECT_NEAR(c[2], 0.0, 1e-15);
    EXPECT_LE(c[1], c[0]);
}

TEST(UnexplainedCurve, IsotropicErrorsFollowFlatSpectrum) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0, 1);
    const std::size_t d = 8;
    Matrix e(40000, d);
    for (auto& v : e.data()) v = n(rng);
    const auto pca = nppc::pca_from_samples(e, d);
    const auto c = nppc::unexplained_curve(e, pca.directions);
    for (std::size_t k = 0; k <= d; ++k)
        EXPECT_NEAR(c[k], 1.0 - static_cast<double>(k) / d, 0.02);
}

TEST(UnexplainedCurve, PerSampleBasesMonotone) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0, 1);
    Matrix e(30, 4);
    for (auto& v : e.data()) v = n(rng);
    std::vector<Matrix> ws;
    for (int i = 0; i < 30; ++i) {
        const Matrix o = nppc::random_orthogonal(4, rng);
        Matrix w(3, 4);
        for (std::size_t k = 0; k < 3; ++k) std::copy(o.row(k).begin(), o.row(k).end(), w.row(k).begin());
        ws.push_back(w);
    }
    const auto c = nppc::unexplained_curve(e, ws);
    EXPECT_EQ(c[0], 1.0);
    for (std::size_t k = 1; k < c.size(); ++k) EXPECT_LE(c[k], c[k - 1]);
}

TEST(SamplePcaBaseline, RecoversGaussianPcs) {
    const Matrix cov = Matrix::from_rows({{3, 1}, {1, 1}});
    const auto spec = nppc::eigh_sym(cov);
    const Matrix root = nppc::sqrtm_psd(cov);
    nppc::PosteriorSampler sampler = [&](std::span<const double>, std::size_t m, std::mt19937_64& rng) {
        std::normal_distribution<double> n(0, 1);
        Matrix s(m, 2);
        for (std::size_t i = 0; i < m; ++i) {
            const Vector z{n(rng), n(rng)};
            const Vector x = root * z;
            s(i, 0) = x[0];
            s(i, 1) = x[1];
        }
        return s;
    };
    std::mt19937_64 rng(1);
    const auto p = nppc::sample_pca_baseline(sampler, Vector{0, 0}, 10000, 2, rng);
    const Vector top{spec.vectors(0, 0), spec.vectors(1, 0)};
    EXPECT_LT(nppc::line_angle_degrees(p.directions.row(0), top), 5.0);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(p.variances[k] / spec.values[k], 1.0, 0.1);

    EXPECT_NO_THROW(nppc::sample_pca_baseline(sampler, Vector{0, 0}, 3, 2, rng));
    EXPECT_THROW(nppc::sample_pca_baseline(sampler, Vector{0, 0}, 2, 2, rng), nppc::InsufficientSamples);
}

TEST(LineAngle, FoldsSign) {
    EXPECT_NEAR(nppc::line_angle_degrees(Vector{1, 0}, Vector{-1, 0}), 0.0, 1e-12);
    EXPECT_NEAR(nppc::line_angle_degrees(Vector{1, 0}, Vector{0, 2}), 90.0, 1e-12);
}

TEST(MeanAndSem, Values) {
    const auto [m, s] = nppc::mean_and_sem({1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(m, 2.5);
    EXPECT_NEAR(s, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
    EXPECT_TRUE(std::isnan(nppc::mean_and_sem({}).first));
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
    std::vector<int> hit(100, 0);
    nppc::parallel_for(100, 4, [&](std::size_t i) { hit[i] += 1; });
    EXPECT_TRUE(std::all_of(hit.begin(), hit.end(), [](int h) { return h == 1; }));
    EXPECT_THROW(nppc::parallel_for(10, 3, [](std::size_t i) {
                     if (i == 7) throw nppc::NumericFailure("x");
                 }),
                 nppc::NumericFailure);
}

}  // namespace
