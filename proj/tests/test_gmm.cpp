#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "nppc/errors.hpp"
#include "nppc/gmm.hpp"
#include "support/property_checks.hpp"

namespace {

using nppc::Matrix;
using nppc::Vector;

nppc::GaussianMixture single(const Vector& mean, const Matrix& cov) {
    return {{1.0}, {mean}, {cov}};
}

nppc::GaussianMixture random_mixture(std::size_t d, std::size_t l, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0, 1);
    std::uniform_real_distribution<double> u(0.2, 1.0);
    nppc::GaussianMixture mix;
    double total = 0;
    for (std::size_t c = 0; c < l; ++c) {
        mix.weights.push_back(u(rng));
        total += mix.weights.back();
        Vector m(d);
        for (auto& v : m) v = 3.0 * n(rng);
        mix.means.push_back(m);
        Matrix a(d, d);
        for (auto& v : a.data()) v = n(rng);
        mix.covariances.push_back(a * a.transpose() + 0.1 * Matrix::identity(d));
    }
    for (auto& w : mix.weights) w /= total;
    return mix;
}

TEST(SampleDataset, NoiselessLimit) {
    std::mt19937_64 rng(1);
    const auto [mix, noise] = nppc::make_toy_2d(0);
    const auto ds = nppc::sample_dataset(mix, {1e-12}, 100, rng);
    EXPECT_LT(nppc::max_abs(ds.x - ds.y), 1e-9);
    (void)noise;
}

TEST(SampleDataset, MomentsOfSingleComponent) {
    std::mt19937_64 rng(2);
    const Matrix cov = Matrix::from_rows({{2, 0.5}, {0.5, 1}});
    const auto ds = nppc::sample_dataset(single({0, 0}, Matrix::identity(2)), {1.0}, 100000, rng);
    for (std::size_t j = 0; j < 2; ++j) {
        double m = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) m += ds.x(i, j);
        EXPECT_LT(std::abs(m / 1e5), 0.02);
    }

    std::mt19937_64 rng2(3);
    const auto d2 = nppc::sample_dataset(single({1, -1}, cov), {1.5}, 100000, rng2);
    const auto pca = nppc::pca_from_samples(d2.y, 2);
    const auto truth = nppc::eigh_sym(cov + 2.25 * Matrix::identity(2));
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(pca.variances[k] / truth.values[k], 1.0, 0.05);
}

TEST(SampleDataset, SeededDeterminism) {
    const auto [mix, noise] = nppc::make_toy_2d(0);
    std::mt19937_64 a(7), b(7);
    const auto da = nppc::sample_dataset(mix, noise, 50, a);
    const auto db = nppc::sample_dataset(mix, noise, 50, b);
    EXPECT_EQ(da.x, db.x);
    EXPECT_EQ(da.y, db.y);
}

TEST(PosteriorComponents, SingleGaussianConditioning) {
    const Matrix cov = Matrix::from_rows({{3, 1}, {1, 2}});
    const Vector mu{1, -1}, y{2, 2};
    const auto parts = nppc::posterior_components(single(mu, cov), {1.5}, y);
    ASSERT_EQ(parts.responsibilities.size(), 1u);
    EXPECT_DOUBLE_EQ(parts.responsibilities[0], 1.0);

    // Closed-form 2×2 inverse of Σ + σ²I.
    const double a = 3 + 2.25, b = 1, c = 2 + 2.25, det = a * c - b * b;
    const Matrix inv = Matrix::from_rows({{c / det, -b / det}, {-b / det, a / det}});
    const Matrix gain = cov * inv;
    const Vector expect_mean = nppc::axpy(1.0, gain * Vector{1, 3}, mu);
    const Matrix expect_cov = cov - gain * cov;
    EXPECT_LT(nppc::max_abs(nppc::subtract(parts.means[0], expect_mean)), 1e-12);
    EXPECT_LT(nppc::max_abs(parts.covariances[0] - expect_cov), 1e-12);

    const auto m = nppc::posterior_moments(single(mu, cov), {1.5}, y);
    EXPECT_LT(nppc::max_abs(nppc::subtract(m.mean, expect_mean)), 1e-12);
    EXPECT_LT(nppc::max_abs(m.covariance - expect_cov), 1e-12);
}

TEST(PosteriorComponents, SymmetricMixtureAtOrigin) {
    const auto [mix, noise] = nppc::make_toy_100d(3);
    const Vector y(100, 0.0);
    const auto parts = nppc::posterior_components(mix, noise, y);
    EXPECT_NEAR(parts.responsibilities[0], 0.5, 1e-12);
    EXPECT_NEAR(parts.responsibilities[1], 0.5, 1e-12);
}

TEST(PosteriorComponents, FarAlongFirstMean) {
    const auto [mix, noise] = nppc::make_toy_2d(0);
    const Vector y = mix.means[0];
    const auto parts = nppc::posterior_components(mix, noise, y);

    // Direct density ratio of the marginals N(y; μ_ℓ, Σ_ℓ + σ²I).
    double q[2];
    for (int l = 0; l < 2; ++l) {
        const Matrix s = mix.covariances[l] + noise.sigma * noise.sigma * Matrix::identity(2);
        const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(0, 1);
        const double r0 = y[0] - mix.means[l][0], r1 = y[1] - mix.means[l][1];
        const double quad = (s(1, 1) * r0 * r0 - 2 * s(0, 1) * r0 * r1 + s(0, 0) * r1 * r1) / det;
        q[l] = mix.weights[l] * std::exp(-0.5 * quad) / std::sqrt(det);
    }
    EXPECT_NEAR(parts.responsibilities[0], q[0] / (q[0] + q[1]), 1e-12);
    EXPECT_GT(parts.responsibilities[0], 0.999);
}

TEST(PosteriorComponents, PermutationEquivariant) {
    std::mt19937_64 rng(4);
    const auto mix = random_mixture(3, 3, rng);
    nppc::GaussianMixture perm;
    for (std::size_t i : {2, 0, 1}) {
        perm.weights.push_back(mix.weights[i]);
        perm.means.push_back(mix.means[i]);
        perm.covariances.push_back(mix.covariances[i]);
    }
    const Vector y{0.3, -1, 2};
    const auto a = nppc::posterior_components(mix, {1.0}, y);
    const auto b = nppc::posterior_components(perm, {1.0}, y);
    EXPECT_NEAR(a.responsibilities[2], b.responsibilities[0], 1e-14);
    EXPECT_NEAR(a.responsibilities[0], b.responsibilities[1], 1e-14);
    EXPECT_NEAR(a.responsibilities[1], b.responsibilities[2], 1e-14);
}

TEST(PosteriorMoments, UninformativeLimit) {
    const auto [mix, noise] = nppc::make_toy_2d(0);
    const auto m = nppc::posterior_moments(mix, {1e6}, Vector{1, 2});
    const auto prior = nppc::mixture_moments({mix.weights, mix.means, mix.covariances});
    EXPECT_LT(nppc::max_abs(nppc::subtract(m.mean, prior.mean)), 1e-3 * nppc::max_abs(prior.covariance));
    EXPECT_LT(nppc::max_abs(m.covariance - prior.covariance), 1e-3 * nppc::max_abs(prior.covariance));
    (void)noise;
}

TEST(PosteriorMoments, MatchesQuadrature) {
    EXPECT_LT(nppc::checks::quadrature_moment_error(5, 0), 1e-3);
}

TEST(PosteriorMoments, CovarianceAlwaysPsd) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0, 4);
    for (int trial = 0; trial < 2000; ++trial) {
        const auto mix = random_mixture(3, 2, rng);
        const Vector y{n(rng), n(rng), n(rng)};
        const auto m = nppc::posterior_moments(mix, {0.5 + std::abs(n(rng)) / 4}, y);
        EXPECT_GE(nppc::eigh_sym(m.covariance).values.back(), -1e-10);
    }
}

TEST(PosteriorMoments, LawOfTotalVariance) {
    const auto [mix, noise] = nppc::make_toy_2d(0);
    std::mt19937_64 rng(8);
    const std::size_t n = 100000;
    const auto ds = nppc::sample_dataset(mix, noise, n, rng);
    const nppc::PosteriorOracle oracle(mix, noise);
    Matrix mean_cov(2, 2), second(2, 2);
    Vector mean(2, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto m = oracle.moments(ds.y.row(i));
        mean_cov = mean_cov + m.covariance;
        second = second + nppc::outer(m.mean, m.mean);
        mean = nppc::axpy(1.0, m.mean, mean);
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& v : mean) v *= inv;
    const Matrix total = inv * mean_cov + inv * second - nppc::outer(mean, mean);
    const auto prior = nppc::mixture_moments({mix.weights, mix.means, mix.covariances});
    EXPECT_LT(nppc::frobenius_norm(total - prior.covariance), 0.02 * nppc::frobenius_norm(prior.covariance));
}

TEST(PosteriorSample, MomentsAgree) {
    const auto [mix, noise] = nppc::make_toy_2d(0);
    const Vector y{1.0, 0.5};
    const auto m = nppc::posterior_moments(mix, noise, y);
    std::mt19937_64 rng(9);
    const std::size_t count = 100000;
    const Matrix s = nppc::posterior_sample(mix, noise, y, count, rng);
    const auto pca = nppc::pca_from_samples(s, 2);
    const double lmax = nppc::eigh_sym(m.covariance).values[0];
    for (std::size_t j = 0; j < 2; ++j)
        EXPECT_LT(std::abs(pca.mean[j] - m.mean[j]), 3.0 * std::sqrt(lmax / static_cast<double>(count)));
    Matrix cov(2, 2);
    for (std::size_t i = 0; i < count; ++i) {
        const Vector d = nppc::subtract(s.row(i), pca.mean);
        cov = cov + nppc::outer(d, d);
    }
    cov = (1.0 / static_cast<double>(count)) * cov;
    EXPECT_LT(nppc::eigh_sym(cov - m.covariance).values[0], 0.05 * lmax);
    EXPECT_GT(nppc::eigh_sym(cov - m.covariance).values[1], -0.05 * lmax);
}

TEST(PosteriorSample, DegenerateLimit) {
    std::mt19937_64 rng(1);
    const auto mix = single({1, 2}, 1e-14 * Matrix::identity(2));
    const Matrix s = nppc::posterior_sample(mix, {1e-6}, Vector{1, 2}, 20, rng);
    for (std::size_t i = 0; i < 20; ++i) {
        EXPECT_NEAR(s(i, 0), 1.0, 1e-6);
        EXPECT_NEAR(s(i, 1), 2.0, 1e-6);
    }
}

TEST(RankK, Truncation) {
    const Matrix d = Matrix::diagonal(Vector{5, 3, 1});
    EXPECT_LT(nppc::max_abs(nppc::rank_k_truncation(d, 2) - Matrix::diagonal(Vector{5, 3, 0})), 1e-14);
    EXPECT_EQ(nppc::rank_k_truncation(d, 0), Matrix(3, 3, 0.0));
    std::mt19937_64 rng(0);
    const auto mix = random_mixture(4, 1, rng);
    EXPECT_LT(nppc::max_abs(nppc::rank_k_truncation(mix.covariances[0], 4) - mix.covariances[0]), 1e-10);
}

TEST(Toy2d, Construction) {
    const auto [mix, noise] = nppc::make_toy_2d(0);
    EXPECT_NO_THROW(mix.validate());
    EXPECT_NEAR(mix.weights[0] + mix.weights[1], 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(noise.sigma, 2.0);
    EXPECT_EQ(mix.means[0], (Vector{3, 3}));
    EXPECT_EQ(mix.means[1], (Vector{-3, -3}));
    EXPECT_EQ(mix, nppc::make_toy_2d(0).first);
}

TEST(Toy100d, Construction) {
    const auto [mix, noise] = nppc::make_toy_100d(5);
    EXPECT_DOUBLE_EQ(noise.sigma, 10.0);
    EXPECT_EQ(mix.dim(), 100u);
    EXPECT_EQ(mix, nppc::make_toy_100d(5).first);
    EXPECT_NEAR(nppc::norm(mix.means[0]), 25.0, 1e-10);
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(mix.means[0][i], -mix.means[1][i]);
    const auto prior = nppc::mixture_moments({mix.weights, mix.means, mix.covariances});
    EXPECT_LT(nppc::max_abs(prior.mean), 1e-12);

    const auto spec = nppc::eigh_sym(mix.covariances[0] - Matrix::identity(100));
    EXPECT_GT(spec.values[11], 1.0);
    EXPECT_LT(std::abs(spec.values[12]), 1e-8);
    for (double v : nppc::eigh_sym(mix.covariances[0]).values) EXPECT_GE(v, 1.0 - 1e-10);
    EXPECT_EQ(mix.covariances[0], mix.covariances[1]);
}

TEST(Mixture, ValidationRejectsBadWeights) {
    auto mix = single({0}, Matrix::identity(1));
    mix.weights = {0.5};
    EXPECT_THROW(mix.validate(), nppc::InvalidConfig);
}

TEST(LogSumExp, StableForLargeValues) {
    EXPECT_NEAR(nppc::log_sum_exp(Vector{1000, 1000}), 1000 + std::log(2.0), 1e-12);
    EXPECT_NEAR(nppc::log_sum_exp(Vector{-1000, -1000}), -1000 + std::log(2.0), 1e-12);
}

}  // namespace
