#include "nppc/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "nppc/errors.hpp"

namespace nppc {

void GaussianMixture::validate() const {
    const std::size_t l = weights.size();
    if (l == 0) throw InvalidConfig("GaussianMixture: no components");
    if (means.size() != l || covariances.size() != l) {
        throw InvalidConfig("GaussianMixture: weights, means and covariances differ in count");
    }
    double total = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw InvalidConfig("GaussianMixture: weights must be positive");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidConfig("GaussianMixture: weights must sum to 1");
    const std::size_t d = means.front().size();
    if (d == 0) throw InvalidConfig("GaussianMixture: zero dimension");
    for (std::size_t i = 0; i < l; ++i) {
        if (means[i].size() != d || covariances[i].rows() != d || covariances[i].cols() != d) {
            throw InvalidConfig("GaussianMixture: component " + std::to_string(i) +
                                " has inconsistent dimensions");
        }
        const Spectrum spec = eigh_sym(covariances[i]);
        if (spec.values.back() < -1e-8 * std::max(1.0, std::abs(spec.values.front()))) {
            throw NotPsd("GaussianMixture: covariance " + std::to_string(i) + " is not PSD");
        }
    }
}

double log_sum_exp(std::span<const double> v) {
    if (v.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

// ---------------------------------------------------------------------------
// PosteriorOracle

PosteriorOracle::PosteriorOracle(GaussianMixture mixture, NoiseModel noise)
    : mixture_(std::move(mixture)), noise_(noise) {
    mixture_.validate();
    if (!(noise_.sigma > 0.0)) throw InvalidConfig("NoiseModel: sigma must be positive");
    const std::size_t d = mixture_.dim();
    const double s2 = noise_.sigma * noise_.sigma;
    cache_.reserve(mixture_.components());
    for (const Matrix& cov : mixture_.covariances) {
        // Σ and Σ + σ²I share eigenvectors; working in Σ's eigenbasis keeps the
        // conditioned covariance σ²λ/(λ + σ²) exactly PSD.
        const Spectrum prior = eigh_sym(cov);
        Component c;
        c.marginal.vectors = prior.vectors;
        Vector gain_diag(d), post_diag(d), root_diag(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double lam = std::max(prior.values[i], 0.0);
            const double total = lam + s2;
            if (!(total > 0.0)) throw SingularSolve("PosteriorOracle: Σ + σ²I is not positive definite");
            c.marginal.values.push_back(total);
            c.log_det += std::log(total);
            gain_diag[i] = lam / total;
            post_diag[i] = s2 * lam / total;
            root_diag[i] = std::sqrt(post_diag[i]);
        }
        const auto rebuild = [&](const Vector& diag) {
            Matrix out(d, d);
            for (std::size_t k = 0; k < d; ++k) {
                if (diag[k] == 0.0) continue;
                for (std::size_t i = 0; i < d; ++i) {
                    const double vik = prior.vectors(i, k) * diag[k];
                    for (std::size_t j = i; j < d; ++j) out(i, j) += vik * prior.vectors(j, k);
                }
            }
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < i; ++j) out(i, j) = out(j, i);
            return out;
        };
        c.gain = rebuild(gain_diag);
        c.posterior_cov = rebuild(post_diag);
        c.posterior_root = rebuild(root_diag);
        cache_.push_back(std::move(c));
    }
}

Vector PosteriorOracle::log_weighted_likelihoods(std::span<const double> y) const {
    const std::size_t d = dim();
    if (y.size() != d) throw ShapeMismatch("posterior: y has wrong dimension");
    const double log2pi = std::log(2.0 * std::numbers::pi);
    Vector out(mixture_.components());
    for (std::size_t l = 0; l < out.size(); ++l) {
        const Component& c = cache_[l];
        const Vector diff = subtract(y, mixture_.means[l]);
        double quad = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double zi = 0.0;
            for (std::size_t j = 0; j < d; ++j) zi += c.marginal.vectors(j, i) * diff[j];
            quad += zi * zi / c.marginal.values[i];
        }
        out[l] = std::log(mixture_.weights[l]) - 0.5 * (quad + c.log_det + static_cast<double>(d) * log2pi);
    }
    return out;
}

double PosteriorOracle::log_evidence(std::span<const double> y) const {
    return log_sum_exp(log_weighted_likelihoods(y));
}

PosteriorComponents PosteriorOracle::components(std::span<const double> y) const {
    const Vector logs = log_weighted_likelihoods(y);
    const double norm_const = log_sum_exp(logs);
    PosteriorComponents out;
    out.responsibilities.resize(logs.size());
    for (std::size_t l = 0; l < logs.size(); ++l) {
        out.responsibilities[l] = std::exp(logs[l] - norm_const);
        const Vector diff = subtract(y, mixture_.means[l]);
        const Vector shift = cache_[l].gain * std::span<const double>(diff);
        out.means.push_back(axpy(1.0, shift, mixture_.means[l]));
        out.covariances.push_back(cache_[l].posterior_cov);
    }
    return out;
}

GaussianMoments mixture_moments(const PosteriorComponents& parts) {
    const std::size_t d = parts.means.front().size();
    GaussianMoments m{Vector(d, 0.0), Matrix(d, d)};
    for (std::size_t l = 0; l < parts.means.size(); ++l) {
        const double r = parts.responsibilities[l];
        for (std::size_t i = 0; i < d; ++i) m.mean[i] += r * parts.means[l][i];
    }
    for (std::size_t l = 0; l < parts.means.size(); ++l) {
        const double r = parts.responsibilities[l];
        if (r == 0.0) continue;
        const Vector dev = subtract(parts.means[l], m.mean);
        const Matrix& cov = parts.covariances[l];
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) m.covariance(i, j) += r * (dev[i] * dev[j] + cov(i, j));
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double v = 0.5 * (m.covariance(i, j) + m.covariance(j, i));
            m.covariance(i, j) = v;
            m.covariance(j, i) = v;
        }
    return m;
}

GaussianMoments PosteriorOracle::moments(std::span<const double> y) const {
    return mixture_moments(components(y));
}

Matrix PosteriorOracle::sample(std::span<const double> y, std::size_t m, std::mt19937_64& rng) const {
    if (m == 0) throw InvalidConfig("posterior_sample: m must be at least 1");
    const PosteriorComponents parts = components(y);
    const std::size_t d = dim();
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix out(m, d);
    Vector z(d);
    for (std::size_t s = 0; s < m; ++s) {
        const double u = unif(rng);
        std::size_t l = 0;
        double acc = parts.responsibilities[0];
        while (u >= acc && l + 1 < parts.responsibilities.size()) acc += parts.responsibilities[++l];
        for (double& v : z) v = normal(rng);
        const Vector noise = cache_[l].posterior_root * std::span<const double>(z);
        auto row = out.row(s);
        for (std::size_t i = 0; i < d; ++i) row[i] = parts.means[l][i] + noise[i];
    }
    return out;
}

PosteriorComponents posterior_components(const GaussianMixture& mix, const NoiseModel& noise,
                                         std::span<const double> y) {
    return PosteriorOracle(mix, noise).components(y);
}

GaussianMoments posterior_moments(const GaussianMixture& mix, const NoiseModel& noise,
                                  std::span<const double> y) {
    return PosteriorOracle(mix, noise).moments(y);
}

Matrix posterior_sample(const GaussianMixture& mix, const NoiseModel& noise,
                        std::span<const double> y, std::size_t m, std::mt19937_64& rng) {
    return PosteriorOracle(mix, noise).sample(y, m, rng);
}

// ---------------------------------------------------------------------------

Dataset sample_dataset(const GaussianMixture& mix, const NoiseModel& noise, std::size_t n,
                       std::mt19937_64& rng) {
    mix.validate();
    if (n == 0) throw InvalidConfig("sample_dataset: n must be at least 1");
    if (!(noise.sigma >= 0.0)) throw InvalidConfig("sample_dataset: negative noise");
    const std::size_t d = mix.dim();
    std::vector<Matrix> roots;
    for (const Matrix& c : mix.covariances) roots.push_back(sqrtm_psd(c));

    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    Dataset data{Matrix(n, d), Matrix(n, d)};
    Vector z(d);
    for (std::size_t s = 0; s < n; ++s) {
        const double u = unif(rng);
        std::size_t l = 0;
        double acc = mix.weights[0];
        while (u >= acc && l + 1 < mix.weights.size()) acc += mix.weights[++l];
        for (double& v : z) v = normal(rng);
        const Vector dev = roots[l] * std::span<const double>(z);
        auto xr = data.x.row(s);
        auto yr = data.y.row(s);
        for (std::size_t i = 0; i < d; ++i) xr[i] = mix.means[l][i] + dev[i];
        for (std::size_t i = 0; i < d; ++i) yr[i] = xr[i] + noise.sigma * normal(rng);
    }
    return data;
}

Matrix rank_k_truncation(const Matrix& cov, std::size_t k) {
    const Spectrum spec = eigh_sym(cov);
    const std::size_t d = cov.rows();
    if (k > d) throw ShapeMismatch("rank_k_truncation: K exceeds dimension");
    Matrix out(d, d);
    for (std::size_t c = 0; c < k; ++c) {
        const double lam = std::max(spec.values[c], 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            const double vi = spec.vectors(i, c) * lam;
            for (std::size_t j = 0; j < d; ++j) out(i, j) += vi * spec.vectors(j, c);
        }
    }
    return out;
}

std::pair<GaussianMixture, NoiseModel> make_toy_2d(std::uint64_t /*seed*/) {
    GaussianMixture mix;
    mix.weights = {0.5, 0.5};
    mix.means = {{3.0, 3.0}, {-3.0, -3.0}};
    mix.covariances = {Matrix::from_rows({{2.0, 1.2}, {1.2, 1.0}}),
                       Matrix::from_rows({{1.0, -0.8}, {-0.8, 2.0}})};
    return {mix, NoiseModel{2.0}};
}

std::pair<GaussianMixture, NoiseModel> make_toy_100d(std::uint64_t seed) {
    constexpr std::size_t d = 100;
    constexpr std::size_t rank = 12;
    constexpr double mean_norm = 25.0;
    // Column scales of Q: squared norms log-spaced from 180 down to 1.5, so the
    // posterior spectrum decays over K = 3…12 instead of forming one flat block.
    constexpr double top = 180.0;
    constexpr double bottom = 1.5;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    Matrix g(rank, d);
    for (double& v : g.data()) v = normal(rng);
    const Matrix basis = gram_schmidt(g).directions;
    Matrix q(d, rank);
    for (std::size_t c = 0; c < rank; ++c) {
        const double t = static_cast<double>(c) / static_cast<double>(rank - 1);
        const double scale = std::sqrt(top * std::pow(bottom / top, t));
        for (std::size_t i = 0; i < d; ++i) q(i, c) = scale * basis(c, i);
    }
    Matrix cov = q * q.transpose();
    for (std::size_t i = 0; i < d; ++i) cov(i, i) += 1.0;

    Vector dir(d);
    for (double& v : dir) v = normal(rng);
    const double n = norm(dir);
    for (double& v : dir) v *= mean_norm / n;
    Vector neg(d);
    for (std::size_t i = 0; i < d; ++i) neg[i] = -dir[i];

    GaussianMixture mix;
    mix.weights = {0.5, 0.5};
    mix.means = {dir, neg};
    mix.covariances = {cov, cov};
    return {mix, NoiseModel{10.0}};
}

}  // namespace nppc
