#include "nppc/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <thread>

#include "nppc/errors.hpp"

namespace nppc {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

Matrix scaled_pc_factor(const NppcOutput& output, std::size_t k) {
    const std::size_t available = output.w.rows();
    if (k == static_cast<std::size_t>(-1)) k = available;
    if (k > available) {
        throw BadIndex("scaled_pc_factor: requested " + std::to_string(k) + " directions, have " +
                       std::to_string(available));
    }
    const std::size_t d = output.w.cols();
    Matrix f(d, k);
    for (std::size_t c = 0; c < k; ++c) {
        const double s = std::sqrt(std::max(output.sigma2[c], 0.0));
        for (std::size_t i = 0; i < d; ++i) f(i, c) = s * output.w(c, i);
    }
    return f;
}

GaussianMoments nppc_gaussian(std::span<const double> xhat, const NppcOutput& output) {
    const std::size_t d = output.w.cols();
    if (xhat.size() != d) throw ShapeMismatch("nppc_gaussian: x_hat dimension mismatch");
    GaussianMoments g{Vector(xhat.begin(), xhat.end()), Matrix(d, d)};
    for (std::size_t k = 0; k < output.w.rows(); ++k) {
        const double s2 = output.sigma2[k];
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) g.covariance(i, j) += s2 * output.w(k, i) * output.w(k, j);
    }
    return g;
}

std::pair<double, double> mean_and_sem(std::vector<double> values) {
    if (values.empty()) return {kNaN, kNaN};
    std::sort(values.begin(), values.end());
    double total = 0.0;
    for (double v : values) total += v;
    const double n = static_cast<double>(values.size());
    const double mean = total / n;
    if (values.size() < 2) return {mean, 0.0};
    std::vector<double> sq(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) sq[i] = (values[i] - mean) * (values[i] - mean);
    std::sort(sq.begin(), sq.end());
    double ss = 0.0;
    for (double v : sq) ss += v;
    return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> workers;
    workers.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        workers.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next.store(n);
                    return;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    if (failure) std::rethrow_exception(failure);
}

W2Report w2_table(const MomentsFn& oracle, const std::vector<NamedMethod>& methods,
                  const Matrix& test_ys, const std::vector<std::size_t>& ks, ReferenceMode mode,
                  std::size_t threads, std::uint64_t seed) {
    const std::size_t n = test_ys.rows();
    const std::size_t d = test_ys.cols();
    if (n == 0) throw InvalidConfig("w2_table: no test points");
    for (std::size_t k : ks) {
        if (k > d) throw InvalidConfig("w2_table: K=" + std::to_string(k) + " exceeds dimension");
    }
    W2Report report;
    report.ks = ks;
    report.test_size = n;
    report.seed = seed;
    for (const auto& m : methods) report.methods.push_back(m.name);

    // values[method][k][point]
    std::vector<std::vector<std::vector<double>>> values(
        methods.size(), std::vector<std::vector<double>>(ks.size(), std::vector<double>(n, kNaN)));

    parallel_for(n, threads, [&](std::size_t i) {
        const auto y = test_ys.row(i);
        GaussianMoments gt;
        Spectrum spec;
        try {
            gt = oracle(y);
            spec = eigh_sym(gt.covariance);
        } catch (const Error&) {
            return;  // every cell of this point stays NaN
        }
        for (std::size_t ki = 0; ki < ks.size(); ++ki) {
            const std::size_t rank = mode == ReferenceMode::Truncated ? ks[ki] : d;
            Matrix ref(d, rank);
            for (std::size_t c = 0; c < rank; ++c) {
                const double s = std::sqrt(std::max(spec.values[c], 0.0));
                for (std::size_t r = 0; r < d; ++r) ref(r, c) = s * spec.vectors(r, c);
            }
            for (std::size_t mi = 0; mi < methods.size(); ++mi) {
                try {
                    const FactoredGaussian g = methods[mi].build(i, y, ks[ki]);
                    values[mi][ki][i] = wasserstein2_factored(gt.mean, ref, g.mean, g.factor);
                } catch (const Error&) {
                    values[mi][ki][i] = kNaN;
                }
            }
        }
    });

    report.cells.resize(methods.size());
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        for (std::size_t ki = 0; ki < ks.size(); ++ki) {
            W2Cell cell;
            cell.per_point = std::move(values[mi][ki]);
            std::vector<double> finite;
            for (double v : cell.per_point) {
                if (std::isfinite(v)) finite.push_back(v);
            }
            cell.poisoned = finite.size() != n;
            cell.n = finite.size();
            std::tie(cell.mean, cell.sem) = mean_and_sem(std::move(finite));
            report.cells[mi].push_back(std::move(cell));
        }
    }
    return report;
}

W2Method point_mass_method(std::function<Vector(std::size_t)> mean_of) {
    return [mean_of = std::move(mean_of)](std::size_t i, std::span<const double> y, std::size_t) {
        return FactoredGaussian{mean_of(i), Matrix(y.size(), 0)};
    };
}

W2Method nppc_method(const Matrix& xhats, const std::vector<NppcOutput>& outputs) {
    if (xhats.rows() != outputs.size()) throw ShapeMismatch("nppc_method: row count mismatch");
    return [&xhats, &outputs](std::size_t i, std::span<const double>, std::size_t k) {
        return FactoredGaussian{xhats.row_vector(i), scaled_pc_factor(outputs.at(i), k)};
    };
}

double residual_norm(std::span<const double> e, const Matrix& w) {
    if (w.cols() != e.size()) throw ShapeMismatch("residual_norm: dimension mismatch");
    if (orthonormality_defect(w) > 1e-6) throw NotOrthonormal("residual_norm: rows of W are not orthonormal");
    Vector r(e.begin(), e.end());
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const double c = dot(w.row(k), e);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] -= c * w(k, j);
    }
    return norm(r);
}

double rmse(const Matrix& xhat, const Matrix& x) {
    if (xhat.rows() != x.rows() || xhat.cols() != x.cols()) throw ShapeMismatch("rmse: shape mismatch");
    if (x.rows() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) total += norm(subtract(x.row(i), xhat.row(i)));
    return total / static_cast<double>(x.rows());
}

namespace {

// Residual energy after each of the first K directions, K = 0…rows(w).
void accumulate_curve(std::span<const double> e, const Matrix& w, Vector& residual) {
    Vector r(e.begin(), e.end());
    double r2 = dot(r, r);
    residual[0] += r2;
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const double c = dot(w.row(k), r);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] -= c * w(k, j);
        r2 = std::max(r2 - c * c, 0.0);
        residual[k + 1] += r2;
    }
}

Vector finish_curve(Vector residual) {
    const double total = residual[0];
    for (double& v : residual) v = total > 0.0 ? v / total : 0.0;
    residual[0] = 1.0;
    return residual;
}

}  // namespace

Vector unexplained_curve(const Matrix& errors, const std::vector<Matrix>& per_sample_w) {
    if (errors.rows() == 0) throw InvalidConfig("unexplained_curve: no errors");
    if (per_sample_w.size() != errors.rows()) throw ShapeMismatch("unexplained_curve: one W per error required");
    const std::size_t k_max = per_sample_w.front().rows();
    Vector residual(k_max + 1, 0.0);
    for (std::size_t i = 0; i < errors.rows(); ++i) {
        if (per_sample_w[i].rows() != k_max) throw ShapeMismatch("unexplained_curve: ragged K");
        accumulate_curve(errors.row(i), per_sample_w[i], residual);
    }
    return finish_curve(std::move(residual));
}

Vector unexplained_curve(const Matrix& errors, const Matrix& shared_w) {
    if (errors.rows() == 0) throw InvalidConfig("unexplained_curve: no errors");
    Vector residual(shared_w.rows() + 1, 0.0);
    for (std::size_t i = 0; i < errors.rows(); ++i) accumulate_curve(errors.row(i), shared_w, residual);
    return finish_curve(std::move(residual));
}

SamplePca sample_pca_baseline(const PosteriorSampler& sampler, std::span<const double> y,
                              std::size_t m, std::size_t k, std::mt19937_64& rng) {
    if (m <= k) {
        throw InsufficientSamples("sample_pca_baseline: need more than K=" + std::to_string(k) +
                                  " samples, got " + std::to_string(m));
    }
    return pca_from_samples(sampler(y, m, rng), k);
}

double line_angle_degrees(std::span<const double> a, std::span<const double> b) {
    const double c = std::abs(dot(a, b)) / (norm(a) * norm(b));
    return std::acos(std::clamp(c, 0.0, 1.0)) * 180.0 / std::numbers::pi;
}

}  // namespace nppc
