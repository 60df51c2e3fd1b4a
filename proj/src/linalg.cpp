#include "nppc/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "nppc/errors.hpp"

namespace nppc {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_square(const Matrix& a, const char* who) {
    if (a.rows() != a.cols()) {
        throw ShapeMismatch(std::string(who) + ": expected a square matrix, got " + shape_str(a));
    }
}

// Symmetric part of `a` after checking that it is symmetric to tolerance.
Matrix checked_symmetric(const Matrix& a, const char* who) {
    require_square(a, who);
    const std::size_t n = a.rows();
    const double scale = std::max(1.0, max_abs(a));
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        s(i, i) = a(i, i);
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(a(i, j) - a(j, i)) > 1e-10 * scale) {
                throw NotSymmetric(std::string(who) + ": |A(" + std::to_string(i) + "," +
                                   std::to_string(j) + ") - A(" + std::to_string(j) + "," +
                                   std::to_string(i) + ")| exceeds tolerance");
            }
            const double v = 0.5 * (a(i, j) + a(j, i));
            s(i, j) = v;
            s(j, i) = v;
        }
    }
    return s;
}

// Eigenvalues clamped per the PSD contract, or NotPsd.
Vector clamped_psd_values(const Spectrum& spec, const char* who) {
    double scale = 0.0;
    for (double v : spec.values) scale = std::max(scale, std::abs(v));
    Vector out(spec.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = spec.values[i];
        if (v < -1e-8 * scale) {
            throw NotPsd(std::string(who) + ": eigenvalue " + std::to_string(v) +
                         " below -1e-8*|A|");
        }
        out[i] = std::max(v, 0.0);
    }
    return out;
}

// Σ sqrt(λ_i) over the eigenvalues of a PSD Gram matrix.
double trace_sqrt_psd(const Matrix& gram) {
    if (gram.rows() == 0) return 0.0;
    const Spectrum spec = eigh_sym(gram);
    double total = 0.0;
    for (double v : clamped_psd_values(spec, "trace_sqrt_psd")) total += std::sqrt(v);
    return total;
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeMismatch("Matrix: data length " + std::to_string(data_.size()) +
                            " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.front().size();
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        if (rows[i].size() != c) throw ShapeMismatch("Matrix::from_rows: ragged rows");
        std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
}

Vector Matrix::row_vector(std::size_t i) const {
    auto r = row(i);
    return {r.begin(), r.end()};
}

Vector Matrix::col_vector(std::size_t j) const {
    Vector v(rows_);
    for (std::size_t i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
    return v;
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

double Matrix::trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
    return t;
}

Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeMismatch("matmul: " + shape_str(a) + " * " + shape_str(b));
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeMismatch("add: " + shape_str(a) + " + " + shape_str(b));
    }
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
    return c;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeMismatch("subtract: " + shape_str(a) + " - " + shape_str(b));
    }
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
    return c;
}

Matrix operator*(double s, const Matrix& a) {
    Matrix c = a;
    for (double& v : c.data()) v *= s;
    return c;
}

Vector operator*(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) {
        throw ShapeMismatch("matvec: " + shape_str(a) + " * vector of length " +
                            std::to_string(x.size()));
    }
    Vector y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeMismatch("dot: lengths " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Vector axpy(double alpha, std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeMismatch("axpy: length mismatch");
    Vector out(y.begin(), y.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * x[i];
    return out;
}

Vector subtract(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeMismatch("subtract: length mismatch");
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Matrix outer(std::span<const double> a, std::span<const double> b) {
    Matrix m(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = a[i] * b[j];
    return m;
}

double max_abs(const Matrix& a) { return max_abs(std::span<const double>(a.data())); }

double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

double frobenius_norm(const Matrix& a) { return norm(a.data()); }

double orthonormality_defect(const Matrix& a) {
    double defect = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = i; j < a.rows(); ++j) {
            const double g = dot(a.row(i), a.row(j));
            defect = std::max(defect, std::abs(g - (i == j ? 1.0 : 0.0)));
        }
    }
    return defect;
}

// ---------------------------------------------------------------------------
// Decompositions

GramSchmidtResult gram_schmidt(const Matrix& raw) {
    const std::size_t k_count = raw.rows();
    const std::size_t d = raw.cols();
    if (k_count > d) {
        throw ShapeMismatch("gram_schmidt: " + std::to_string(k_count) +
                            " directions exceed dimension " + std::to_string(d));
    }
    GramSchmidtResult out{Matrix(k_count, d), Vector(k_count)};
    Vector residual(d);
    for (std::size_t k = 0; k < k_count; ++k) {
        const auto dk = raw.row(k);
        std::copy(dk.begin(), dk.end(), residual.begin());
        for (std::size_t l = 0; l < k; ++l) {
            const auto wl = out.directions.row(l);
            const double c = dot(dk, wl);
            for (std::size_t j = 0; j < d; ++j) residual[j] -= c * wl[j];
        }
        const double rnorm = norm(residual);
        const double dnorm = norm(dk);
        if (!(rnorm >= 1e-12 * dnorm) || dnorm == 0.0) {
            throw DegenerateDirections("gram_schmidt: direction " + std::to_string(k) +
                                       " is linearly dependent on its predecessors");
        }
        out.residual_norms[k] = rnorm;
        // Second pass restores orthogonality lost to cancellation.
        for (std::size_t l = 0; l < k; ++l) {
            const auto wl = out.directions.row(l);
            const double c = dot(residual, wl);
            for (std::size_t j = 0; j < d; ++j) residual[j] -= c * wl[j];
        }
        const double n2 = norm(residual);
        auto wk = out.directions.row(k);
        for (std::size_t j = 0; j < d; ++j) wk[j] = residual[j] / n2;
    }
    return out;
}

Spectrum eigh_sym(const Matrix& input) {
    Matrix a = checked_symmetric(input, "eigh_sym");
    const std::size_t n = a.rows();
    Matrix v = Matrix::identity(n);

    const double frob2 = std::max(std::pow(frobenius_norm(a), 2), 1e-300);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off <= 1e-32 * frob2) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double app = a(p, p);
                const double aqq = a(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                auto rp = a.row(p);
                auto rq = a.row(q);
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = rp[k];
                    const double aqk = rq[k];
                    rp[k] = c * apk - s * aqk;
                    rq[k] = s * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    Spectrum spec{Vector(n), Matrix(n, n)};
    for (std::size_t c = 0; c < n; ++c) {
        spec.values[c] = a(order[c], order[c]);
        for (std::size_t r = 0; r < n; ++r) spec.vectors(r, c) = v(r, order[c]);
    }
    return spec;
}

Matrix sqrtm_psd(const Matrix& a) {
    const Spectrum spec = eigh_sym(a);
    const Vector vals = clamped_psd_values(spec, "sqrtm_psd");
    const std::size_t n = a.rows();
    Matrix b(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double s = std::sqrt(vals[k]);
        if (s == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const double vik = spec.vectors(i, k) * s;
            for (std::size_t j = 0; j < n; ++j) b(i, j) += vik * spec.vectors(j, k);
        }
    }
    // Exact symmetry for downstream symmetric consumers.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double m = 0.5 * (b(i, j) + b(j, i));
            b(i, j) = m;
            b(j, i) = m;
        }
    return b;
}

double wasserstein2_gaussians(std::span<const double> mean1, const Matrix& cov1,
                              std::span<const double> mean2, const Matrix& cov2) {
    const std::size_t d = mean1.size();
    if (mean2.size() != d || cov1.rows() != d || cov1.cols() != d || cov2.rows() != d ||
        cov2.cols() != d) {
        throw ShapeMismatch("wasserstein2_gaussians: inconsistent dimensions");
    }
    const Vector delta = subtract(mean1, mean2);
    const Matrix root1 = sqrtm_psd(cov1);
    Matrix inner = root1 * cov2 * root1;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double m = 0.5 * (inner(i, j) + inner(j, i));
            inner(i, j) = m;
            inner(j, i) = m;
        }
    (void)clamped_psd_values(eigh_sym(cov2), "wasserstein2_gaussians");
    const double cross = trace_sqrt_psd(inner);
    const double w2 = dot(delta, delta) + cov1.trace() + cov2.trace() - 2.0 * cross;
    return std::max(w2, 0.0);
}

double wasserstein2_factored(std::span<const double> mean1, const Matrix& factor1,
                             std::span<const double> mean2, const Matrix& factor2) {
    const std::size_t d = mean1.size();
    if (mean2.size() != d || factor1.rows() != d || factor2.rows() != d) {
        throw ShapeMismatch("wasserstein2_factored: inconsistent dimensions");
    }
    const Vector delta = subtract(mean1, mean2);
    const double tr1 = std::pow(frobenius_norm(factor1), 2);
    const double tr2 = std::pow(frobenius_norm(factor2), 2);

    // Nuclear norm of G = F1ᵀF2 via the smaller of GGᵀ, GᵀG.
    const Matrix g = factor1.transpose() * factor2;
    const Matrix gram = g.rows() <= g.cols() ? g * g.transpose() : g.transpose() * g;
    Matrix sym = gram;
    for (std::size_t i = 0; i < sym.rows(); ++i)
        for (std::size_t j = i + 1; j < sym.cols(); ++j) {
            const double m = 0.5 * (sym(i, j) + sym(j, i));
            sym(i, j) = m;
            sym(j, i) = m;
        }
    const double cross = trace_sqrt_psd(sym);
    return std::max(dot(delta, delta) + tr1 + tr2 - 2.0 * cross, 0.0);
}

SamplePca pca_from_samples(const Matrix& samples, std::size_t k) {
    const std::size_t n = samples.rows();
    const std::size_t d = samples.cols();
    if (n < 2) throw InsufficientSamples("pca_from_samples: need at least 2 samples");
    if (k > d) throw ShapeMismatch("pca_from_samples: K exceeds dimension");
    if (k > n - 1) {
        throw InsufficientSamples("pca_from_samples: K=" + std::to_string(k) + " needs more than " +
                                  std::to_string(n) + " samples");
    }
    SamplePca out{Vector(d, 0.0), Matrix(k, d), Vector(k)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.mean[j] += samples(i, j);
    for (double& m : out.mean) m /= static_cast<double>(n);

    Matrix cov(d, d);
    Vector centered(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) centered[j] = samples(i, j) - out.mean[j];
        for (std::size_t a = 0; a < d; ++a) {
            const double ca = centered[a];
            for (std::size_t b = a; b < d; ++b) cov(a, b) += ca * centered[b];
        }
    }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            cov(a, b) /= static_cast<double>(n);
            cov(b, a) = cov(a, b);
        }
    const Spectrum spec = eigh_sym(cov);
    for (std::size_t c = 0; c < k; ++c) {
        out.variances[c] = std::max(spec.values[c], 0.0);
        for (std::size_t j = 0; j < d; ++j) out.directions(c, j) = spec.vectors(j, c);
    }
    return out;
}

Vector principal_angles(const Matrix& w1, const Matrix& w2) {
    if (w1.cols() != w2.cols()) throw ShapeMismatch("principal_angles: dimension mismatch");
    if (orthonormality_defect(w1) > 1e-6 || orthonormality_defect(w2) > 1e-6) {
        throw NotOrthonormal("principal_angles: input rows are not orthonormal");
    }
    const Matrix m = w1 * w2.transpose();
    const Matrix gram = m.rows() <= m.cols() ? m * m.transpose() : m.transpose() * m;
    const Spectrum spec = eigh_sym(gram);
    Vector angles(spec.values.size());
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const double s = std::clamp(std::sqrt(std::max(spec.values[i], 0.0)), 0.0, 1.0);
        angles[i] = std::acos(s) * 180.0 / std::numbers::pi;
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

Matrix random_orthogonal(std::size_t d, std::mt19937_64& rng) {
    if (d == 0) throw InvalidConfig("random_orthogonal: dimension must be positive");
    std::normal_distribution<double> normal(0.0, 1.0);
    for (;;) {
        Matrix g(d, d);
        for (double& v : g.data()) v = normal(rng);
        try {
            // Row-wise Gram-Schmidt is QR of gᵀ with a positive R diagonal.
            return gram_schmidt(g).directions;
        } catch (const DegenerateDirections&) {
            // Probability zero; draw again.
        }
    }
}

Matrix solve_spd(const Spectrum& spectrum, const Matrix& rhs) {
    const std::size_t n = spectrum.values.size();
    if (rhs.rows() != n) throw ShapeMismatch("solve_spd: right-hand side rows mismatch");
    for (double v : spectrum.values) {
        if (!(v > 0.0)) throw SingularSolve("solve_spd: non-positive eigenvalue");
    }
    // X = V Λ⁻¹ Vᵀ B
    Matrix vt_b = spectrum.vectors.transpose() * rhs;
    for (std::size_t i = 0; i < n; ++i) {
        auto r = vt_b.row(i);
        for (double& x : r) x /= spectrum.values[i];
    }
    return spectrum.vectors * vt_b;
}

}  // namespace nppc
