#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

namespace nppc {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> diag);
    /// Builds from nested rows; all rows must have equal length.
    static Matrix from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
    Vector row_vector(std::size_t i) const;
    Vector col_vector(std::size_t j) const;

    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }

    Matrix transpose() const;
    double trace() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Vector operator*(const Matrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
Vector axpy(double alpha, std::span<const double> x, std::span<const double> y);
Vector subtract(std::span<const double> a, std::span<const double> b);
Matrix outer(std::span<const double> a, std::span<const double> b);

/// Largest absolute entry.
double max_abs(const Matrix& a);
double max_abs(std::span<const double> a);
double frobenius_norm(const Matrix& a);
/// Largest absolute entry of A·Aᵀ − I (rows of A orthonormal iff small).
double orthonormality_defect(const Matrix& a);

/// Eigenvalues in descending order; eigenvector i is column i of `vectors`.
struct Spectrum {
    Vector values;
    Matrix vectors;
};

struct GramSchmidtResult {
    Matrix directions;     // K×d, orthonormal rows
    Vector residual_norms; // ‖d_k − Σ_{ℓ<k}(d_kᵀw_ℓ)w_ℓ‖
};

/// Orthonormalizes the rows of `raw` in order. Residual norms follow the
/// classical projection formula; the returned rows get a second
/// orthogonalization pass so they stay orthonormal to working precision.
/// Throws DegenerateDirections when a residual drops below 1e-12·‖d_k‖.
GramSchmidtResult gram_schmidt(const Matrix& raw);

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Throws NotSymmetric when max |A − Aᵀ| exceeds 1e-10·max(1, max|A|).
Spectrum eigh_sym(const Matrix& a);

/// Principal square root of a PSD matrix. Eigenvalues in (−1e-8·‖A‖, 0) are
/// clamped to zero; anything more negative throws NotPsd.
Matrix sqrtm_psd(const Matrix& a);

/// Squared Wasserstein-2 distance between N(mean1, cov1) and N(mean2, cov2).
double wasserstein2_gaussians(std::span<const double> mean1, const Matrix& cov1,
                              std::span<const double> mean2, const Matrix& cov2);

/// Same distance with covariances given as factors, cov_i = F_i F_iᵀ
/// (F_i is d×r_i, r_i may be 0). Uses Tr((Σ1^½Σ2Σ1^½)^½) = ‖F1ᵀF2‖_*, so the
/// cost is dominated by an r×r eigenproblem instead of two d×d square roots.
double wasserstein2_factored(std::span<const double> mean1, const Matrix& factor1,
                             std::span<const double> mean2, const Matrix& factor2);

struct SamplePca {
    Vector mean;
    Matrix directions;  // K×d
    Vector variances;   // descending
};

/// PCA of the rows of `samples` with the 1/N covariance normalization.
SamplePca pca_from_samples(const Matrix& samples, std::size_t k);

/// Principal angles in degrees, ascending, between the row spaces of two
/// K×d matrices with orthonormal rows.
Vector principal_angles(const Matrix& w1, const Matrix& w2);

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix with the
/// sign of R's diagonal folded into Q.
Matrix random_orthogonal(std::size_t d, std::mt19937_64& rng);

/// Solves A·X = B for symmetric positive definite A through its spectrum.
Matrix solve_spd(const Spectrum& spectrum, const Matrix& rhs);

}  // namespace nppc
