#include "property_checks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "nppc/autodiff.hpp"
#include "nppc/gmm.hpp"
#include "nppc/linalg.hpp"
#include "nppc/models.hpp"
#include "nppc/nppc.hpp"

namespace nppc::checks {

namespace {

Matrix gaussian(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(r, c);
    for (auto& v : m.data()) v = n(rng);
    return m;
}

std::size_t uniform_size(std::size_t lo, std::size_t hi, std::mt19937_64& rng) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::string dir_name(std::size_t k) { return "d" + std::to_string(k); }

std::vector<ad::Var> raw_vars(ad::Tape& t, const ad::ParamStore& ps, std::size_t k) {
    std::vector<ad::Var> raw;
    for (std::size_t i = 0; i < k; ++i) raw.push_back(t.param(ps, dir_name(i)));
    return raw;
}

void record(std::vector<NamedError>& out, const std::string& name, double err) {
    for (auto& e : out) {
        if (e.name == name) {
            e.max_rel_error = std::max(e.max_rel_error, err);
            return;
        }
    }
    out.push_back({name, err});
}

}  // namespace

std::vector<NamedError> loss_gradient_errors(std::size_t instances, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<NamedError> out;
    constexpr std::size_t batch = 3;

    for (std::size_t inst = 0; inst < instances; ++inst) {
        const std::size_t dx = uniform_size(2, 8, rng);
        const std::size_t k = uniform_size(1, std::min<std::size_t>(4, dx), rng);

        ad::ParamStore dirs;
        for (std::size_t i = 0; i < k; ++i) dirs.add(dir_name(i), gaussian(batch, dx, rng));
        const Matrix e = gaussian(batch, dx, rng);

        for (bool normalize : {false, true}) {
            const std::string tag = normalize ? " (normalized)" : "";
            const auto pc = [&](ad::Tape& t, const ad::ParamStore& ps) {
                const auto gs = gram_schmidt_layer(t, raw_vars(t, ps, k));
                return loss_pc(gs, t.constant(e), normalize);
            };
            record(out, "loss_pc" + tag, ad::grad_check(pc, dirs));

            const auto first = [&](ad::Tape& t, const ad::ParamStore& ps) {
                const auto gs = gram_schmidt_layer(t, raw_vars(t, ps, 1));
                return loss_pc_first(gs.w[0], t.constant(e), normalize);
            };
            record(out, "loss_pc_first" + tag, ad::grad_check(first, dirs));

            const auto sigma = [&](ad::Tape& t, const ad::ParamStore& ps) {
                const auto gs = gram_schmidt_layer(t, raw_vars(t, ps, k));
                return loss_sigma(gs, t.constant(e), normalize);
            };
            record(out, "loss_sigma" + tag, ad::grad_check(sigma, dirs));
        }

        ad::ParamStore pix;
        pix.add("xhat", gaussian(batch, dx, rng));
        pix.add("s2", gaussian(batch, dx, rng));
        const Matrix x = gaussian(batch, dx, rng);
        const auto mu = [&](ad::Tape& t, const ad::ParamStore& ps) {
            return loss_mu(t.param(ps, "xhat"), t.constant(x));
        };
        record(out, "loss_mu", ad::grad_check(mu, pix));
        const auto ppv = [&](ad::Tape& t, const ad::ParamStore& ps) {
            return loss_per_pixel_var(t.param(ps, "xhat"), t.param(ps, "s2"), t.constant(x));
        };
        record(out, "loss_per_pixel_var", ad::grad_check(ppv, pix));

        const MlpConfig shape{.input_dim = 0, .hidden_width = 6, .depth = 2, .slope = 0.1, .output_dim = 0};
        MlpConfig mean_shape = shape;
        mean_shape.input_dim = dx;
        mean_shape.output_dim = dx;
        const NppcHeadConfig head{.k = k, .dx = dx, .dy = dx, .include_mean_input = true};
        const JointModel model = JointModel::create(mean_shape, head, shape, rng());
        const Matrix xs = gaussian(batch, dx, rng);
        const Matrix ys = gaussian(batch, dx, rng);
        for (bool normalize : {false, true}) {
            TrainConfig cfg;
            cfg.k = k;
            cfg.epochs = 2;
            cfg.ramp_w_epoch = 0;
            cfg.ramp_sigma_epoch = 0;
            cfg.lambda1 = 1.0;
            cfg.lambda2 = 0.5;
            cfg.normalize_losses = normalize;
            const auto all = [&](ad::Tape& t, const ad::ParamStore& ps) {
                JointModel m = model;
                m.params = ps;
                return loss_all(m, t, xs, ys, 1, cfg).total;
            };
            record(out, normalize ? "loss_all (normalized)" : "loss_all", ad::grad_check(all, model.params));
        }
    }
    return out;
}

std::size_t stopgrad_violations(std::size_t instances, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::size_t violations = 0;
    for (std::size_t inst = 0; inst < instances; ++inst) {
        const std::size_t dx = uniform_size(2, 8, rng);
        const std::size_t k = uniform_size(2, std::min<std::size_t>(4, dx), rng);
        const std::size_t batch = uniform_size(1, 4, rng);
        ad::ParamStore dirs;
        for (std::size_t i = 0; i < k; ++i) dirs.add(dir_name(i), gaussian(batch, dx, rng));
        const Matrix e = gaussian(batch, dx, rng);

        for (std::size_t term = 1; term < k; ++term) {
            ad::Tape t;
            const auto gs = gram_schmidt_layer(t, raw_vars(t, dirs, k));
            const auto ev = t.constant(e);
            const auto proj = ad::dot(gs.w[term], ev);
            const auto captured = ad::mul(proj, proj);
            const auto diff = ad::sub(gs.sigma2[term], ad::stop_grad(captured));
            const auto loss = ad::sum(ad::add(ad::scale(captured, -1.0), ad::mul(diff, diff)));
            const auto grads = t.backward(loss, dirs);
            for (std::size_t j = 0; j < term; ++j) {
                if (max_abs(grads[j]) != 0.0) ++violations;
            }
        }
    }
    return violations;
}

double rotation_invariance_gap(std::size_t instances, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t inst = 0; inst < instances; ++inst) {
        const std::size_t d = uniform_size(2, 10, rng);
        const std::size_t k = uniform_size(1, d, rng);
        const std::size_t batch = uniform_size(1, 5, rng);
        const Matrix basis = random_orthogonal(d, rng);
        Matrix w(k, d);
        for (std::size_t i = 0; i < k; ++i) std::copy(basis.row(i).begin(), basis.row(i).end(), w.row(i).begin());
        const Matrix o = random_orthogonal(k, rng);
        // Columns of Wᵀ mixed by O: rows of Oᵀ·W.
        const Matrix mixed = o.transpose() * w;
        const Matrix e = gaussian(batch, d, rng);

        const auto value = [&](const Matrix& dirs) {
            ad::Tape t;
            GsTapeOutput gs;
            gs.valid = Matrix(batch, k, 1.0);
            for (std::size_t i = 0; i < k; ++i) {
                Matrix rows(batch, d);
                for (std::size_t b = 0; b < batch; ++b)
                    std::copy(dirs.row(i).begin(), dirs.row(i).end(), rows.row(b).begin());
                gs.w.push_back(t.constant(std::move(rows)));
            }
            return loss_pc(gs, t.constant(e), false).scalar();
        };
        worst = std::max(worst, std::abs(value(w) - value(mixed)));
    }
    return worst;
}

namespace {

// Closed-form 2×2 helpers, kept apart from the library's eigen-based paths.
struct Sym2 {
    double a, b, c;  // [[a, b], [b, c]]
    double det() const { return a * c - b * b; }
    double quad(double x, double y) const {
        const double d = det();
        return (c * x * x - 2.0 * b * x * y + a * y * y) / d;
    }
};

}  // namespace

double quadrature_moment_error(std::size_t points, std::uint64_t seed, std::size_t grid) {
    const auto [mix, noise] = make_toy_2d(seed);
    std::mt19937_64 rng(seed + 1);
    const Dataset ds = sample_dataset(mix, noise, points, rng);
    const double s2 = noise.sigma * noise.sigma;

    std::vector<Sym2> covs;
    for (const Matrix& c : mix.covariances) covs.push_back({c(0, 0), c(0, 1), c(1, 1)});

    double worst = 0.0;
    for (std::size_t p = 0; p < points; ++p) {
        const double y0 = ds.y(p, 0), y1 = ds.y(p, 1);

        // Box covering every component's conditioned Gaussian to ±8 std.
        double lo0 = 1e300, hi0 = -1e300, lo1 = 1e300, hi1 = -1e300;
        for (std::size_t l = 0; l < covs.size(); ++l) {
            const Sym2& s = covs[l];
            const Sym2 m{s.a + s2, s.b, s.c + s2};
            const double md = m.det();
            // Σ(Σ+σ²I)⁻¹
            const double g00 = (s.a * m.c - s.b * m.b) / md, g01 = (-s.a * m.b + s.b * m.a) / md;
            const double g10 = (s.b * m.c - s.c * m.b) / md, g11 = (-s.b * m.b + s.c * m.a) / md;
            const double r0 = y0 - mix.means[l][0], r1 = y1 - mix.means[l][1];
            const double mu0 = mix.means[l][0] + g00 * r0 + g01 * r1;
            const double mu1 = mix.means[l][1] + g10 * r0 + g11 * r1;
            const double v0 = s.a - (g00 * s.a + g01 * s.b);
            const double v1 = s.c - (g10 * s.b + g11 * s.c);
            lo0 = std::min(lo0, mu0 - 8.0 * std::sqrt(v0));
            hi0 = std::max(hi0, mu0 + 8.0 * std::sqrt(v0));
            lo1 = std::min(lo1, mu1 - 8.0 * std::sqrt(v1));
            hi1 = std::max(hi1, mu1 + 8.0 * std::sqrt(v1));
        }
        const double h0 = (hi0 - lo0) / static_cast<double>(grid);
        const double h1 = (hi1 - lo1) / static_cast<double>(grid);

        std::vector<double> logp(grid * grid);
        double peak = -1e300;
        for (std::size_t i = 0; i < grid; ++i) {
            const double x0 = lo0 + (static_cast<double>(i) + 0.5) * h0;
            for (std::size_t j = 0; j < grid; ++j) {
                const double x1 = lo1 + (static_cast<double>(j) + 0.5) * h1;
                double prior = 0.0;
                for (std::size_t l = 0; l < covs.size(); ++l) {
                    const double q = covs[l].quad(x0 - mix.means[l][0], x1 - mix.means[l][1]);
                    prior += mix.weights[l] * std::exp(-0.5 * q) /
                             (2.0 * std::numbers::pi * std::sqrt(covs[l].det()));
                }
                const double lik = -((y0 - x0) * (y0 - x0) + (y1 - x1) * (y1 - x1)) / (2.0 * s2);
                const double v = std::log(prior) + lik;
                logp[i * grid + j] = v;
                peak = std::max(peak, v);
            }
        }
        double z = 0, m0 = 0, m1 = 0;
        for (std::size_t i = 0; i < grid; ++i) {
            const double x0 = lo0 + (static_cast<double>(i) + 0.5) * h0;
            for (std::size_t j = 0; j < grid; ++j) {
                const double x1 = lo1 + (static_cast<double>(j) + 0.5) * h1;
                const double w = std::exp(logp[i * grid + j] - peak);
                z += w;
                m0 += w * x0;
                m1 += w * x1;
            }
        }
        m0 /= z;
        m1 /= z;
        double c00 = 0, c01 = 0, c11 = 0;
        for (std::size_t i = 0; i < grid; ++i) {
            const double x0 = lo0 + (static_cast<double>(i) + 0.5) * h0 - m0;
            for (std::size_t j = 0; j < grid; ++j) {
                const double x1 = lo1 + (static_cast<double>(j) + 0.5) * h1 - m1;
                const double w = std::exp(logp[i * grid + j] - peak);
                c00 += w * x0 * x0;
                c01 += w * x0 * x1;
                c11 += w * x1 * x1;
            }
        }
        c00 /= z;
        c01 /= z;
        c11 /= z;

        const GaussianMoments got = posterior_moments(mix, noise, ds.y.row(p));
        const double mean_scale = std::max(std::hypot(m0, m1), std::sqrt(c00 + c11));
        const double mean_err = std::hypot(got.mean[0] - m0, got.mean[1] - m1) / mean_scale;
        const double cov_norm = std::sqrt(c00 * c00 + 2 * c01 * c01 + c11 * c11);
        const double d00 = got.covariance(0, 0) - c00, d01 = got.covariance(0, 1) - c01,
                     d11 = got.covariance(1, 1) - c11;
        const double cov_err = std::sqrt(d00 * d00 + 2 * d01 * d01 + d11 * d11) / cov_norm;
        worst = std::max({worst, mean_err, cov_err});
    }
    return worst;
}

}  // namespace nppc::checks
