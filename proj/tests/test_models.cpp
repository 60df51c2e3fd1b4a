#include <random>

#include <gtest/gtest.h>

#include "nppc/errors.hpp"
#include "nppc/models.hpp"

namespace {

using nppc::Matrix;
using nppc::Vector;
namespace ad = nppc::ad;

TEST(Mlp, ZeroParametersGiveZeroOutput) {
    ad::ParamStore p;
    std::mt19937_64 rng(0);
    const nppc::MlpConfig cfg{.input_dim = 3, .hidden_width = 5, .depth = 3, .slope = 0.1, .output_dim = 2};
    const auto mlp = nppc::Mlp::create(cfg, "m", p, rng);
    for (std::size_t i = 0; i < p.size(); ++i) p.value(i) = Matrix(p.value(i).rows(), p.value(i).cols(), 0.0);
    ad::Tape t;
    const auto out = nppc::mlp_forward(mlp, p, t.constant(Matrix::from_rows({{1, -2, 3}})), t);
    EXPECT_EQ(out.value(), Matrix(1, 2, 0.0));
}

TEST(Mlp, TwoLayerHandValue) {
    ad::ParamStore p;
    std::mt19937_64 rng(0);
    const nppc::MlpConfig cfg{.input_dim = 2, .hidden_width = 2, .depth = 2, .slope = 0.1, .output_dim = 2};
    const auto mlp = nppc::Mlp::create(cfg, "m", p, rng);
    p.value(p.index(mlp.weight_name(0))) = Matrix::from_rows({{1, 2}, {3, 4}});
    p.value(p.index(mlp.bias_name(0))) = Matrix::from_rows({{-1, 1}});
    p.value(p.index(mlp.weight_name(1))) = Matrix::from_rows({{1, 0}, {1, 1}});
    p.value(p.index(mlp.bias_name(1))) = Matrix::from_rows({{0, 0.5}});
    ad::Tape t;
    // (1,-1) -> (-3,-1) before the activation, (-0.3,-0.1) after, then mixed.
    const auto out = nppc::mlp_forward(mlp, p, t.constant(Matrix::from_rows({{1, -1}})), t);
    EXPECT_NEAR(out.value()(0, 0), -0.4, 1e-15);
    EXPECT_NEAR(out.value()(0, 1), 0.4, 1e-15);
}

TEST(Mlp, SingleLayerRejected) {
    ad::ParamStore p;
    std::mt19937_64 rng(0);
    const nppc::MlpConfig cfg{.input_dim = 2, .hidden_width = 4, .depth = 1, .slope = 0.1, .output_dim = 2};
    EXPECT_THROW(nppc::Mlp::create(cfg, "m", p, rng), nppc::InvalidConfig);
}

TEST(Mlp, MatchesStraightLineArithmetic) {
    ad::ParamStore p;
    std::mt19937_64 rng(17);
    const nppc::MlpConfig cfg{.input_dim = 3, .hidden_width = 7, .depth = 3, .slope = 0.2, .output_dim = 2};
    const auto mlp = nppc::Mlp::create(cfg, "m", p, rng);
    const Vector in{0.4, -1.1, 2.2};

    Vector h = in;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const Matrix& w = p.value(p.index(mlp.weight_name(l)));
        const Matrix& b = p.value(p.index(mlp.bias_name(l)));
        Vector next(w.cols(), 0.0);
        for (std::size_t j = 0; j < w.cols(); ++j) {
            double acc = b(0, j);
            for (std::size_t i = 0; i < w.rows(); ++i) acc += h[i] * w(i, j);
            next[j] = (l + 1 < cfg.depth && acc < 0) ? cfg.slope * acc : acc;
        }
        h = next;
    }
    ad::Tape t;
    const auto out = nppc::mlp_forward(mlp, p, t.constant(Matrix(1, 3, in)), t);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out.value()(0, j), h[j], 1e-13);
}

TEST(Mlp, WrongInputWidth) {
    ad::ParamStore p;
    std::mt19937_64 rng(0);
    const nppc::MlpConfig cfg{.input_dim = 3, .hidden_width = 4, .depth = 2, .slope = 0.1, .output_dim = 1};
    const auto mlp = nppc::Mlp::create(cfg, "m", p, rng);
    ad::Tape t;
    EXPECT_THROW(nppc::mlp_forward(mlp, p, t.constant(Matrix(1, 2)), t), nppc::ShapeMismatch);
}

TEST(MeanModel, ZeroWeightsPredictBias) {
    const nppc::MlpConfig cfg{.input_dim = 2, .hidden_width = 4, .depth = 2, .slope = 0.1, .output_dim = 2};
    auto m = nppc::MeanModel::create(cfg, 1);
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        auto& v = m.params.value(i);
        v = Matrix(v.rows(), v.cols(), 0.0);
    }
    m.params.value(m.params.index(m.mlp.bias_name(1))) = Matrix::from_rows({{0.25, -3}});
    const Vector y{5, 6};
    const Vector xhat = nppc::mean_predict(m, y);
    EXPECT_EQ(xhat, (Vector{0.25, -3}));
}

TEST(GramSchmidtLayer, SingleDirection) {
    ad::Tape t;
    const auto raw = t.constant(Matrix::from_rows({{3, 4}, {0, 2}}));
    const auto out = nppc::gram_schmidt_layer(t, {raw});
    EXPECT_EQ(out.w[0].value(), Matrix::from_rows({{0.6, 0.8}, {0, 1}}));
    EXPECT_EQ(out.sigma2[0].value(), Matrix::from_rows({{25}, {4}}));
}

TEST(GramSchmidtLayer, MatchesLinalgGramSchmidt) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0, 1);
    Matrix d(3, 4);
    for (auto& v : d.data()) v = n(rng);
    ad::Tape t;
    std::vector<ad::Var> raw;
    for (std::size_t k = 0; k < 3; ++k) raw.push_back(t.constant(Matrix(1, 4, d.row_vector(k))));
    const auto out = nppc::gram_schmidt_layer(t, raw);
    const auto ref = nppc::gram_schmidt(d);
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.w[k].value()(0, j), ref.directions(k, j), 1e-14);
        EXPECT_NEAR(out.sigma2[k].value()(0, 0), ref.residual_norms[k] * ref.residual_norms[k], 1e-12);
    }
    EXPECT_EQ(out.degenerate_events, 0u);
}

TEST(GramSchmidtLayer, CollapsedSampleIsMarkedInvalid) {
    ad::Tape t;
    const auto d1 = t.constant(Matrix::from_rows({{1, 0}, {1, 0}}));
    const auto d2 = t.constant(Matrix::from_rows({{2, 0}, {0, 1}}));
    const auto out = nppc::gram_schmidt_layer(t, {d1, d2});
    EXPECT_EQ(out.valid(0, 1), 0.0);
    EXPECT_EQ(out.valid(1, 1), 1.0);
    EXPECT_EQ(out.degenerate_events, 1u);
}

TEST(NppcPredict, OutputsAreOrthonormal) {
    const nppc::NppcHeadConfig head{.k = 2, .dx = 3, .dy = 3, .include_mean_input = true};
    const nppc::MlpConfig shape{.input_dim = 0, .hidden_width = 16, .depth = 3, .slope = 0.1, .output_dim = 0};
    const auto model = nppc::NppcModel::create(head, shape, 9);
    const Matrix ys = Matrix::from_rows({{1, 2, 3}, {-1, 0, 2}});
    const auto outs = nppc::nppc_predict(model, ys, ys);
    ASSERT_EQ(outs.size(), 2u);
    for (const auto& o : outs) {
        EXPECT_LT(nppc::orthonormality_defect(o.w), 1e-13);
        const auto gs = nppc::gram_schmidt(o.raw_dirs);
        for (std::size_t k = 0; k < 2; ++k)
            EXPECT_NEAR(o.sigma2[k], gs.residual_norms[k] * gs.residual_norms[k], 1e-10);
    }
}

TEST(HeadConfig, Validation) {
    EXPECT_THROW((nppc::NppcHeadConfig{.k = 4, .dx = 3, .dy = 3}.validate()), nppc::InvalidConfig);
    EXPECT_THROW((nppc::NppcHeadConfig{.k = 0, .dx = 3, .dy = 3}.validate()), nppc::InvalidConfig);
}

}  // namespace
