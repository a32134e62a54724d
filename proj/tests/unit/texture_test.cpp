#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include <Eigen/QR>
#include <gtest/gtest.h>

#include "corestack/texture/backbone.hpp"
#include "corestack/texture/math.hpp"
#include "corestack/texture/model.hpp"
#include "test_util.hpp"

using namespace corestack;
using namespace corestack::texture;

namespace {

using MatD = Mat<double>;
using VecD = Vec<double>;

MatD random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
    MatD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
    return m;
}

VecD random_vec(Eigen::Index n, Rng& rng, double sd = 1.0) {
    VecD v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal(0.0, sd);
    return v;
}

std::vector<Eigen::Index> random_permutation(Eigen::Index n, Rng& rng) {
    std::vector<Eigen::Index> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), Eigen::Index{0});
    rng.shuffle(std::span<Eigen::Index>(p));
    return p;
}

MatD permute_rows(const MatD& m, const std::vector<Eigen::Index>& p) {
    MatD out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(p[static_cast<std::size_t>(i)]);
    return out;
}

constexpr double kStep = 1e-3;
constexpr double kGradTol = 1e-3;

/// Max over entries of |a - n| / max(|a|, |n|, floor), floor = 1e-3 * max|n| over the
/// tensor: an entry far below the tensor's scale is judged against that scale.
double check_gradient(Eigen::Ref<MatD> x, const std::function<double()>& f, const MatD& analytic) {
    MatD numeric(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double keep = x(i, j);
            x(i, j) = keep + kStep;
            const double up = f();
            x(i, j) = keep - kStep;
            const double down = f();
            x(i, j) = keep;
            numeric(i, j) = (up - down) / (2 * kStep);
        }
    const double floor = std::max(1e-3 * numeric.cwiseAbs().maxCoeff(), 1e-12);
    double worst = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double a = analytic(i, j), n = numeric(i, j);
            worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
        }
    return worst;
}

// ---------------------------------------------------------------- oracles

/// Direct per-codeword loops, no matrix algebra.
MatD encode_oracle(const MatD& X, const MatD& C, const VecD& s) {
    const auto N = X.rows(), K = C.rows(), D = X.cols();
    MatD out = MatD::Zero(K, D);
    for (Eigen::Index i = 0; i < N; ++i) {
        std::vector<double> logit(static_cast<std::size_t>(K));
        for (Eigen::Index k = 0; k < K; ++k) {
            double d2 = 0;
            for (Eigen::Index j = 0; j < D; ++j) d2 += (X(i, j) - C(k, j)) * (X(i, j) - C(k, j));
            logit[static_cast<std::size_t>(k)] = -s(k) * d2;
        }
        double z = 0;
        for (double v : logit) z += std::exp(v);
        for (Eigen::Index k = 0; k < K; ++k) {
            const double wik = std::exp(logit[static_cast<std::size_t>(k)]) / z;
            for (Eigen::Index j = 0; j < D; ++j) out(k, j) += wik * (X(i, j) - C(k, j));
        }
    }
    for (Eigen::Index k = 0; k < K; ++k) {
        double n = 0;
        for (Eigen::Index j = 0; j < D; ++j) n += out(k, j) * out(k, j);
        n = std::sqrt(n);
        if (n > 0)
            for (Eigen::Index j = 0; j < D; ++j) out(k, j) /= n;
    }
    return out;
}

VecD residual_pool_oracle(const MatD& F, const MatD& T, const VecD& b) {
    const auto N = F.rows(), C = F.cols();
    VecD acc = VecD::Zero(C);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index c = 0; c < C; ++c) {
            double t = b(c);
            for (Eigen::Index k = 0; k < C; ++k) t += T(c, k) * F(i, k);
            acc(c) += std::max(0.0, t - F(i, c)) / static_cast<double>(N);
        }
    const double n = acc.norm();
    return n > 0 ? VecD(acc / n) : acc;
}

/// Residual-pool instance with every residual at least `margin` away from the rectifier kink.
struct RpInstance {
    MatD F, T;
    VecD b;
};

RpInstance rp_instance(Rng& rng, Eigen::Index N, Eigen::Index C, double margin) {
    for (;;) {
        RpInstance in{random_mat(N, C, rng), random_mat(C, C, rng, 0.5), random_vec(C, rng, 0.5)};
        MatD diff = in.F * in.T.transpose();
        diff.rowwise() += in.b.transpose();
        diff -= in.F;
        if (diff.cwiseAbs().minCoeff() > margin && (diff.array() > 0).any()) return in;
    }
}

// ---------------------------------------------------------------- model fixtures

ImageU8 textured_strip(int rows, int cols, int kind, Rng& rng) {
    ImageU8 img(rows, cols, 3);
    const double period = 6.0 + 5.0 * kind;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double v = 120 + 60 * std::sin(2 * M_PI * (kind % 2 ? r : c) / period) + rng.normal(0, 8);
            for (int k = 0; k < 3; ++k)
                img(r, c, k) = static_cast<std::uint8_t>(std::clamp(v + 20 * ((kind + k) % 3), 0.0, 255.0));
        }
    return img;
}

/// Tiny manifest: `per_image` strips over `images` images, classes cycling 1..3 by image.
struct SmallCorpus {
    data::DatasetManifest manifest;
    std::shared_ptr<std::map<std::string, ImageU8>> images = std::make_shared<std::map<std::string, ImageU8>>();
};

SmallCorpus small_corpus(int images, int per_image, std::uint64_t seed) {
    SmallCorpus sc;
    sc.manifest.scheme = data::SchemeName::nine_class;
    Rng rng(seed);
    const int H = 100 + 20 * (per_image - 1);
    for (int i = 0; i < images; ++i) {
        const std::string id = "img" + std::to_string(i);
        const int cls = 1 + i % 3;
        (*sc.images)[id] = textured_strip(H, 60, cls, rng);
        for (int k = 0; k < per_image; ++k) {
            data::PatchRecord r;
            r.patch_id = id + "_" + std::to_string(k);
            r.image_id = id;
            r.well_id = "w" + std::to_string(i % 2);
            r.y_offset = 20 * k;
            r.width = 60;
            r.class_id = cls;
            r.split = (k % 5 == 4) ? data::Split::val : data::Split::train;
            sc.manifest.records.push_back(r);
        }
    }
    return sc;
}

TextureConfig tiny_dep() {
    TextureConfig c;
    c.head = Head::dep;
    c.reduce_dim = 8;
    c.codewords = 3;
    c.encode_dim = 4;
    c.gap_dim = 5;
    return c;
}

}  // namespace

// ---------------------------------------------------------------- encode

TEST(Encode, SingleDescriptorAtCodewordIsZero) {
    MatD X(1, 4);
    X << 0.5, -1, 2, 3;
    const MatD out = encode<double>(X, X, VecD::Constant(1, 0.7));
    EXPECT_EQ(out.rows(), 1);
    EXPECT_EQ(out.norm(), 0.0);
}

TEST(Encode, SingleCodewordSumsResiduals) {
    Rng rng(3);
    const MatD X = random_mat(6, 4, rng), C = random_mat(1, 4, rng);
    const MatD W = assignment_weights<double>(X, C, VecD::Constant(1, 2.0));
    for (Eigen::Index i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(W(i, 0), 1.0);
    VecD sum = VecD::Zero(4);
    for (Eigen::Index i = 0; i < 6; ++i) sum += (X.row(i) - C.row(0)).transpose();
    EncodeCache<double> cache;
    const MatD out = encode<double>(X, C, VecD::Constant(1, 2.0), &cache);
    for (Eigen::Index j = 0; j < 4; ++j) {
        EXPECT_NEAR(cache.E(0, j), sum(j), 1e-12);
        EXPECT_NEAR(out(0, j), sum(j) / sum.norm(), 1e-12);
    }
}

TEST(Encode, MatchesLoopOracle) {
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
        const MatD X = random_mat(5, 4, rng), C = random_mat(3, 4, rng);
        VecD s(3);
        for (int k = 0; k < 3; ++k) s(k) = rng.uniform(0.05, 2.0);
        const MatD got = encode<double>(X, C, s), want = encode_oracle(X, C, s);
        ASSERT_LE((got - want).cwiseAbs().maxCoeff(), 1e-9) << "instance " << t;
    }
}

TEST(Encode, DimensionMismatchThrows) {
    Rng rng(1);
    EXPECT_THROW(encode<double>(random_mat(3, 4, rng), random_mat(2, 5, rng), VecD::Ones(2)), PreconditionError);
    EXPECT_THROW(encode<double>(random_mat(3, 4, rng), random_mat(2, 4, rng), VecD::Ones(3)), PreconditionError);
}

TEST(Encode, VanishingSmoothingGivesUniformWeights) {
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
        const MatD X = random_mat(7, 5, rng), C = random_mat(4, 5, rng);
        const MatD W = assignment_weights<double>(X, C, VecD::Constant(4, 1e-8));
        ASSERT_LE((W.array() - 0.25).abs().maxCoeff(), 1e-6);
    }
}

TEST(Encode, RotationLeavesAssignmentsUnchanged) {
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        const MatD X = random_mat(6, 5, rng), C = random_mat(3, 5, rng);
        VecD s(3);
        for (int k = 0; k < 3; ++k) s(k) = rng.uniform(0.1, 1.0);
        const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd(random_mat(5, 5, rng))).householderQ();
        const MatD Xr = X * Q.transpose(), Cr = C * Q.transpose();
        const MatD W = assignment_weights<double>(X, C, s), Wr = assignment_weights<double>(Xr, Cr, s);
        ASSERT_LE((W - Wr).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(Encode, GradientsMatchCentralDifferences) {
    Rng rng(11);
    for (int t = 0; t < 20; ++t) {
        MatD X = random_mat(5, 4, rng), C = random_mat(3, 4, rng);
        MatD s(3, 1);
        for (int k = 0; k < 3; ++k) s(k, 0) = rng.uniform(0.1, 0.8);
        const MatD G = random_mat(3, 4, rng);
        auto loss = [&] { return (encode<double>(X, C, VecD(s.col(0))).array() * G.array()).sum(); };
        EncodeCache<double> cache;
        encode<double>(X, C, VecD(s.col(0)), &cache);
        const auto g = encode_backward<double>(X, C, VecD(s.col(0)), cache, G);
        EXPECT_LE(check_gradient(X, loss, g.dX), kGradTol) << "dX, instance " << t;
        EXPECT_LE(check_gradient(C, loss, g.dC), kGradTol) << "dC, instance " << t;
        EXPECT_LE(check_gradient(s, loss, MatD(g.ds)), kGradTol) << "ds, instance " << t;
    }
}

TEST(Encode, PermutationInvariant) {
    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
        const MatD X = random_mat(9, 4, rng), C = random_mat(3, 4, rng);
        const VecD s = VecD::Constant(3, rng.uniform(0.1, 1.0));
        const MatD a = encode<double>(X, C, s), b = encode<double>(permute_rows(X, random_permutation(9, rng)), C, s);
        ASSERT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12);
    }
}

// ---------------------------------------------------------------- residual pooling

TEST(ResidualPool, IdentityTransferGivesZero) {
    Rng rng(2);
    const MatD F = random_mat(49, 6, rng);
    const VecD out = residual_pool<double>(F, MatD::Identity(6, 6), VecD::Zero(6));
    EXPECT_EQ(out.size(), 6);
    EXPECT_EQ(out.norm(), 0.0);
}

TEST(ResidualPool, MatchesLoopOracle) {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        const MatD F = random_mat(7, 5, rng), T = random_mat(5, 5, rng);
        const VecD b = random_vec(5, rng);
        ASSERT_LE((residual_pool<double>(F, T, b) - residual_pool_oracle(F, T, b)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(ResidualPool, RectifyAfterMean) {
    MatD F(2, 1);
    F << 1, -3;
    // diff = f, mean = -1: rectified after the mean it vanishes, per position it does not.
    EXPECT_EQ(residual_pool<double>(F, MatD::Constant(1, 1, 2.0), VecD::Zero(1), nullptr, Rectify::after_mean).norm(), 0.0);
    EXPECT_DOUBLE_EQ(residual_pool<double>(F, MatD::Constant(1, 1, 2.0), VecD::Zero(1))(0), 1.0);
}

TEST(ResidualPool, ShapeErrors) {
    Rng rng(1);
    EXPECT_THROW(residual_pool<double>(random_mat(3, 4, rng), random_mat(4, 3, rng), VecD::Zero(4)), PreconditionError);
}

TEST(ResidualPool, GradientsMatchCentralDifferences) {
    Rng rng(13);
    for (auto mode : {Rectify::per_position, Rectify::after_mean}) {
        for (int t = 0; t < 20; ++t) {
            auto in = rp_instance(rng, 4, 3, 0.05);
            MatD b = in.b;
            const VecD G = random_vec(3, rng);
            auto loss = [&] { return residual_pool<double>(in.F, in.T, VecD(b.col(0)), nullptr, mode).dot(G); };
            ResidualPoolCache<double> cache;
            residual_pool<double>(in.F, in.T, VecD(b.col(0)), &cache, mode);
            if (mode == Rectify::after_mean && (cache.raw_mean.cwiseAbs().array() < 0.05).any()) continue;
            const auto g = residual_pool_backward<double>(in.F, in.T, cache, G, mode);
            EXPECT_LE(check_gradient(in.T, loss, g.dT), kGradTol) << "dT, instance " << t;
            EXPECT_LE(check_gradient(b, loss, MatD(g.db)), kGradTol) << "db, instance " << t;
            EXPECT_LE(check_gradient(in.F, loss, g.dF), kGradTol) << "dF, instance " << t;
        }
    }
}

TEST(ResidualPool, PermutationInvariant) {
    Rng rng(14);
    for (int t = 0; t < 100; ++t) {
        const MatD F = random_mat(49, 6, rng), T = random_mat(6, 6, rng);
        const VecD b = random_vec(6, rng);
        const VecD a = residual_pool<double>(F, T, b), p = residual_pool<double>(permute_rows(F, random_permutation(49, rng)), T, b);
        ASSERT_LE((a - p).cwiseAbs().maxCoeff(), 1e-12);
    }
}

// ---------------------------------------------------------------- global average pooling

TEST(GlobalAveragePool, ConstantMapGivesReduction) {
    Rng rng(6);
    const VecD f = random_vec(5, rng), b = random_vec(3, rng);
    const MatD R = random_mat(3, 5, rng);
    const MatD F = f.transpose().replicate(49, 1);
    EXPECT_LE((global_average_pool<double>(F, R, b) - (R * f + b)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GlobalAveragePool, MatchesDirectMean) {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const MatD F = random_mat(10, 4, rng), R = random_mat(3, 4, rng);
        const VecD b = random_vec(3, rng);
        VecD want = b;
        for (Eigen::Index i = 0; i < 10; ++i) want += R * F.row(i).transpose() / 10.0;
        ASSERT_LE((global_average_pool<double>(F, R, b) - want).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(GlobalAveragePool, GradientsAndPermutation) {
    Rng rng(15);
    for (int t = 0; t < 100; ++t) {
        MatD F = random_mat(6, 4, rng), R = random_mat(3, 4, rng);
        const VecD b = random_vec(3, rng), G = random_vec(3, rng);
        const VecD p = global_average_pool<double>(permute_rows(F, random_permutation(6, rng)), R, b);
        ASSERT_LE((global_average_pool<double>(F, R, b) - p).cwiseAbs().maxCoeff(), 1e-12);
        if (t >= 10) continue;
        auto loss = [&] { return global_average_pool<double>(F, R, b).dot(G); };
        const auto g = global_average_pool_backward<double>(F, R, G);
        EXPECT_LE(check_gradient(R, loss, g.dR), kGradTol);
        EXPECT_LE(check_gradient(F, loss, g.dF), kGradTol);
    }
}

// ---------------------------------------------------------------- bilinear

TEST(Bilinear, BasisVectors) {
    const VecD a = VecD::Unit(4, 2), b = VecD::Unit(5, 3);
    const VecD out = bilinear_combine(a, b);
    ASSERT_EQ(out.size(), 20);
    for (Eigen::Index i = 0; i < 20; ++i) EXPECT_EQ(out(i), i == 2 * 5 + 3 ? 1.0 : 0.0);
}

TEST(Bilinear, FrobeniusNormIdentityAndOracle) {
    Rng rng(16);
    for (int t = 0; t < 100; ++t) {
        const VecD a = random_vec(1 + t % 6, rng), b = random_vec(1 + (t / 6) % 5, rng);
        const VecD out = bilinear_combine(a, b);
        ASSERT_NEAR(out.norm(), a.norm() * b.norm(), 1e-12 * (1 + a.norm() * b.norm()));
        for (Eigen::Index i = 0; i < a.size(); ++i)
            for (Eigen::Index j = 0; j < b.size(); ++j) ASSERT_EQ(out(i * b.size() + j), a(i) * b(j));
    }
}

TEST(Bilinear, GradientsMatchCentralDifferences) {
    Rng rng(17);
    for (int t = 0; t < 20; ++t) {
        MatD a = random_vec(4, rng), b = random_vec(3, rng);
        const VecD G = random_vec(12, rng);
        auto loss = [&] { return bilinear_combine<double>(a.col(0), b.col(0)).dot(G); };
        const auto [da, db] = bilinear_combine_backward<double>(a.col(0), b.col(0), G);
        EXPECT_LE(check_gradient(a, loss, MatD(da)), kGradTol);
        EXPECT_LE(check_gradient(b, loss, MatD(db)), kGradTol);
    }
}

TEST(Normalization, SignedSqrtAndL2Gradients) {
    Rng rng(18);
    for (int t = 0; t < 20; ++t) {
        // Kept 0.5 away from the square-root singularity, where a 1e-3 step is not small.
        MatD x = random_vec(6, rng).unaryExpr([](double v) { return v < 0 ? v - 0.5 : v + 0.5; });
        const VecD G = random_vec(6, rng);
        auto loss = [&] { return l2_normalize<double>(signed_sqrt<double>(x.col(0))).dot(G); };
        const VecD xs = signed_sqrt<double>(x.col(0));
        const VecD g = signed_sqrt_backward<double>(x.col(0), l2_normalize_backward<double>(xs, G));
        EXPECT_LE(check_gradient(x, loss, MatD(g)), kGradTol);
    }
    EXPECT_EQ(l2_normalize<double>(VecD::Zero(3)).norm(), 0.0);
    EXPECT_EQ(signed_sqrt<double>(VecD::Zero(2)).norm(), 0.0);
}

// ---------------------------------------------------------------- backbone

TEST(Backbone, ShapeAndFinite) {
    Rng rng(19);
    ImageU8 img(kInputSize, kInputSize, 3);
    for (auto& v : img.pixels()) v = static_cast<std::uint8_t>(rng.below(256));
    const auto bb = Backbone::init(0x5EED);
    const auto F = backbone_features(bb, img);
    EXPECT_EQ(F.rows(), 49);
    EXPECT_EQ(F.cols(), 2048);
    EXPECT_TRUE(F.allFinite());
    EXPECT_TRUE(backbone_features(bb, ImageU8(kInputSize, kInputSize, 3)).allFinite());
}

TEST(Backbone, DeterministicAndSizeChecked) {
    Rng rng(20);
    const ImageU8 img = textured_strip(kInputSize, kInputSize, 2, rng);
    const auto bb = Backbone::init(7);
    EXPECT_EQ(backbone_features(bb, img), backbone_features(Backbone::init(7), img));
    EXPECT_THROW(filter_features(ImageU8(100, 224, 3)), PreconditionError);
    EXPECT_THROW(filter_features(ImageU8(224, 224, 1)), PreconditionError);
}

TEST(Backbone, PrepareStripResizesAnisotropically) {
    const auto out = prepare_strip(ImageU8(100, 300, 3, 77));
    EXPECT_EQ(out.rows(), kInputSize);
    EXPECT_EQ(out.cols(), kInputSize);
    for (auto v : out.pixels()) ASSERT_EQ(v, 77);
    EXPECT_THROW(prepare_strip(ImageU8(0, 10, 3)), PreconditionError);
}

// ---------------------------------------------------------------- model

namespace {

/// Finite-difference check of TextureClassifier::backward on a few coordinates of each parameter.
void check_model_gradient(TextureConfig cfg) {
    TextureClassifier model(cfg);
    Rng rng(21);
    const Mat<float> F0 = filter_features(textured_strip(kInputSize, kInputSize, 1, rng));
    const int label = 2;
    auto loss = [&] { return -std::log(softmax(model.logits(F0))[label]); };
    TextureTrace trace;
    const auto p = softmax(model.logits(F0, &trace));
    Vec<float> d(static_cast<Eigen::Index>(p.size()));
    for (std::size_t c = 0; c < p.size(); ++c) d(static_cast<Eigen::Index>(c)) = static_cast<float>(p[c]);
    d(label) -= 1.0f;
    model.zero_grad();
    model.backward(trace, d);
    model.export_grads(1.0f);
    for (auto& np : model.named_params()) {
        if (!np.param->trainable) continue;
        auto& vals = np.param->value.data;
        // Largest-gradient coordinates: small ones drown in float rounding.
        std::vector<std::size_t> idx(vals.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const auto& g = np.param->grad.data;
        std::partial_sort(idx.begin(), idx.begin() + std::min<std::size_t>(3, idx.size()), idx.end(),
                          [&](auto x, auto y) { return std::abs(g[x]) > std::abs(g[y]); });
        for (std::size_t k = 0; k < std::min<std::size_t>(3, idx.size()); ++k) {
            const auto i = idx[k];
            const float keep = vals[i], h = 1e-3f * std::max(1.0f, std::abs(keep));
            vals[i] = keep + h;
            model.import_params();
            const double up = loss();
            vals[i] = keep - h;
            model.import_params();
            const double down = loss();
            vals[i] = keep;
            model.import_params();
            const double num = (up - down) / (2 * h);
            EXPECT_NEAR(g[i], num, 0.05 * std::max(std::abs(num), 1e-3)) << np.name << "[" << i << "]";
        }
    }
}

}  // namespace

TEST(TextureModel, DepBackwardMatchesFiniteDifferences) {
    auto cfg = tiny_dep();
    cfg.fine_tune = true;
    check_model_gradient(cfg);
}

TEST(TextureModel, DrpBackwardMatchesFiniteDifferences) {
    TextureConfig cfg;
    cfg.head = Head::drp;
    cfg.fine_tune = true;
    check_model_gradient(cfg);
}

TEST(TextureModel, FrozenBackboneByDefault) {
    TextureClassifier model(tiny_dep());
    for (auto& np : model.named_params())
        EXPECT_EQ(np.param->trainable, np.name.rfind("backbone.", 0) != 0) << np.name;
    EXPECT_EQ(model.parameter("classifier.weight").rows(), 9);
    EXPECT_EQ(model.parameter("classifier.weight").cols(), 20);
    TextureClassifier drp(TextureConfig{.head = Head::drp, .scheme = data::SchemeName::six_class});
    EXPECT_EQ(drp.num_classes(), 6);
    EXPECT_EQ(drp.parameter("drp.transfer").rows(), 2048);
}

TEST(TextureModel, ClassifyIsADistribution) {
    Rng rng(22);
    for (auto head : {Head::drp, Head::dep}) {
        TextureConfig cfg = tiny_dep();
        cfg.head = head;
        const TextureClassifier model(cfg);
        for (int t = 0; t < 5; ++t) {
            ImageU8 strip(100, 40 + 30 * t, 3);
            for (auto& v : strip.pixels()) v = static_cast<std::uint8_t>(rng.below(256));
            const auto p = classify(model, strip);
            ASSERT_EQ(p.size(), 9u);
            double sum = 0;
            for (double v : p) {
                EXPECT_GE(v, 0.0);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
            EXPECT_EQ(p, classify(model, strip, data::SchemeName::nine_class));
        }
        EXPECT_THROW(classify(model, ImageU8(100, 50, 3), data::SchemeName::six_class), ValidationError);
    }
}

TEST(TextureModel, ConfigJsonRoundTrip) {
    TextureConfig c = tiny_dep();
    c.drp_rectify = Rectify::after_mean;
    c.fine_tune = true;
    const auto back = nlohmann::json(c).get<TextureConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
    EXPECT_THROW(nlohmann::json({{"head", "vgg"}}).get<TextureConfig>(), ValidationError);
    EXPECT_THROW(nlohmann::json({{"codewords", 0}}).get<TextureConfig>(), ValidationError);
}

TEST(TextureTraining, SmokeRunAndCheckpointRoundTrip) {
    auto sc = small_corpus(20, 5, 1);  // 100 strips
    ASSERT_EQ(sc.manifest.records.size(), 100u);
    TextureClassifier model(tiny_dep());
    const auto res = train_texture(model, sc.manifest, memory_loader(sc.images), {.epochs = 1, .batch = 16});
    ASSERT_EQ(res.log.size(), 1u);
    EXPECT_TRUE(std::isfinite(res.log[0].train_loss));
    EXPECT_TRUE(std::isfinite(res.log[0].val_loss));
    EXPECT_EQ(res.best_epoch, 1);

    corestack::testing::TempDir dir;
    model.save(dir.path() / "cls.ckpt");
    const auto back = TextureClassifier::load(dir.path() / "cls.ckpt");
    const auto strip = (*sc.images)["img0"].crop_rows(0, 100);
    EXPECT_EQ(classify(model, strip), classify(back, strip));
    EXPECT_EQ(back.history(), res.log);
    nn::save_checkpoint(dir.path() / "other.ckpt", "corestack.detector", nlohmann::json::object(), {});
    EXPECT_THROW(TextureClassifier::load(dir.path() / "other.ckpt"), ValidationError);
}

TEST(TextureTraining, LearnsSeparableClassesAndKeepsBestEpoch) {
    auto sc = small_corpus(12, 6, 2);
    TextureConfig cfg = tiny_dep();
    cfg.reduce_dim = 16;
    cfg.codewords = 4;
    cfg.encode_dim = cfg.gap_dim = 16;
    TextureClassifier model(cfg);
    std::vector<EpochLog> seen;
    const auto res = train_texture(model, sc.manifest, memory_loader(sc.images),
                                   {.epochs = 8, .batch = 8, .lr = 3e-3f, .on_epoch = [&](const EpochLog& e) { seen.push_back(e); }});
    EXPECT_EQ(seen, res.log);
    const auto best = std::min_element(res.log.begin(), res.log.end(), [](auto& a, auto& b) { return a.val_loss < b.val_loss; });
    EXPECT_EQ(res.best_epoch, best->epoch);
    EXPECT_LT(res.log.back().train_loss, res.log.front().train_loss);
    EXPECT_GE(best->val_accuracy, 0.9);
    // The returned model is the best epoch's.
    std::vector<const data::PatchRecord*> val;
    std::vector<int> labels;
    for (const auto& r : sc.manifest.records)
        if (r.split == data::Split::val) {
            val.push_back(&r);
            labels.push_back(static_cast<int>(model.scheme().index_of(r.class_id)));
        }
    const auto [loss, acc] = evaluate_loss(model, strip_features(val, memory_loader(sc.images)), labels);
    EXPECT_NEAR(loss, best->val_loss, 1e-9);
    EXPECT_DOUBLE_EQ(acc, best->val_accuracy);
}

TEST(TextureTraining, SameSeedSameLog) {
    auto sc = small_corpus(10, 5, 3);
    TextureConfig cfg = tiny_dep();
    cfg.fine_tune = true;
    TextureClassifier a(cfg), b(cfg);
    const TextureTrainConfig tc{.epochs = 2, .batch = 8, .seed = 9};
    const auto ra = train_texture(a, sc.manifest, memory_loader(sc.images), tc);
    const auto rb = train_texture(b, sc.manifest, memory_loader(sc.images), tc);
    EXPECT_EQ(ra.log, rb.log);
}

TEST(TextureTraining, Errors) {
    auto sc = small_corpus(4, 5, 4);
    TextureClassifier model(tiny_dep());
    auto no_val = sc.manifest;
    for (auto& r : no_val.records) r.split = data::Split::train;
    EXPECT_THROW(train_texture(model, no_val, memory_loader(sc.images), {.epochs = 1}), ValidationError);
    auto six = sc.manifest;
    six.scheme = data::SchemeName::six_class;
    EXPECT_THROW(train_texture(model, six, memory_loader(sc.images), {.epochs = 1}), ValidationError);
    EXPECT_THROW(train_texture(model, sc.manifest, memory_loader(sc.images), {.epochs = 0}), ValidationError);
    // Unassigned strips are ignored rather than trained on.
    auto partial = sc.manifest;
    partial.records[0].class_id = data::kUnassignedClass;
    EXPECT_NO_THROW(train_texture(model, partial, memory_loader(sc.images), {.epochs = 1}));
}

TEST(TextureTraining, LossLogCsv) {
    corestack::testing::TempDir dir;
    write_loss_log(dir.path() / "loss.csv", {{1, 2.5, 2.0, 0.1}, {2, 1.5, 1.75, 0.2}});
    std::ifstream in(dir.path() / "loss.csv");
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(ss.str(), "epoch,train_loss,val_loss\n1,2.5,2\n2,1.5,1.75\n");
}
