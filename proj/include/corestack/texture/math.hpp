#pragma once

#include <cmath>
#include <utility>

#include <Eigen/Core>

#include "corestack/common/error.hpp"

// Orderless pooling math shared by the DRP and DEP heads. Descriptor sets are
// N x D matrices (one row per spatial position). Forward functions return a
// cache that the matching backward consumes. Templated on the scalar so
// gradient checks can run in double.

namespace corestack::texture {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------- L2 / signed sqrt

/// x / ||x||; the zero vector maps to zero.
template <typename S>
Vec<S> l2_normalize(const Vec<S>& x) {
    const S n = x.norm();
    return n > S(0) ? Vec<S>(x / n) : Vec<S>::Zero(x.size());
}

template <typename S>
Vec<S> l2_normalize_backward(const Vec<S>& x, const Vec<S>& g) {
    const S n = x.norm();
    if (n == S(0)) return Vec<S>::Zero(x.size());
    const Vec<S> y = x / n;
    return (g - y * y.dot(g)) / n;
}

inline constexpr double kSqrtEps = 1e-8;

/// sign(x) * (sqrt(|x| + eps) - sqrt(eps)): continuous, finite slope at 0.
template <typename S>
Vec<S> signed_sqrt(const Vec<S>& x) {
    const S e = S(kSqrtEps), se = std::sqrt(e);
    return x.unaryExpr([=](S v) { return (v >= S(0) ? S(1) : S(-1)) * (std::sqrt(std::abs(v) + e) - se); });
}

template <typename S>
Vec<S> signed_sqrt_backward(const Vec<S>& x, const Vec<S>& g) {
    const S e = S(kSqrtEps);
    return g.binaryExpr(x, [=](S gv, S v) { return gv / (S(2) * std::sqrt(std::abs(v) + e)); });
}

// ---------------------------------------------------------------- residual pooling

/// Where the rectifier sits relative to the spatial mean.
enum class Rectify { per_position, after_mean };

template <typename S>
struct ResidualPoolCache {
    Mat<S> diff;      // transfer(f) - f, per position
    Vec<S> pooled;    // input of the L2 normalization
    Vec<S> raw_mean;  // mean of diff (after_mean only)
};

/// out = L2(mean_i relu(T f_i + b - f_i)) by default; with Rectify::after_mean,
/// out = L2(relu(mean_i (T f_i + b - f_i))). T is C x C, b has length C.
template <typename S>
Vec<S> residual_pool(const Mat<S>& F, const Mat<S>& T, const Vec<S>& b, ResidualPoolCache<S>* cache = nullptr,
                     Rectify mode = Rectify::per_position) {
    if (T.rows() != F.cols() || T.cols() != F.cols() || b.size() != F.cols())
        throw PreconditionError("residual_pool: transfer must map C to C");
    Mat<S> diff = F * T.transpose();
    diff.rowwise() += b.transpose();
    diff -= F;
    Vec<S> raw_mean, pooled;
    if (mode == Rectify::per_position) {
        pooled = diff.cwiseMax(S(0)).colwise().mean().transpose();
    } else {
        raw_mean = diff.colwise().mean().transpose();
        pooled = raw_mean.cwiseMax(S(0));
    }
    Vec<S> out = l2_normalize(pooled);
    if (cache) *cache = {std::move(diff), std::move(pooled), std::move(raw_mean)};
    return out;
}

template <typename S>
struct ResidualPoolGrads {
    Mat<S> dT;
    Vec<S> db;
    Mat<S> dF;
};

template <typename S>
ResidualPoolGrads<S> residual_pool_backward(const Mat<S>& F, const Mat<S>& T, const ResidualPoolCache<S>& c,
                                            const Vec<S>& g, Rectify mode = Rectify::per_position) {
    const auto N = F.rows();
    const Vec<S> dpooled = l2_normalize_backward(c.pooled, g);
    Mat<S> ddiff;
    if (mode == Rectify::per_position) {
        ddiff = (c.diff.array() > S(0)).template cast<S>();
        ddiff.array().rowwise() *= (dpooled / S(N)).transpose().array();
    } else {
        const Vec<S> dmean = dpooled.cwiseProduct((c.raw_mean.array() > S(0)).template cast<S>().matrix()) / S(N);
        ddiff = dmean.transpose().replicate(N, 1);
    }
    ResidualPoolGrads<S> out;
    out.dT = ddiff.transpose() * F;
    out.db = ddiff.colwise().sum().transpose();
    out.dF = ddiff * T - ddiff;
    return out;
}

// ---------------------------------------------------------------- encoding layer

template <typename S>
struct EncodeCache {
    Mat<S> W;  // N x K soft assignments
    Mat<S> E;  // K x D aggregated residuals before row normalization
};

/// Soft-assignment weights w[i,k] = softmax_k(-s_k ||x_i - c_k||^2).
template <typename S>
Mat<S> assignment_weights(const Mat<S>& X, const Mat<S>& C, const Vec<S>& s) {
    if (C.cols() != X.cols() || s.size() != C.rows()) throw PreconditionError("encode: codebook does not match descriptors");
    const auto N = X.rows(), K = C.rows();
    Mat<S> A(N, K);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index k = 0; k < K; ++k) A(i, k) = -s(k) * (X.row(i) - C.row(k)).squaredNorm();
    for (Eigen::Index i = 0; i < N; ++i) {
        const S m = A.row(i).maxCoeff();
        A.row(i) = (A.row(i).array() - m).exp();
        A.row(i) /= A.row(i).sum();
    }
    return A;
}

/// K x D matrix whose row k is L2(sum_i w[i,k] (x_i - c_k)).
template <typename S>
Mat<S> encode(const Mat<S>& X, const Mat<S>& C, const Vec<S>& s, EncodeCache<S>* cache = nullptr) {
    const Mat<S> W = assignment_weights(X, C, s);
    Mat<S> E = W.transpose() * X;
    const Vec<S> mass = W.colwise().sum().transpose();
    for (Eigen::Index k = 0; k < C.rows(); ++k) E.row(k) -= mass(k) * C.row(k);
    Mat<S> out(E.rows(), E.cols());
    for (Eigen::Index k = 0; k < E.rows(); ++k) out.row(k) = l2_normalize<S>(E.row(k).transpose()).transpose();
    if (cache) *cache = {W, E};
    return out;
}

template <typename S>
struct EncodeGrads {
    Mat<S> dX;
    Mat<S> dC;
    Vec<S> ds;
};

template <typename S>
EncodeGrads<S> encode_backward(const Mat<S>& X, const Mat<S>& C, const Vec<S>& s, const EncodeCache<S>& c,
                               const Mat<S>& g) {
    const auto N = X.rows(), K = C.rows();
    const auto& W = c.W;
    Mat<S> dE(K, X.cols());
    for (Eigen::Index k = 0; k < K; ++k)
        dE.row(k) = l2_normalize_backward<S>(c.E.row(k).transpose(), g.row(k).transpose()).transpose();
    EncodeGrads<S> out;
    const Vec<S> mass = W.colwise().sum().transpose();
    out.dX = W * dE;
    out.dC = -(dE.array().colwise() * mass.array()).matrix();
    // dW[i,k] = dE_k . (x_i - c_k)
    Mat<S> dW = X * dE.transpose();
    for (Eigen::Index k = 0; k < K; ++k) dW.col(k).array() -= C.row(k).dot(dE.row(k));
    // Softmax backward to the logits A[i,k] = -s_k d[i,k].
    Mat<S> dA(N, K);
    for (Eigen::Index i = 0; i < N; ++i) {
        const S inner = W.row(i).dot(dW.row(i));
        dA.row(i) = W.row(i).array() * (dW.row(i).array() - inner);
    }
    out.ds = Vec<S>::Zero(K);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index k = 0; k < K; ++k) {
            const auto r = (X.row(i) - C.row(k)).eval();
            out.ds(k) -= dA(i, k) * r.squaredNorm();
            const S dd = -s(k) * dA(i, k);  // gradient w.r.t. d[i,k]
            out.dX.row(i) += S(2) * dd * r;
            out.dC.row(k) -= S(2) * dd * r;
        }
    return out;
}

// ---------------------------------------------------------------- global average pooling

/// mean_i(R f_i + b) with R of shape D' x C.
template <typename S>
Vec<S> global_average_pool(const Mat<S>& F, const Mat<S>& R, const Vec<S>& b) {
    if (R.cols() != F.cols() || b.size() != R.rows()) throw PreconditionError("global_average_pool: reducer shape mismatch");
    return R * F.colwise().mean().transpose() + b;
}

template <typename S>
struct GapGrads {
    Mat<S> dR;
    Vec<S> db;
    Mat<S> dF;
};

template <typename S>
GapGrads<S> global_average_pool_backward(const Mat<S>& F, const Mat<S>& R, const Vec<S>& g) {
    GapGrads<S> out;
    const Vec<S> mean = F.colwise().mean().transpose();
    out.dR = g * mean.transpose();
    out.db = g;
    const Vec<S> per_row = R.transpose() * g / S(F.rows());
    out.dF = per_row.transpose().replicate(F.rows(), 1);
    return out;
}

// ---------------------------------------------------------------- bilinear

/// Flattened outer product: out[i * |b| + j] = a_i b_j.
template <typename S>
Vec<S> bilinear_combine(const Vec<S>& a, const Vec<S>& b) {
    Vec<S> out(a.size() * b.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a(i) * b;
    return out;
}

template <typename S>
std::pair<Vec<S>, Vec<S>> bilinear_combine_backward(const Vec<S>& a, const Vec<S>& b, const Vec<S>& g) {
    const Eigen::Map<const Mat<S>> G(g.data(), a.size(), b.size());
    return {G * b, G.transpose() * a};
}

}  // namespace corestack::texture
