#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "corestack/nn/tensor.hpp"

// Layers keep whatever they need from the last forward call; backward must
// follow the matching forward before the next forward on the same layer.

namespace corestack::nn {

struct Param {
    Tensor value;
    Tensor grad;
    Tensor m, v;  // optimizer state
    bool trainable = true;

    Param() = default;
    Param(int n, int c, int h, int w) : value(n, c, h, w), grad(n, c, h, w) {}
    void zero_grad() { grad.fill(0.0f); }
};

struct NamedParam {
    std::string name;
    Param* param;
};

class Module {
public:
    virtual ~Module() = default;
    virtual Tensor forward(const Tensor& x) = 0;
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual void collect(const std::string& /*prefix*/, std::vector<NamedParam>& /*out*/) {}

    std::vector<NamedParam> named_params() {
        std::vector<NamedParam> out;
        collect("", out);
        return out;
    }
    std::vector<Param*> trainable_params() {
        std::vector<Param*> out;
        for (auto& np : named_params())
            if (np.param->trainable) out.push_back(np.param);
        return out;
    }
    void zero_grad() {
        for (auto& np : named_params()) np.param->zero_grad();
    }
};

struct Conv2dSpec {
    int in = 1, out = 1, kernel = 3, stride = 1, pad = -1, dilation = 1;
    bool bias = true;
    bool spectral_norm = false;
    /// Init bound multiplier on sqrt(6 / fan_in).
    float init_gain = 1.0f;

    int padding() const { return pad >= 0 ? pad : dilation * (kernel - 1) / 2; }
};

namespace detail {

inline int conv_out(int size, int k, int stride, int pad, int dil) {
    return (size + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

inline void im2col(const float* x, int C, int H, int W, int k, int stride, int pad, int dil, int OH, int OW, float* cols) {
    const std::size_t P = static_cast<std::size_t>(OH) * OW;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                float* row = cols + (static_cast<std::size_t>(c * k + ki) * k + kj) * P;
                const float* plane = x + static_cast<std::size_t>(c) * H * W;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ki * dil;
                    float* dst = row + static_cast<std::size_t>(oy) * OW;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + OW, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kj * dil;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
                    }
                }
            }
}

inline void col2im(const float* cols, int C, int H, int W, int k, int stride, int pad, int dil, int OH, int OW, float* x) {
    const std::size_t P = static_cast<std::size_t>(OH) * OW;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const float* row = cols + (static_cast<std::size_t>(c * k + ki) * k + kj) * P;
                float* plane = x + static_cast<std::size_t>(c) * H * W;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ki * dil;
                    if (iy < 0 || iy >= H) continue;
                    const float* src = row + static_cast<std::size_t>(oy) * OW;
                    float* dst = plane + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kj * dil;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace detail

class Conv2d : public Module {
public:
    Conv2d(const Conv2dSpec& spec, Rng& rng) : spec_(spec) {
        if (spec.in < 1 || spec.out < 1 || spec.kernel < 1 || spec.stride < 1 || spec.dilation < 1)
            throw PreconditionError("invalid conv spec");
        const int fan_in = spec.in * spec.kernel * spec.kernel;
        weight_ = Param(1, 1, spec.out, fan_in);
        const float bound = spec.init_gain * std::sqrt(6.0f / static_cast<float>(fan_in));
        for (auto& v : weight_.value.data) v = static_cast<float>(rng.uniform(-bound, bound));
        if (spec.bias) bias_ = Param(1, 1, 1, spec.out);
        if (spec.spectral_norm) {
            u_ = Param(1, 1, 1, spec.out);
            u_.trainable = false;
            double norm = 0;
            for (auto& v : u_.value.data) {
                v = static_cast<float>(rng.normal());
                norm += v * v;
            }
            for (auto& v : u_.value.data) v /= static_cast<float>(std::sqrt(norm));
        }
    }

    const Conv2dSpec& spec() const { return spec_; }
    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

    /// Weight actually applied (divided by the spectral-norm estimate when enabled).
    RowMat effective_weight() const {
        ConstRowMap w(weight_.value.data.data(), spec_.out, fan_in());
        return spec_.spectral_norm ? RowMat(w / sigma_) : RowMat(w);
    }

    Tensor forward(const Tensor& x) override {
        if (x.c != spec_.in) throw PreconditionError("conv expects " + std::to_string(spec_.in) + " channels, got " + x.shape_str());
        input_ = x;
        if (spec_.spectral_norm) power_iteration();
        const int pad = spec_.padding();
        const int OH = detail::conv_out(x.h, spec_.kernel, spec_.stride, pad, spec_.dilation);
        const int OW = detail::conv_out(x.w, spec_.kernel, spec_.stride, pad, spec_.dilation);
        if (OH < 1 || OW < 1) throw PreconditionError("conv input too small: " + x.shape_str());
        Tensor y(x.n, spec_.out, OH, OW);
        const RowMat w = effective_weight();
        const std::size_t P = static_cast<std::size_t>(OH) * OW;
        for (int s = 0; s < x.n; ++s) {
            RowMap out(y.sample(s), spec_.out, static_cast<Eigen::Index>(P));
            if (is_pointwise()) {
                out.noalias() = w * ConstRowMap(x.sample(s), spec_.in, static_cast<Eigen::Index>(P));
            } else {
                cols_.resize(static_cast<std::size_t>(fan_in()) * P);
                detail::im2col(x.sample(s), x.c, x.h, x.w, spec_.kernel, spec_.stride, pad, spec_.dilation, OH, OW, cols_.data());
                out.noalias() = w * ConstRowMap(cols_.data(), fan_in(), static_cast<Eigen::Index>(P));
            }
            if (spec_.bias) out.colwise() += Eigen::Map<const Eigen::VectorXf>(bias_.value.data.data(), spec_.out);
        }
        return y;
    }

    Tensor backward(const Tensor& g) override {
        const Tensor& x = input_;
        const int pad = spec_.padding();
        const int OH = g.h, OW = g.w;
        const std::size_t P = static_cast<std::size_t>(OH) * OW;
        Tensor dx = x.zeros_like();
        const RowMat w = effective_weight();
        RowMat dw = RowMat::Zero(spec_.out, fan_in());
        for (int s = 0; s < x.n; ++s) {
            ConstRowMap go(g.sample(s), spec_.out, static_cast<Eigen::Index>(P));
            // Plain loop: Eigen's vectorized reduction order depends on pointer alignment.
            if (spec_.bias)
                for (int o = 0; o < spec_.out; ++o) {
                    const float* row = g.sample(s) + static_cast<std::size_t>(o) * P;
                    double acc = 0;
                    for (std::size_t p = 0; p < P; ++p) acc += row[p];
                    bias_.grad.data[static_cast<std::size_t>(o)] += static_cast<float>(acc);
                }
            if (is_pointwise()) {
                ConstRowMap xs(x.sample(s), spec_.in, static_cast<Eigen::Index>(P));
                dw.noalias() += go * xs.transpose();
                RowMap(dx.sample(s), spec_.in, static_cast<Eigen::Index>(P)).noalias() = w.transpose() * go;
            } else {
                cols_.resize(static_cast<std::size_t>(fan_in()) * P);
                detail::im2col(x.sample(s), x.c, x.h, x.w, spec_.kernel, spec_.stride, pad, spec_.dilation, OH, OW, cols_.data());
                ConstRowMap cols(cols_.data(), fan_in(), static_cast<Eigen::Index>(P));
                dw.noalias() += go * cols.transpose();
                dcols_.resize(cols_.size());
                RowMap(dcols_.data(), fan_in(), static_cast<Eigen::Index>(P)).noalias() = w.transpose() * go;
                detail::col2im(dcols_.data(), x.c, x.h, x.w, spec_.kernel, spec_.stride, pad, spec_.dilation, OH, OW, dx.sample(s));
            }
        }
        RowMap wgrad(weight_.grad.data.data(), spec_.out, fan_in());
        if (spec_.spectral_norm) {
            // d(W/sigma)/dW applied to G: (G - <G, W/sigma> u v^T) / sigma
            const float inner = (dw.array() * w.array()).sum();
            wgrad += (dw - inner * u_vec_ * v_vec_.transpose()) / sigma_;
        } else {
            wgrad += dw;
        }
        return dx;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) override {
        out.push_back({prefix + "weight", &weight_});
        if (spec_.bias) out.push_back({prefix + "bias", &bias_});
        if (spec_.spectral_norm) out.push_back({prefix + "sn_u", &u_});
    }

private:
    int fan_in() const { return spec_.in * spec_.kernel * spec_.kernel; }
    bool is_pointwise() const { return spec_.kernel == 1 && spec_.stride == 1 && spec_.padding() == 0; }

    /// One power-iteration step; sigma is treated as a function of W with u, v fixed.
    void power_iteration() {
        ConstRowMap w(weight_.value.data.data(), spec_.out, fan_in());
        // Owned copy keeps reductions independent of the buffer's alignment.
        Eigen::VectorXf u = Eigen::Map<const Eigen::VectorXf>(u_.value.data.data(), spec_.out);
        Eigen::VectorXf v = w.transpose() * u;
        v /= std::max(v.norm(), 1e-12f);
        Eigen::VectorXf wu = w * v;
        u = wu / std::max(wu.norm(), 1e-12f);
        sigma_ = std::max(u.dot(wu), 1e-12f);
        Eigen::Map<Eigen::VectorXf>(u_.value.data.data(), spec_.out) = u;
        u_vec_ = u;
        v_vec_ = v;
    }

    Conv2dSpec spec_;
    Param weight_, bias_, u_;
    Tensor input_;
    std::vector<float> cols_, dcols_;
    float sigma_ = 1.0f;
    Eigen::VectorXf u_vec_, v_vec_;
};

/// Elementwise activation with cached input or output.
class Activation : public Module {
public:
    enum class Kind { relu, leaky_relu, elu, sigmoid, tanh };
    explicit Activation(Kind kind, float slope = 0.2f) : kind_(kind), slope_(slope) {}

    static float apply(Kind k, float x, float slope) {
        switch (k) {
            case Kind::relu: return x > 0 ? x : 0.0f;
            case Kind::leaky_relu: return x > 0 ? x : slope * x;
            case Kind::elu: return x > 0 ? x : std::expm1(x);
            case Kind::sigmoid: return 1.0f / (1.0f + std::exp(-x));
            case Kind::tanh: return std::tanh(x);
        }
        return x;
    }
    /// Derivative written in terms of input x and output y.
    static float derivative(Kind k, float x, float y, float slope) {
        switch (k) {
            case Kind::relu: return x > 0 ? 1.0f : 0.0f;
            case Kind::leaky_relu: return x > 0 ? 1.0f : slope;
            case Kind::elu: return x > 0 ? 1.0f : y + 1.0f;
            case Kind::sigmoid: return y * (1.0f - y);
            case Kind::tanh: return 1.0f - y * y;
        }
        return 1.0f;
    }

    Tensor forward(const Tensor& x) override {
        input_ = x;
        output_ = x;
        for (auto& v : output_.data) v = apply(kind_, v, slope_);
        return output_;
    }
    Tensor backward(const Tensor& g) override {
        Tensor dx = g;
        for (std::size_t i = 0; i < dx.data.size(); ++i)
            dx.data[i] *= derivative(kind_, input_.data[i], output_.data[i], slope_);
        return dx;
    }

private:
    Kind kind_;
    float slope_;
    Tensor input_, output_;
};

inline std::unique_ptr<Module> relu() { return std::make_unique<Activation>(Activation::Kind::relu); }
inline std::unique_ptr<Module> leaky_relu(float s = 0.2f) { return std::make_unique<Activation>(Activation::Kind::leaky_relu, s); }
inline std::unique_ptr<Module> elu() { return std::make_unique<Activation>(Activation::Kind::elu); }
inline std::unique_ptr<Module> sigmoid() { return std::make_unique<Activation>(Activation::Kind::sigmoid); }
inline std::unique_ptr<Module> tanh_act() { return std::make_unique<Activation>(Activation::Kind::tanh); }

/// Nearest-neighbour upsampling by an integer factor.
class Upsample : public Module {
public:
    explicit Upsample(int factor) : f_(factor) {
        if (factor < 1) throw PreconditionError("upsample factor must be >= 1");
    }
    Tensor forward(const Tensor& x) override {
        in_shape_ = x.zeros_like();
        Tensor y(x.n, x.c, x.h * f_, x.w * f_);
        for (int s = 0; s < x.n; ++s)
            for (int c = 0; c < x.c; ++c)
                for (int yy = 0; yy < y.h; ++yy)
                    for (int xx = 0; xx < y.w; ++xx) y.at(s, c, yy, xx) = x.at(s, c, yy / f_, xx / f_);
        return y;
    }
    Tensor backward(const Tensor& g) override {
        Tensor dx = in_shape_;
        for (int s = 0; s < g.n; ++s)
            for (int c = 0; c < g.c; ++c)
                for (int yy = 0; yy < g.h; ++yy)
                    for (int xx = 0; xx < g.w; ++xx) dx.at(s, c, yy / f_, xx / f_) += g.at(s, c, yy, xx);
        return dx;
    }

private:
    int f_;
    Tensor in_shape_;
};

/// Gated convolution: ELU(features) * sigmoid(gate), both from one conv.
class GatedConv2d : public Module {
public:
    GatedConv2d(const Conv2dSpec& spec, Rng& rng) : out_(spec.out), conv_(doubled(spec), rng) {}

    Tensor forward(const Tensor& x) override {
        z_ = conv_.forward(x);
        Tensor y(z_.n, out_, z_.h, z_.w);
        const std::size_t half = static_cast<std::size_t>(out_) * z_.plane();
        for (int s = 0; s < z_.n; ++s) {
            const float* f = z_.sample(s);
            const float* gt = f + half;
            float* o = y.sample(s);
            for (std::size_t i = 0; i < half; ++i)
                o[i] = Activation::apply(Activation::Kind::elu, f[i], 0) * Activation::apply(Activation::Kind::sigmoid, gt[i], 0);
        }
        return y;
    }
    Tensor backward(const Tensor& g) override {
        Tensor dz = z_.zeros_like();
        const std::size_t half = static_cast<std::size_t>(out_) * z_.plane();
        for (int s = 0; s < z_.n; ++s) {
            const float* f = z_.sample(s);
            const float* gt = f + half;
            const float* go = g.sample(s);
            float* df = dz.sample(s);
            float* dg = df + half;
            for (std::size_t i = 0; i < half; ++i) {
                const float e = Activation::apply(Activation::Kind::elu, f[i], 0);
                const float sg = Activation::apply(Activation::Kind::sigmoid, gt[i], 0);
                df[i] = go[i] * sg * Activation::derivative(Activation::Kind::elu, f[i], e, 0);
                dg[i] = go[i] * e * sg * (1.0f - sg);
            }
        }
        return conv_.backward(dz);
    }
    void collect(const std::string& prefix, std::vector<NamedParam>& out) override { conv_.collect(prefix, out); }

private:
    static Conv2dSpec doubled(Conv2dSpec s) {
        s.out *= 2;
        return s;
    }

    int out_;
    Conv2d conv_;
    Tensor z_;
};

class Sequential : public Module {
public:
    Sequential() = default;

    template <class M, class... Args>
    M& emplace(Args&&... args) {
        auto m = std::make_unique<M>(std::forward<Args>(args)...);
        M& ref = *m;
        layers_.push_back(std::move(m));
        return ref;
    }
    void add(std::unique_ptr<Module> m) { layers_.push_back(std::move(m)); }
    std::size_t size() const { return layers_.size(); }

    Tensor forward(const Tensor& x) override {
        Tensor h = x;
        for (auto& l : layers_) h = l->forward(h);
        return h;
    }
    Tensor backward(const Tensor& g) override {
        Tensor d = g;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
        return d;
    }
    void collect(const std::string& prefix, std::vector<NamedParam>& out) override {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(prefix + std::to_string(i) + ".", out);
    }

private:
    std::vector<std::unique_ptr<Module>> layers_;
};

}  // namespace corestack::nn
