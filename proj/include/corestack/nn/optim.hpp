#pragma once

#include <cmath>
#include <vector>

#include "corestack/nn/layers.hpp"

namespace corestack::nn {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled
};

class Adam {
public:
    Adam(std::vector<Param*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            if (p->m.numel() != p->value.numel()) p->m = p->value.zeros_like();
            if (p->v.numel() != p->value.numel()) p->v = p->value.zeros_like();
        }
    }

    void set_lr(float lr) { cfg_.lr = lr; }
    float lr() const { return cfg_.lr; }
    long long steps() const { return t_; }

    void step() {
        ++t_;
        const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
        for (auto* p : params_) {
            if (!p->trainable) continue;
            auto& w = p->value.data;
            const auto& g = p->grad.data;
            auto& m = p->m.data;
            auto& v = p->v.data;
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
                const float mh = m[i] / bc1, vh = v[i] / bc2;
                w[i] -= cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[i]);
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

private:
    std::vector<Param*> params_;
    AdamConfig cfg_;
    long long t_ = 0;
};

}  // namespace corestack::nn
