#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "onenip/tensor.hpp"

namespace onenip {

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// Moment buffers for one parameter list, in parameter order.
struct AdamWState {
    std::vector<std::vector<Scalar>> first_moment;
    std::vector<std::vector<Scalar>> second_moment;
    std::int64_t step = 0;
};

// One AdamW update. Decay is applied to the parameter directly
// (p -= lr * wd * p) before the bias-corrected Adam step, never through the
// moment estimates. Parameters without a grad buffer are treated as g = 0.
inline void adamw_step(std::vector<Tensor>& params, AdamWState& state, double lr, const AdamWOptions& opt) {
    if (state.first_moment.empty()) {
        for (const Tensor& p : params) {
            state.first_moment.emplace_back(p.numel(), Scalar{0});
            state.second_moment.emplace_back(p.numel(), Scalar{0});
        }
    }
    if (state.first_moment.size() != params.size())
        throw DimensionError("adamw_step: optimizer state holds " + std::to_string(state.first_moment.size()) +
                             " buffers for " + std::to_string(params.size()) + " parameters");
    ++state.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        if (m.size() != p.numel()) throw DimensionError("adamw_step: moment size mismatch for parameter " + std::to_string(k));
        auto data = p.mutable_data();
        const bool has_grad = p.has_grad();
        const auto grad = p.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
            double x = data[i];
            x -= lr * opt.weight_decay * x;
            const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            m[i] = static_cast<Scalar>(mi);
            v[i] = static_cast<Scalar>(vi);
            x -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + opt.eps);
            data[i] = static_cast<Scalar>(x);
        }
    }
}

class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWOptions options) : params_(std::move(params)), options_(options) {}

    void step(double lr) { adamw_step(params_, state_, lr, options_); }
    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    const std::vector<Tensor>& params() const { return params_; }
    AdamWState& state() { return state_; }
    const AdamWState& state() const { return state_; }
    const AdamWOptions& options() const { return options_; }

private:
    std::vector<Tensor> params_;
    AdamWOptions options_;
    AdamWState state_;
};

// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double total = 0;
    for (const Tensor& p : params)
        for (Scalar g : p.grad()) total += static_cast<double>(g) * g;
    total = std::sqrt(total);
    const double coef = max_norm / (total + 1e-6);
    if (coef < 1.0)
        for (Tensor& p : params)
            if (p.has_grad())
                for (Scalar& g : p.mutable_grad()) g = static_cast<Scalar>(g * coef);
    return total;
}

}  // namespace onenip
