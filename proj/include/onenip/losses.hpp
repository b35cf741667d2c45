#pragma once

// Training objectives: feature MSE for reconstruction and restoration,
// smoothed Dice for the refined map, and their weighted sum.

#include <string>

#include "onenip/ops.hpp"

namespace onenip {

inline constexpr double kDiceSmoothing = 1.0;
inline constexpr double kDefaultSegWeight = 0.5;

struct LossReport {
    double l_rec = 0, l_res = 0, l_seg = 0, total = 0, lambda = kDefaultSegWeight;
};

// mean((target - prediction)^2) over every element.
inline Tensor feature_mse(const Tensor& target, const Tensor& prediction) {
    detail::require_same_shape(target, prediction, "feature_mse");
    return mean(square(sub(target, prediction)));
}

inline Tensor rec_loss(const Tensor& normal, const Tensor& reconstructed) { return feature_mse(normal, reconstructed); }

// The target is the clean source feature, the prediction came from the anomalous input.
inline Tensor res_loss(const Tensor& normal, const Tensor& restored) { return feature_mse(normal, restored); }

// Mean over the leading axis of 1 - (2*sum(p*m) + eps) / (sum(p^2) + sum(m^2) + eps).
// prediction and mask share a shape [N, ...]; the mask carries no gradient.
inline Tensor mean_dice_loss(const Tensor& prediction, const Tensor& mask, double eps = kDiceSmoothing) {
    detail::require_same_shape(prediction, mask, "dice_loss");
    if (prediction.rank() < 1 || prediction.dim(0) == 0) throw DimensionError("dice_loss: empty batch");
    if (eps <= 0) throw ConfigError("dice smoothing must be > 0");
    const std::size_t n = prediction.dim(0), per = prediction.numel() / n;
    const auto p = prediction.values();
    const auto m = mask.values();
    for (Scalar v : m)
        if (v != Scalar{0} && v != Scalar{1}) throw DimensionError("dice_loss: mask must be binary");
    std::vector<double> num(n), den(n);
    double loss = 0;
    for (std::size_t b = 0; b < n; ++b) {
        double inter = 0, pp = 0, mm = 0;
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            inter += static_cast<double>(p[i]) * m[i];
            pp += static_cast<double>(p[i]) * p[i];
            mm += static_cast<double>(m[i]) * m[i];
        }
        num[b] = 2 * inter + eps;
        den[b] = pp + mm + eps;
        loss += 1.0 - num[b] / den[b];
    }
    loss /= static_cast<double>(n);
    return Tensor::make_result(Shape{}, {static_cast<Scalar>(loss)}, {&prediction, &mask},
                               [n, per, num = std::move(num), den = std::move(den)](detail::Node& self) {
                                   Scalar* g = detail::grad_of(self.parents[0]);
                                   if (!g) return;
                                   const auto& p = self.parents[0]->data;
                                   const auto& m = self.parents[1]->data;
                                   const double up = static_cast<double>(self.grad[0]) / static_cast<double>(n);
                                   for (std::size_t b = 0; b < n; ++b) {
                                       const double d2 = den[b] * den[b];
                                       for (std::size_t i = b * per; i < (b + 1) * per; ++i)
                                           g[i] += static_cast<Scalar>(
                                               up * -(2.0 * m[i] * den[b] - num[b] * 2.0 * p[i]) / d2);
                                   }
                               });
}

// Single map, any shape.
inline Tensor dice_loss(const Tensor& prediction, const Tensor& mask, double eps = kDiceSmoothing) {
    Shape s = prediction.shape();
    s.insert(s.begin(), 1);
    return mean_dice_loss(reshape(prediction, s), reshape(mask, s), eps);
}

inline Tensor total_loss(const Tensor& l_rec, const Tensor& l_res, const Tensor& l_seg,
                         double lambda = kDefaultSegWeight) {
    if (!(lambda > 0)) throw ConfigError("segmentation loss weight must be > 0, got " + std::to_string(lambda));
    return add(add(l_rec, l_res), scale(l_seg, static_cast<Scalar>(lambda)));
}

inline LossReport make_report(const Tensor& l_rec, const Tensor& l_res, const Tensor& l_seg, const Tensor& total,
                              double lambda) {
    return {l_rec.item(), l_res.item(), l_seg.item(), total.item(), lambda};
}

}  // namespace onenip
