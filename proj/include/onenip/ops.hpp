#pragma once

// Differentiable kernels. Spatial tensors are channel-last: [N, H, W, C] or
// [H, W, C]. Token matrices are [tokens, C]. Dense products go through Eigen.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <span>

#include "onenip/tensor.hpp"

namespace onenip {

namespace detail {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline ConstMatMap cmap(const std::vector<Scalar>& v, std::size_t rows, std::size_t cols) {
    return ConstMatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap mmap(std::vector<Scalar>& v, std::size_t rows, std::size_t cols) {
    return MatMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline void require_rank(const Tensor& x, std::size_t rank, const char* op) {
    if (x.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(x.shape()));
}

// Accumulate into a parent's grad buffer if that parent participates in differentiation.
// Column sums accumulated row by row. Eigen's colwise().sum() picks its
// summation order from the buffer address, which breaks run-to-run determinism.
inline void add_column_sums(std::span<Scalar> dst, const Scalar* src, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[r * cols + c];
}

inline Scalar* grad_of(const std::shared_ptr<Node>& p) { return p->requires_grad ? p->grad_buffer().data() : nullptr; }

// Views any tensor of rank >= 1 as [rows, last-dim].
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& x) {
    const std::size_t c = x.rank() == 0 ? 1 : x.shape().back();
    return {c == 0 ? 0 : x.numel() / c, c};
}

// Interpolation table for one axis, align-corners=false.
struct AxisTaps {
    std::vector<std::size_t> lo, hi;
    std::vector<Scalar> frac;
};

inline AxisTaps axis_taps(std::size_t in, std::size_t out) {
    AxisTaps t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.frac.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        double src = scale * (static_cast<double>(i) + 0.5) - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        t.lo[i] = i0;
        t.hi[i] = i0 < in - 1 ? i0 + 1 : i0;
        t.frac[i] = static_cast<Scalar>(src - static_cast<double>(i0));
    }
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        for (auto& p : self.parents)
            if (Scalar* g = detail::grad_of(p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (Scalar* g = detail::grad_of(self.parents[1]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        if (Scalar* g = detail::grad_of(self.parents[1]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    });
}

inline Tensor scale(const Tensor& x, Scalar s) {
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * s;
    return Tensor::make_result(x.shape(), std::move(out), {&x}, [s](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    });
}

// x + b where b is a vector broadcast along the last axis.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    const auto [rows, cols] = detail::rows_cols(x);
    if (b.numel() != cols)
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
    std::vector<Scalar> out(x.values());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b.values()[c];
    return Tensor::make_result(x.shape(), std::move(out), {&x, &b}, [rows, cols](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (Scalar* g = detail::grad_of(self.parents[1]))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
    });
}

inline Tensor abs(const Tensor& x) {
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x.values()[i]);
    return Tensor::make_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        const auto& xv = self.parents[0]->data;
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                g[i] += xv[i] > 0 ? self.grad[i] : (xv[i] < 0 ? -self.grad[i] : Scalar{0});
    });
}

inline Tensor square(const Tensor& x) {
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * x.values()[i];
    return Tensor::make_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        const auto& xv = self.parents[0]->data;
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += 2 * xv[i] * self.grad[i];
    });
}

inline Tensor relu(const Tensor& x) {
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x.values()[i], Scalar{0});
    return Tensor::make_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
        const auto& xv = self.parents[0]->data;
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (xv[i] > 0) g[i] += self.grad[i];
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Scalar v = x.values()[i];
        // Split by sign so exp never overflows.
        out[i] = v >= 0 ? Scalar{1} / (Scalar{1} + std::exp(-v)) : std::exp(v) / (Scalar{1} + std::exp(v));
    }
    return Tensor::make_result(x.shape(), out, {&x}, [y = out](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i] * (1 - y[i]);
    });
}

inline Tensor sum(const Tensor& x) {
    double acc = 0;
    for (Scalar v : x.values()) acc += v;
    return Tensor::make_result(Shape{}, {static_cast<Scalar>(acc)}, {&x}, [](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), Scalar{1} / static_cast<Scalar>(x.numel()));
}

// Reinterprets the data under a new shape with the same element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    return Tensor::make_result(std::move(shape), x.values(), {&x}, [](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("stack of zero tensors");
    Shape shape = parts[0].shape();
    std::vector<Scalar> out;
    out.reserve(parts.size() * parts[0].numel());
    for (const Tensor& p : parts) {
        detail::require_same_shape(parts[0], p, "stack");
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    const std::size_t block = parts[0].numel();
    shape.insert(shape.begin(), parts.size());
    return Tensor::make_result(std::move(shape), std::move(out), parts, [block](detail::Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k)
            if (Scalar* g = detail::grad_of(self.parents[k]))
                for (std::size_t i = 0; i < block; ++i) g[i] += self.grad[k * block + i];
    });
}

// Slice `index` of the leading axis.
inline Tensor select(const Tensor& x, std::size_t index) {
    if (x.rank() == 0 || index >= x.dim(0))
        throw DimensionError("select " + std::to_string(index) + " from " + shape_str(x.shape()));
    Shape shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t block = shape_numel(shape);
    std::vector<Scalar> out(x.values().begin() + static_cast<std::ptrdiff_t>(index * block),
                            x.values().begin() + static_cast<std::ptrdiff_t>((index + 1) * block));
    return Tensor::make_result(std::move(shape), std::move(out), {&x}, [index, block](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < block; ++i) g[index * block + i] += self.grad[i];
    });
}

// Concatenates along the last axis; all leading dimensions must agree.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (Shape(p.shape().begin(), p.shape().end() - 1) != lead)
            throw DimensionError("concat_last: leading dims " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
        widths.push_back(p.shape().back());
        total += p.shape().back();
    }
    const std::size_t rows = shape_numel(lead);
    std::vector<Scalar> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(parts[k].values().begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                        out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
        offset += widths[k];
    }
    Shape shape = lead;
    shape.push_back(total);
    return Tensor::make_result(std::move(shape), std::move(out), parts, [rows, total, widths](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            if (Scalar* g = detail::grad_of(self.parents[k]))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += self.grad[r * total + off + c];
            off += widths[k];
        }
    });
}

// Inverted dropout: survivors are scaled by 1/(1-p). Identity when p == 0.
template <class Rng>
Tensor dropout(const Tensor& x, Scalar p, Rng& rng) {
    if (p <= 0) return x;
    if (p >= 1) throw ConfigError("dropout probability must be < 1");
    std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
    std::vector<Scalar> factor(x.numel());
    const Scalar s = Scalar{1} / (Scalar{1} - p);
    for (auto& f : factor) f = keep(rng) ? s : Scalar{0};
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * factor[i];
    return Tensor::make_result(x.shape(), std::move(out), {&x}, [factor = std::move(factor)](detail::Node& self) {
        if (Scalar* g = detail::grad_of(self.parents[0]))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor[i];
    });
}

// ---------------------------------------------------------------------------
// Dense algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<Scalar> out(m * n);
    detail::mmap(out, m, n).noalias() = detail::cmap(a.values(), m, k) * detail::cmap(b.values(), k, n);
    return Tensor::make_result(Shape{m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
        const auto dy = detail::cmap(self.grad, m, n);
        if (self.parents[0]->requires_grad)
            detail::mmap(self.parents[0]->grad_buffer(), m, k).noalias() +=
                dy * detail::cmap(self.parents[1]->data, k, n).transpose();
        if (self.parents[1]->requires_grad)
            detail::mmap(self.parents[1]->grad_buffer(), k, n).noalias() +=
                detail::cmap(self.parents[0]->data, m, k).transpose() * dy;
    });
}

// y = x W + b over the last axis of x. W is [in, out], b is [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const auto [rows, in] = detail::rows_cols(x);
    if (weight.rank() != 2 || weight.dim(0) != in || bias.numel() != weight.dim(1))
        throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                             ", bias " + shape_str(bias.shape()));
    const std::size_t out_dim = weight.dim(1);
    std::vector<Scalar> out(rows * out_dim);
    auto y = detail::mmap(out, rows, out_dim);
    y.noalias() = detail::cmap(x.values(), rows, in) * detail::cmap(weight.values(), in, out_dim);
    y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.values().data(),
                                                                             static_cast<Eigen::Index>(out_dim));
    Shape shape = x.shape();
    shape.back() = out_dim;
    return Tensor::make_result(std::move(shape), std::move(out), {&x, &weight, &bias},
                               [rows, in, out_dim](detail::Node& self) {
                                   const auto dy = detail::cmap(self.grad, rows, out_dim);
                                   auto& xp = self.parents[0];
                                   auto& wp = self.parents[1];
                                   auto& bp = self.parents[2];
                                   if (xp->requires_grad)
                                       detail::mmap(xp->grad_buffer(), rows, in).noalias() +=
                                           dy * detail::cmap(wp->data, in, out_dim).transpose();
                                   if (wp->requires_grad)
                                       detail::mmap(wp->grad_buffer(), in, out_dim).noalias() +=
                                           detail::cmap(xp->data, rows, in).transpose() * dy;
                                   if (bp->requires_grad)
                                       detail::add_column_sums(bp->grad_buffer(), self.grad.data(), rows, out_dim);
                               });
}

// ---------------------------------------------------------------------------
// Softmax family

struct BoolMask {
    Shape shape;
    std::vector<unsigned char> data;  // 1 = excluded from the distribution

    bool at(std::size_t flat) const { return data[flat] != 0; }
};

namespace detail {

inline void check_finite(const std::vector<Scalar>& v, const char* op) {
    for (Scalar x : v)
        if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
}

// Row softmax in place; mask (same layout) zeroes excluded entries.
inline void softmax_rows(Scalar* data, std::size_t rows, std::size_t cols, const unsigned char* mask,
                         const char* op) {
    for (std::size_t r = 0; r < rows; ++r) {
        Scalar* row = data + r * cols;
        const unsigned char* mrow = mask ? mask + r * cols : nullptr;
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (std::size_t c = 0; c < cols; ++c)
            if (!mrow || !mrow[c]) mx = std::max(mx, row[c]);
        if (mx == -std::numeric_limits<Scalar>::infinity())
            throw DimensionError(std::string(op) + ": row " + std::to_string(r) +
                                 " has no unmasked entry, distribution undefined");
        Scalar total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (mrow && mrow[c]) {
                row[c] = 0;
            } else {
                row[c] = std::exp(row[c] - mx);
                total += row[c];
            }
        }
        const Scalar inv = Scalar{1} / total;
        for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
    }
}

// dx = y * (dy - <dy, y>) per row.
inline void softmax_rows_backward(const Scalar* y, const Scalar* dy, Scalar* dx, std::size_t rows,
                                  std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* yr = y + r * cols;
        const Scalar* dyr = dy + r * cols;
        Scalar dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * dyr[c];
        for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += yr[c] * (dyr[c] - dot);
    }
}

inline Tensor softmax_impl(const Tensor& x, const BoolMask* mask, const char* op) {
    if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError(std::string(op) + ": empty last axis");
    check_finite(x.values(), op);
    const auto [rows, cols] = rows_cols(x);
    std::vector<Scalar> out(x.values());
    softmax_rows(out.data(), rows, cols, mask ? mask->data.data() : nullptr, op);
    return Tensor::make_result(x.shape(), out, {&x}, [y = out, rows, cols](Node& self) {
        if (Scalar* g = grad_of(self.parents[0])) softmax_rows_backward(y.data(), self.grad.data(), g, rows, cols);
    });
}

}  // namespace detail

inline Tensor softmax_last_axis(const Tensor& x) { return detail::softmax_impl(x, nullptr, "softmax"); }

inline Tensor masked_softmax(const Tensor& x, const BoolMask& mask) {
    if (mask.shape != x.shape())
        throw DimensionError("masked_softmax: mask " + shape_str(mask.shape) + " vs input " + shape_str(x.shape()));
    return detail::softmax_impl(x, &mask, "masked_softmax");
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr Scalar kLayerNormEps = Scalar(1e-5);
inline constexpr Scalar kBatchNormEps = Scalar(1e-5);
inline constexpr Scalar kBatchNormMomentum = Scalar(0.1);

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps = kLayerNormEps) {
    const auto [rows, cols] = detail::rows_cols(x);
    if (gain.numel() != cols || bias.numel() != cols)
        throw DimensionError("layer_norm: gain/bias size vs input " + shape_str(x.shape()));
    std::vector<Scalar> xhat(x.numel()), out(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* xr = x.values().data() + r * cols;
        double mu = 0;
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= static_cast<double>(cols);
        double var = 0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(cols);
        inv_std[r] = static_cast<Scalar>(1.0 / std::sqrt(var + eps));
        for (std::size_t c = 0; c < cols; ++c) {
            xhat[r * cols + c] = static_cast<Scalar>(xr[c] - mu) * inv_std[r];
            out[r * cols + c] = xhat[r * cols + c] * gain.values()[c] + bias.values()[c];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {&x, &gain, &bias},
        [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            const auto& g = self.parents[1]->data;
            Scalar* dx = detail::grad_of(self.parents[0]);
            Scalar* dg = detail::grad_of(self.parents[1]);
            Scalar* db = detail::grad_of(self.parents[2]);
            std::vector<Scalar> dxhat(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                const Scalar* dy = self.grad.data() + r * cols;
                const Scalar* xh = xhat.data() + r * cols;
                Scalar s1 = 0, s2 = 0;
                for (std::size_t c = 0; c < cols; ++c) {
                    if (dg) dg[c] += dy[c] * xh[c];
                    if (db) db[c] += dy[c];
                    dxhat[c] = dy[c] * g[c];
                    s1 += dxhat[c];
                    s2 += dxhat[c] * xh[c];
                }
                if (dx) {
                    const Scalar n = static_cast<Scalar>(cols);
                    for (std::size_t c = 0; c < cols; ++c)
                        dx[r * cols + c] += inv_std[r] / n * (n * dxhat[c] - s1 - xh[c] * s2);
                }
            }
        });
}

enum class BatchNormMode { training, evaluation };

// Running statistics owned by a batch_norm call site.
struct BatchNormStats {
    Tensor running_mean;
    Tensor running_var;

    explicit BatchNormStats(std::size_t channels = 0)
        : running_mean(Shape{channels}, Scalar{0}), running_var(Shape{channels}, Scalar{1}) {}
};

// Normalizes each channel (last axis) over all other axes.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                         BatchNormMode mode, Scalar eps = kBatchNormEps, Scalar momentum = kBatchNormMomentum) {
    const auto [rows, cols] = detail::rows_cols(x);
    if (gamma.numel() != cols || beta.numel() != cols || stats.running_mean.numel() != cols)
        throw DimensionError("batch_norm: parameter size vs input " + shape_str(x.shape()));
    std::vector<Scalar> mu(cols), inv_std(cols);
    const bool train = mode == BatchNormMode::training;
    if (train) {
        if (rows < 2) throw DimensionError("batch_norm: training mode needs more than one value per channel");
        std::vector<double> s(cols, 0.0), ss(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) s[c] += x.values()[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) s[c] /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = x.values()[r * cols + c] - s[c];
                ss[c] += d * d;
            }
        auto rm = stats.running_mean.mutable_data();
        auto rv = stats.running_var.mutable_data();
        for (std::size_t c = 0; c < cols; ++c) {
            const double var = ss[c] / static_cast<double>(rows);
            mu[c] = static_cast<Scalar>(s[c]);
            inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + eps));
            const double unbiased = ss[c] / static_cast<double>(rows - 1);
            rm[c] = static_cast<Scalar>((1 - momentum) * rm[c] + momentum * s[c]);
            rv[c] = static_cast<Scalar>((1 - momentum) * rv[c] + momentum * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < cols; ++c) {
            mu[c] = stats.running_mean.values()[c];
            inv_std[c] = Scalar{1} / std::sqrt(stats.running_var.values()[c] + eps);
        }
    }
    std::vector<Scalar> xhat(x.numel()), out(x.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            xhat[i] = (x.values()[i] - mu[c]) * inv_std[c];
            out[i] = xhat[i] * gamma.values()[c] + beta.values()[c];
        }
    return Tensor::make_result(
        x.shape(), std::move(out), {&x, &gamma, &beta},
        [rows, cols, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            const auto& g = self.parents[1]->data;
            Scalar* dx = detail::grad_of(self.parents[0]);
            Scalar* dg = detail::grad_of(self.parents[1]);
            Scalar* db = detail::grad_of(self.parents[2]);
            std::vector<Scalar> s1(cols, 0), s2(cols, 0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    const Scalar dy = self.grad[i];
                    if (dg) dg[c] += dy * xhat[i];
                    if (db) db[c] += dy;
                    s1[c] += dy * g[c];
                    s2[c] += dy * g[c] * xhat[i];
                }
            if (!dx) return;
            const Scalar n = static_cast<Scalar>(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    const Scalar dxhat = self.grad[i] * g[c];
                    dx[i] += train ? inv_std[c] / n * (n * dxhat - s1[c] - xhat[i] * s2[c]) : dxhat * inv_std[c];
                }
        });
}

// ---------------------------------------------------------------------------
// Convolutions on [N, H, W, C]

namespace detail {

inline void require_nhwc(const Tensor& x, const char* op) {
    require_rank(x, 4, op);
    if (x.dim(1) == 0 || x.dim(2) == 0) throw DimensionError(std::string(op) + ": empty spatial size");
}

}  // namespace detail

// 3x3 convolution, stride 1, zero padding 1. W is [3, 3, Cin, Cout].
inline Tensor conv2d_3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_nhwc(x, "conv2d_3x3");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
    if (weight.rank() != 4 || weight.dim(0) != 3 || weight.dim(1) != 3 || weight.dim(2) != cin)
        throw DimensionError("conv2d_3x3: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
    const std::size_t cout = weight.dim(3);
    if (bias.numel() != cout) throw DimensionError("conv2d_3x3: bias size");
    const std::size_t rows = n * h * w, k = 9 * cin;
    std::vector<Scalar> cols(rows * k, Scalar{0});
    const auto& xv = x.values();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                Scalar* dst = cols.data() + ((b * h + i) * w + j) * k;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const auto si = static_cast<std::ptrdiff_t>(i) + dy;
                        const auto sj = static_cast<std::ptrdiff_t>(j) + dx;
                        if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(h) ||
                            sj >= static_cast<std::ptrdiff_t>(w))
                            continue;
                        const Scalar* src = xv.data() + ((b * h + static_cast<std::size_t>(si)) * w +
                                                         static_cast<std::size_t>(sj)) * cin;
                        std::copy_n(src, cin, dst + static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)) * cin);
                    }
            }
    std::vector<Scalar> out(rows * cout);
    auto y = detail::mmap(out, rows, cout);
    y.noalias() = detail::cmap(cols, rows, k) * detail::cmap(weight.values(), k, cout);
    y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.values().data(),
                                                                             static_cast<Eigen::Index>(cout));
    return Tensor::make_result(
        Shape{n, h, w, cout}, std::move(out), {&x, &weight, &bias},
        [n, h, w, cin, cout, rows, k, cols = std::move(cols)](detail::Node& self) {
            const auto dy = detail::cmap(self.grad, rows, cout);
            auto& xp = self.parents[0];
            auto& wp = self.parents[1];
            auto& bp = self.parents[2];
            if (wp->requires_grad)
                detail::mmap(wp->grad_buffer(), k, cout).noalias() += detail::cmap(cols, rows, k).transpose() * dy;
            if (bp->requires_grad) detail::add_column_sums(bp->grad_buffer(), self.grad.data(), rows, cout);
            if (!xp->requires_grad) return;
            detail::RowMat dcols = dy * detail::cmap(wp->data, k, cout).transpose();
            Scalar* dx = xp->grad_buffer().data();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) {
                        const Scalar* src = dcols.data() + ((b * h + i) * w + j) * k;
                        for (int oy = -1; oy <= 1; ++oy)
                            for (int ox = -1; ox <= 1; ++ox) {
                                const auto si = static_cast<std::ptrdiff_t>(i) + oy;
                                const auto sj = static_cast<std::ptrdiff_t>(j) + ox;
                                if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(h) ||
                                    sj >= static_cast<std::ptrdiff_t>(w))
                                    continue;
                                Scalar* d = dx + ((b * h + static_cast<std::size_t>(si)) * w +
                                                  static_cast<std::size_t>(sj)) * cin;
                                const Scalar* s = src + static_cast<std::size_t>((oy + 1) * 3 + (ox + 1)) * cin;
                                for (std::size_t c = 0; c < cin; ++c) d[c] += s[c];
                            }
                    }
        });
}

// Pointwise convolution. W is [Cin, Cout].
inline Tensor conv2d_1x1(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_nhwc(x, "conv2d_1x1");
    return linear(x, weight, bias);
}

// Transposed convolution with kernel 2 and stride 2: every input pixel writes
// its own 2x2 output block, so the output is exactly [N, 2H, 2W, Cout].
// W is [Cin, 2, 2, Cout].
inline Tensor deconv2d_2x2_stride2(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_nhwc(x, "deconv2d_2x2_stride2");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
    if (weight.rank() != 4 || weight.dim(0) != cin || weight.dim(1) != 2 || weight.dim(2) != 2)
        throw DimensionError("deconv2d_2x2_stride2: weight " + shape_str(weight.shape()) + " vs input " +
                             shape_str(x.shape()));
    const std::size_t cout = weight.dim(3);
    if (bias.numel() != cout) throw DimensionError("deconv2d_2x2_stride2: bias size");
    const std::size_t rows = n * h * w, wide = 4 * cout;
    detail::RowMat y = detail::cmap(x.values(), rows, cin) * detail::cmap(weight.values(), cin, wide);
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<Scalar> out(n * oh * ow * cout);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const Scalar* src = y.data() + ((b * h + i) * w + j) * wide;
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        Scalar* dst = out.data() + ((b * oh + 2 * i + di) * ow + 2 * j + dj) * cout;
                        const Scalar* s = src + (di * 2 + dj) * cout;
                        for (std::size_t c = 0; c < cout; ++c) dst[c] = s[c] + bias.values()[c];
                    }
            }
    return Tensor::make_result(
        Shape{n, oh, ow, cout}, std::move(out), {&x, &weight, &bias},
        [n, h, w, cin, cout, rows, wide, oh, ow](detail::Node& self) {
            detail::RowMat dy(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(wide));
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) {
                        Scalar* dst = dy.data() + ((b * h + i) * w + j) * wide;
                        for (std::size_t di = 0; di < 2; ++di)
                            for (std::size_t dj = 0; dj < 2; ++dj)
                                std::copy_n(self.grad.data() + ((b * oh + 2 * i + di) * ow + 2 * j + dj) * cout, cout,
                                            dst + (di * 2 + dj) * cout);
                    }
            auto& xp = self.parents[0];
            auto& wp = self.parents[1];
            auto& bp = self.parents[2];
            if (xp->requires_grad)
                detail::mmap(xp->grad_buffer(), rows, cin).noalias() +=
                    dy * detail::cmap(wp->data, cin, wide).transpose();
            if (wp->requires_grad)
                detail::mmap(wp->grad_buffer(), cin, wide).noalias() +=
                    detail::cmap(xp->data, rows, cin).transpose() * dy;
            if (bp->requires_grad)
                detail::add_column_sums(bp->grad_buffer(), self.grad.data(), n * oh * ow, cout);
        });
}

// 2x2 average pooling with stride 2.
inline Tensor avg_pool_2x2(const Tensor& x) {
    detail::require_nhwc(x, "avg_pool_2x2");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (h < 2 || w < 2 || h % 2 || w % 2)
        throw DimensionError("avg_pool_2x2: spatial size " + shape_str(x.shape()) + " not divisible by 2");
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<Scalar> out(n * oh * ow * c, Scalar{0});
    const auto& xv = x.values();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const Scalar* s = xv.data() + ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                        Scalar* d = out.data() + ((b * oh + i) * ow + j) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) d[ch] += Scalar(0.25) * s[ch];
                    }
    return Tensor::make_result(Shape{n, oh, ow, c}, std::move(out), {&x}, [n, h, w, c, oh, ow](detail::Node& self) {
        Scalar* g = detail::grad_of(self.parents[0]);
        if (!g) return;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j)
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            Scalar* d = g + ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                            const Scalar* s = self.grad.data() + ((b * oh + i) * ow + j) * c;
                            for (std::size_t ch = 0; ch < c; ++ch) d[ch] += Scalar(0.25) * s[ch];
                        }
    });
}

// Bilinear resize with align-corners=false. Accepts [H, W, C] or [N, H, W, C].
inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3 && x.rank() != 4) throw DimensionError("bilinear_resize: expected HWC or NHWC, got " + shape_str(x.shape()));
    if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize: output size must be >= 1");
    const bool batched = x.rank() == 4;
    const std::size_t n = batched ? x.dim(0) : 1;
    const std::size_t h = x.dim(batched ? 1 : 0), w = x.dim(batched ? 2 : 1), c = x.dim(batched ? 3 : 2);
    if (h == 0 || w == 0) throw DimensionError("bilinear_resize: empty input");
    const auto ty = detail::axis_taps(h, out_h);
    const auto tx = detail::axis_taps(w, out_w);
    std::vector<Scalar> out(n * out_h * out_w * c);
    const auto& xv = x.values();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < out_h; ++i) {
            const Scalar fy = ty.frac[i];
            for (std::size_t j = 0; j < out_w; ++j) {
                const Scalar fx = tx.frac[j];
                const Scalar* p00 = xv.data() + ((b * h + ty.lo[i]) * w + tx.lo[j]) * c;
                const Scalar* p01 = xv.data() + ((b * h + ty.lo[i]) * w + tx.hi[j]) * c;
                const Scalar* p10 = xv.data() + ((b * h + ty.hi[i]) * w + tx.lo[j]) * c;
                const Scalar* p11 = xv.data() + ((b * h + ty.hi[i]) * w + tx.hi[j]) * c;
                Scalar* d = out.data() + ((b * out_h + i) * out_w + j) * c;
                for (std::size_t ch = 0; ch < c; ++ch)
                    d[ch] = (1 - fy) * ((1 - fx) * p00[ch] + fx * p01[ch]) + fy * ((1 - fx) * p10[ch] + fx * p11[ch]);
            }
        }
    Shape shape = batched ? Shape{n, out_h, out_w, c} : Shape{out_h, out_w, c};
    return Tensor::make_result(std::move(shape), std::move(out), {&x},
                               [n, h, w, c, out_h, out_w, ty, tx](detail::Node& self) {
                                   Scalar* g = detail::grad_of(self.parents[0]);
                                   if (!g) return;
                                   for (std::size_t b = 0; b < n; ++b)
                                       for (std::size_t i = 0; i < out_h; ++i) {
                                           const Scalar fy = ty.frac[i];
                                           for (std::size_t j = 0; j < out_w; ++j) {
                                               const Scalar fx = tx.frac[j];
                                               const Scalar* s = self.grad.data() + ((b * out_h + i) * out_w + j) * c;
                                               Scalar* p00 = g + ((b * h + ty.lo[i]) * w + tx.lo[j]) * c;
                                               Scalar* p01 = g + ((b * h + ty.lo[i]) * w + tx.hi[j]) * c;
                                               Scalar* p10 = g + ((b * h + ty.hi[i]) * w + tx.lo[j]) * c;
                                               Scalar* p11 = g + ((b * h + ty.hi[i]) * w + tx.hi[j]) * c;
                                               for (std::size_t ch = 0; ch < c; ++ch) {
                                                   p00[ch] += (1 - fy) * (1 - fx) * s[ch];
                                                   p01[ch] += (1 - fy) * fx * s[ch];
                                                   p10[ch] += fy * (1 - fx) * s[ch];
                                                   p11[ch] += fy * fx * s[ch];
                                               }
                                           }
                                       }
                               });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention core (projections live in the model).

// Collects the attention distributions produced while it is installed.
struct AttentionTrace {
    struct Record {
        std::size_t heads, queries, keys;
        std::vector<Scalar> weights;  // [heads, queries, keys]
    };
    std::vector<Record> records;
};

namespace detail {
inline thread_local AttentionTrace* attention_trace = nullptr;
}

class AttentionTraceScope {
public:
    explicit AttentionTraceScope(AttentionTrace& trace) : previous_(detail::attention_trace) {
        detail::attention_trace = &trace;
    }
    ~AttentionTraceScope() { detail::attention_trace = previous_; }
    AttentionTraceScope(const AttentionTraceScope&) = delete;
    AttentionTraceScope& operator=(const AttentionTraceScope&) = delete;

private:
    AttentionTrace* previous_;
};

// softmax(Q_h K_h^T / sqrt(d)) V_h per head, heads concatenated on the channel axis.
// q: [n, c]; k, v: [m, c]; mask (optional): [n, m], 1 = excluded.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const BoolMask* mask = nullptr) {
    detail::require_rank(q, 2, "attention");
    detail::require_rank(k, 2, "attention");
    detail::require_same_shape(k, v, "attention");
    if (q.dim(1) != k.dim(1))
        throw DimensionError("attention: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
    const std::size_t n = q.dim(0), m = k.dim(0), c = q.dim(1);
    if (heads == 0 || c % heads) throw DimensionError("attention: channels not divisible by head count");
    if (mask && mask->shape != Shape{n, m})
        throw DimensionError("attention: mask " + shape_str(mask->shape) + " for scores [" + std::to_string(n) + "x" +
                             std::to_string(m) + "]");
    detail::check_finite(q.values(), "attention");
    detail::check_finite(k.values(), "attention");
    const std::size_t d = c / heads;
    const Scalar inv_sqrt = Scalar{1} / std::sqrt(static_cast<Scalar>(d));
    const auto ci = static_cast<Eigen::Index>(c);
    std::vector<Scalar> probs(heads * n * m);
    std::vector<Scalar> out(n * c);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        detail::ConstStridedMap qh(q.values().data() + hd * d, static_cast<Eigen::Index>(n),
                                   static_cast<Eigen::Index>(d), Eigen::OuterStride<>(ci));
        detail::ConstStridedMap kh(k.values().data() + hd * d, static_cast<Eigen::Index>(m),
                                   static_cast<Eigen::Index>(d), Eigen::OuterStride<>(ci));
        detail::ConstStridedMap vh(v.values().data() + hd * d, static_cast<Eigen::Index>(m),
                                   static_cast<Eigen::Index>(d), Eigen::OuterStride<>(ci));
        Scalar* p = probs.data() + hd * n * m;
        detail::MatMap pm(p, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
        pm.noalias() = (qh * kh.transpose()) * inv_sqrt;
        detail::softmax_rows(p, n, m, mask ? mask->data.data() : nullptr, "attention");
        detail::StridedMap oh(out.data() + hd * d, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d),
                              Eigen::OuterStride<>(ci));
        oh.noalias() = pm * vh;
    }
    if (detail::attention_trace) detail::attention_trace->records.push_back({heads, n, m, probs});
    return Tensor::make_result(
        Shape{n, c}, std::move(out), {&q, &k, &v},
        [n, m, c, d, heads, inv_sqrt, probs = std::move(probs)](detail::Node& self) {
            const auto ci = static_cast<Eigen::Index>(c);
            const auto ni = static_cast<Eigen::Index>(n), mi = static_cast<Eigen::Index>(m),
                       di = static_cast<Eigen::Index>(d);
            auto& qp = self.parents[0];
            auto& kp = self.parents[1];
            auto& vp = self.parents[2];
            Scalar* dq = detail::grad_of(qp);
            Scalar* dk = detail::grad_of(kp);
            Scalar* dv = detail::grad_of(vp);
            detail::RowMat dp(ni, mi), ds(ni, mi);
            for (std::size_t hd = 0; hd < heads; ++hd) {
                detail::ConstStridedMap doh(self.grad.data() + hd * d, ni, di, Eigen::OuterStride<>(ci));
                detail::ConstStridedMap qh(qp->data.data() + hd * d, ni, di, Eigen::OuterStride<>(ci));
                detail::ConstStridedMap kh(kp->data.data() + hd * d, mi, di, Eigen::OuterStride<>(ci));
                detail::ConstStridedMap vh(vp->data.data() + hd * d, mi, di, Eigen::OuterStride<>(ci));
                detail::ConstMatMap pm(probs.data() + hd * n * m, ni, mi);
                if (dv) {
                    detail::StridedMap g(dv + hd * d, mi, di, Eigen::OuterStride<>(ci));
                    g.noalias() += pm.transpose() * doh;
                }
                if (!dq && !dk) continue;
                dp.noalias() = doh * vh.transpose();
                ds.setZero();
                detail::softmax_rows_backward(pm.data(), dp.data(), ds.data(), n, m);
                ds *= inv_sqrt;
                if (dq) {
                    detail::StridedMap g(dq + hd * d, ni, di, Eigen::OuterStride<>(ci));
                    g.noalias() += ds * kh;
                }
                if (dk) {
                    detail::StridedMap g(dk + hd * d, mi, di, Eigen::OuterStride<>(ci));
                    g.noalias() += ds.transpose() * qh;
                }
            }
        });
}

}  // namespace onenip
