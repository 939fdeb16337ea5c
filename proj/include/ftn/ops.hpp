#pragma once

// Differentiable primitives recorded on a Tape.

#include "ftn/error.hpp"
#include "ftn/tape.hpp"
#include "ftn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ftn::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline ShapeError mismatch(const std::string& op, const Shape& a, const Shape& b) {
    return ShapeError(op + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T>
Var<T> emit(const std::string& op, std::vector<Var<T>> inputs, Tensor<T> value, BackwardFn<T> fn) {
    if (!value.all_finite()) throw NumericError(op + ": non-finite value in output");
    Tape<T>* tape = inputs.front().tape;
    return tape->record(op, std::move(inputs), std::move(value), std::move(fn));
}

/// Elementwise binary ops accept equal shapes, or a single-element rhs that
/// is broadcast.
template <typename T>
bool broadcast_rhs(const std::string& op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return false;
    if (b.size() == 1) return true;
    throw mismatch(op, a.shape(), b.shape());
}

template <typename T, typename F, typename D>
Var<T> unary(const std::string& op, Var<T> x, F f, D dfdx) {
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return emit<T>(op, {x}, std::move(out), [dfdx](const BackwardArgs<T>& a) {
        if (!a.inputs_grad[0]) return;
        const Tensor<T>& in = *a.inputs[0];
        Tensor<T>& g = *a.inputs_grad[0];
        for (std::size_t i = 0; i < in.size(); ++i) g[i] += a.grad_out[i] * dfdx(in[i], a.out[i]);
    });
}

} // namespace detail

template <typename T>
T sigmoid_scalar(T x) {
    // Split on sign so exp() never overflows.
    if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    const bool bc = detail::broadcast_rhs("add", a.value(), b.value());
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bc ? bv[0] : bv[i];
    return detail::emit<T>("add", {a, b}, std::move(out), [bc](const BackwardArgs<T>& g) {
        if (g.inputs_grad[0]) {
            for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*g.inputs_grad[0])[i] += g.grad_out[i];
        }
        if (g.inputs_grad[1]) {
            for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*g.inputs_grad[1])[bc ? 0 : i] += g.grad_out[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    const bool bc = detail::broadcast_rhs("sub", a.value(), b.value());
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bc ? bv[0] : bv[i];
    return detail::emit<T>("sub", {a, b}, std::move(out), [bc](const BackwardArgs<T>& g) {
        if (g.inputs_grad[0]) {
            for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*g.inputs_grad[0])[i] += g.grad_out[i];
        }
        if (g.inputs_grad[1]) {
            for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*g.inputs_grad[1])[bc ? 0 : i] -= g.grad_out[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    const bool bc = detail::broadcast_rhs("mul", a.value(), b.value());
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bc ? bv[0] : bv[i];
    return detail::emit<T>("mul", {a, b}, std::move(out), [bc](const BackwardArgs<T>& g) {
        const Tensor<T>& av = *g.inputs[0];
        const Tensor<T>& bv = *g.inputs[1];
        if (g.inputs_grad[0]) {
            for (std::size_t i = 0; i < g.grad_out.size(); ++i)
                (*g.inputs_grad[0])[i] += g.grad_out[i] * (bc ? bv[0] : bv[i]);
        }
        if (g.inputs_grad[1]) {
            for (std::size_t i = 0; i < g.grad_out.size(); ++i)
                (*g.inputs_grad[1])[bc ? 0 : i] += g.grad_out[i] * av[i];
        }
    });
}

/// Multiplication by a constant.
template <typename T>
Var<T> scale(Var<T> x, T c) {
    return detail::unary<T>("scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return detail::emit<T>("reshape", {x}, std::move(out), [](const BackwardArgs<T>& g) {
        if (!g.inputs_grad[0]) return;
        for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*g.inputs_grad[0])[i] += g.grad_out[i];
    });
}

/// [M,K] x [K,N] -> [M,N].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw detail::mismatch("matmul", av.shape(), bv.shape());
    }
    const auto m = static_cast<Eigen::Index>(av.dim(0));
    const auto k = static_cast<Eigen::Index>(av.dim(1));
    const auto n = static_cast<Eigen::Index>(bv.dim(1));
    Tensor<T> out(Shape{av.dim(0), bv.dim(1)});
    detail::MapMat<T>(out.ptr(), m, n).noalias() =
        detail::ConstMapMat<T>(av.ptr(), m, k) * detail::ConstMapMat<T>(bv.ptr(), k, n);
    return detail::emit<T>("matmul", {a, b}, std::move(out), [m, k, n](const BackwardArgs<T>& g) {
        detail::ConstMapMat<T> go(g.grad_out.ptr(), m, n);
        if (g.inputs_grad[0]) {
            detail::MapMat<T>(g.inputs_grad[0]->ptr(), m, k).noalias() +=
                go * detail::ConstMapMat<T>(g.inputs[1]->ptr(), k, n).transpose();
        }
        if (g.inputs_grad[1]) {
            detail::MapMat<T>(g.inputs_grad[1]->ptr(), k, n).noalias() +=
                detail::ConstMapMat<T>(g.inputs[0]->ptr(), m, k).transpose() * go;
        }
    });
}

/// Adds bias[C] along axis 1 of an [N,C] or [N,C,H,W] tensor.
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& bv = bias.value();
    if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
        throw detail::mismatch("add_channel_bias", xv.shape(), bv.shape());
    }
    const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
    Tensor<T> out = xv;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            T* row = out.ptr() + (s * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) row[i] += bv[ch];
        }
    return detail::emit<T>("add_channel_bias", {x, bias}, std::move(out), [n, c, inner](const BackwardArgs<T>& g) {
        if (g.inputs_grad[0]) {
            for (std::size_t i = 0; i < g.grad_out.size(); ++i) (*g.inputs_grad[0])[i] += g.grad_out[i];
        }
        if (g.inputs_grad[1]) {
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T* row = g.grad_out.ptr() + (s * c + ch) * inner;
                    T acc{0};
                    for (std::size_t i = 0; i < inner; ++i) acc += row[i];
                    (*g.inputs_grad[1])[ch] += acc;
                }
        }
    });
}

struct Conv2dGeometry {
    std::size_t channels, height, width;
    std::size_t kernel_h, kernel_w;
    std::size_t stride, pad;

    std::size_t out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
    std::size_t patch() const { return channels * kernel_h * kernel_w; }
};

/// Patch extraction: image [C,H,W] -> columns [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* image, const Conv2dGeometry& g, T* cols) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t x = 0; x < ow; ++x) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                            ix < static_cast<std::ptrdiff_t>(g.width);
                        row[y * ow + x] = inside ? image[(c * g.height + iy) * g.width + ix] : T{0};
                    }
                }
            }
}

/// Adjoint of im2col: scatters columns back, accumulating overlaps.
template <typename T>
void col2im(const T* cols, const Conv2dGeometry& g, T* image) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        image[(c * g.height + iy) * g.width + ix] += row[y * ow + x];
                    }
                }
            }
}

/// x[N,C,H,W] * w[O,C,kh,kw] -> [N,O,Ho,Wo]; zero padding, no bias.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride = 1, std::size_t pad = 0) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1)) {
        throw detail::mismatch("conv2d", xv.shape(), wv.shape());
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (xv.dim(2) + 2 * pad < wv.dim(2) || xv.dim(3) + 2 * pad < wv.dim(3)) {
        throw detail::mismatch("conv2d", xv.shape(), wv.shape());
    }
    const Conv2dGeometry geo{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3), stride, pad};
    const std::size_t n = xv.dim(0), o = wv.dim(0);
    const auto patch = static_cast<Eigen::Index>(geo.patch());
    const auto pixels = static_cast<Eigen::Index>(geo.out_h() * geo.out_w());
    const auto oc = static_cast<Eigen::Index>(o);

    Tensor<T> out(Shape{n, o, geo.out_h(), geo.out_w()});
    std::vector<T> cols(static_cast<std::size_t>(patch * pixels));
    detail::ConstMapMat<T> wm(wv.ptr(), oc, patch);
    for (std::size_t s = 0; s < n; ++s) {
        im2col(xv.ptr() + s * geo.channels * geo.height * geo.width, geo, cols.data());
        detail::MapMat<T>(out.ptr() + s * o * pixels, oc, pixels).noalias() =
            wm * detail::ConstMapMat<T>(cols.data(), patch, pixels);
    }
    return detail::emit<T>("conv2d", {x, w}, std::move(out), [geo, n, o, patch, pixels, oc](const BackwardArgs<T>& g) {
        const Tensor<T>& xv = *g.inputs[0];
        const Tensor<T>& wv = *g.inputs[1];
        const std::size_t image = geo.channels * geo.height * geo.width;
        std::vector<T> cols(static_cast<std::size_t>(patch * pixels));
        detail::ConstMapMat<T> wm(wv.ptr(), oc, patch);
        for (std::size_t s = 0; s < n; ++s) {
            detail::ConstMapMat<T> go(g.grad_out.ptr() + s * o * pixels, oc, pixels);
            if (g.inputs_grad[1]) {
                im2col(xv.ptr() + s * image, geo, cols.data());
                detail::MapMat<T>(g.inputs_grad[1]->ptr(), oc, patch).noalias() +=
                    go * detail::ConstMapMat<T>(cols.data(), patch, pixels).transpose();
            }
            if (g.inputs_grad[0]) {
                detail::MapMat<T>(cols.data(), patch, pixels).noalias() = wm.transpose() * go;
                col2im(cols.data(), geo, g.inputs_grad[0]->ptr() + s * image);
            }
        }
    });
}

/// Half-open range [begin, end) along `axis`.
template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Tensor<T>& xv = x.value();
    if (axis >= xv.rank() || begin >= end || end > xv.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for shape " + to_string(xv.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= xv.dim(d);
    for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.dim(d);
    const std::size_t len = xv.dim(axis), width = end - begin;
    Shape shape = xv.shape();
    shape[axis] = width;
    Tensor<T> out(shape);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xv.ptr() + (o * len + begin) * inner, width * inner, out.ptr() + o * width * inner);
    return detail::emit<T>("slice", {x}, std::move(out), [=](const BackwardArgs<T>& g) {
        if (!g.inputs_grad[0]) return;
        for (std::size_t o = 0; o < outer; ++o) {
            T* dst = g.inputs_grad[0]->ptr() + (o * len + begin) * inner;
            const T* src = g.grad_out.ptr() + o * width * inner;
            for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
        }
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = xs.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
    Shape shape = first;
    shape[axis] = 0;
    std::vector<std::size_t> widths;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        for (std::size_t d = 0; d < first.size(); ++d) {
            if (s.size() != first.size() || (d != axis && s[d] != first[d])) {
                throw detail::mismatch("concat", first, s);
            }
        }
        widths.push_back(s[axis]);
        shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    const std::size_t total = shape[axis];
    Tensor<T> out(shape);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const Tensor<T>& v = xs[k].value();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(v.ptr() + o * widths[k] * inner, widths[k] * inner, out.ptr() + (o * total + offset) * inner);
        offset += widths[k];
    }
    return detail::emit<T>("concat", xs, std::move(out), [=](const BackwardArgs<T>& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (g.inputs_grad[k]) {
                for (std::size_t o = 0; o < outer; ++o) {
                    const T* src = g.grad_out.ptr() + (o * total + off) * inner;
                    T* dst = g.inputs_grad[k]->ptr() + o * widths[k] * inner;
                    for (std::size_t i = 0; i < widths[k] * inner; ++i) dst[i] += src[i];
                }
            }
            off += widths[k];
        }
    });
}

template <typename T>
Var<T> reduce_sum(Var<T> x) {
    T acc{0};
    for (T v : x.value().data()) acc += v;
    return detail::emit<T>("reduce_sum", {x}, Tensor<T>::scalar(acc), [](const BackwardArgs<T>& g) {
        if (!g.inputs_grad[0]) return;
        for (auto& v : g.inputs_grad[0]->data()) v += g.grad_out[0];
    });
}

template <typename T>
Var<T> reduce_mean(Var<T> x) {
    const T n = static_cast<T>(x.value().size());
    T acc{0};
    for (T v : x.value().data()) acc += v;
    return detail::emit<T>("reduce_mean", {x}, Tensor<T>::scalar(acc / n), [n](const BackwardArgs<T>& g) {
        if (!g.inputs_grad[0]) return;
        for (auto& v : g.inputs_grad[0]->data()) v += g.grad_out[0] / n;
    });
}

/// Global maximum; the gradient goes to the first (lowest-index) maximiser.
template <typename T>
Var<T> reduce_max(Var<T> x) {
    const auto data = x.value().data();
    const std::size_t arg = static_cast<std::size_t>(std::max_element(data.begin(), data.end()) - data.begin());
    return detail::emit<T>("reduce_max", {x}, Tensor<T>::scalar(data[arg]), [arg](const BackwardArgs<T>& g) {
        if (g.inputs_grad[0]) (*g.inputs_grad[0])[arg] += g.grad_out[0];
    });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(Var<T> x) {
    return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

/// Subgradient at 0 is the negative-side slope, i.e. 0.
template <typename T>
Var<T> relu(Var<T> x) {
    return detail::unary<T>(
        "relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

/// Subgradient at 0 is alpha.
template <typename T>
Var<T> leaky_relu(Var<T> x, T alpha) {
    return detail::unary<T>(
        "leaky_relu", x, [alpha](T v) { return v > T{0} ? v : alpha * v; },
        [alpha](T v, T) { return v > T{0} ? T{1} : alpha; });
}

/// Subgradient at 0 is 0.
template <typename T>
Var<T> abs(Var<T> x) {
    return detail::unary<T>(
        "abs", x, [](T v) { return std::abs(v); },
        [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> square(Var<T> x) {
    return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
void check_pool_geometry(const std::string& op, const Shape& s, std::size_t k, std::size_t stride) {
    if (k == 0 || stride == 0) throw ShapeError(op + ": region size and stride must be positive");
    if (s.size() != 4) throw ShapeError(op + ": expected [N,C,H,W], got " + to_string(s));
    if (s[2] < k || s[3] < k || (s[2] - k) % stride != 0 || (s[3] - k) % stride != 0) {
        throw ShapeError(op + ": " + std::to_string(k) + "x" + std::to_string(k) + " regions with stride " +
                         std::to_string(stride) + " do not tile " + to_string(s));
    }
}

/// k x k max pooling; ties resolve to the lowest row-major index in the region.
template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t k, std::size_t stride) {
    const Tensor<T>& xv = x.value();
    check_pool_geometry<T>("max_pool2d", xv.shape(), k, stride);
    const std::size_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    Tensor<T> out(Shape{xv.dim(0), xv.dim(1), oh, ow});
    std::vector<std::size_t> arg(out.size());
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = (p * h + i * stride) * w + j * stride;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t idx = (p * h + i * stride + dy) * w + j * stride + dx;
                        if (xv[idx] > xv[best]) best = idx;
                    }
                const std::size_t o = (p * oh + i) * ow + j;
                out[o] = xv[best];
                arg[o] = best;
            }
    return detail::emit<T>("max_pool2d", {x}, std::move(out), [arg = std::move(arg)](const BackwardArgs<T>& g) {
        if (!g.inputs_grad[0]) return;
        for (std::size_t o = 0; o < arg.size(); ++o) (*g.inputs_grad[0])[arg[o]] += g.grad_out[o];
    });
}

template <typename T>
Var<T> avg_pool2d(Var<T> x, std::size_t k, std::size_t stride) {
    const Tensor<T>& xv = x.value();
    check_pool_geometry<T>("avg_pool2d", xv.shape(), k, stride);
    const std::size_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    const T inv = T{1} / static_cast<T>(k * k);
    Tensor<T> out(Shape{xv.dim(0), xv.dim(1), oh, ow});
    for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                T acc{0};
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) acc += xv[(p * h + i * stride + dy) * w + j * stride + dx];
                out[(p * oh + i) * ow + j] = acc * inv;
            }
    return detail::emit<T>("avg_pool2d", {x}, std::move(out), [=](const BackwardArgs<T>& g) {
        if (!g.inputs_grad[0]) return;
        for (std::size_t p = 0; p < nc; ++p)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    const T go = g.grad_out[(p * oh + i) * ow + j] * inv;
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx)
                            (*g.inputs_grad[0])[(p * h + i * stride + dy) * w + j * stride + dx] += go;
                }
    });
}

/// Row-wise softmax of [B,K] logits; not differentiable, used for reporting.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    if (logits.rank() != 2) throw ShapeError("softmax: expected [B,K], got " + to_string(logits.shape()));
    const std::size_t b = logits.dim(0), k = logits.dim(1);
    Tensor<T> out(logits.shape());
    for (std::size_t r = 0; r < b; ++r) {
        const T* row = logits.ptr() + r * k;
        const T mx = *std::max_element(row, row + k);
        T z{0};
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = std::exp(row[j] - mx) / z;
    }
    return out;
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> softmax_xent(Var<T> logits, std::span<const int> labels) {
    const Tensor<T>& lv = logits.value();
    if (lv.rank() != 2 || labels.size() != lv.dim(0)) {
        throw ShapeError("softmax_xent: logits " + to_string(lv.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
    }
    const std::size_t b = lv.dim(0), k = lv.dim(1);
    for (std::size_t r = 0; r < b; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
            throw DataError("softmax_xent: label " + std::to_string(labels[r]) + " at row " + std::to_string(r) +
                            " outside [0," + std::to_string(k) + ")");
        }
    }
    Tensor<T> probs = softmax(lv);
    T loss{0};
    for (std::size_t r = 0; r < b; ++r) {
        const T* row = lv.ptr() + r * k;
        const T mx = *std::max_element(row, row + k);
        T z{0};
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        loss += std::log(z) + mx - row[labels[r]];
    }
    loss /= static_cast<T>(b);
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::emit<T>("softmax_xent", {logits}, Tensor<T>::scalar(loss),
                           [probs = std::move(probs), lab = std::move(lab), b, k](const BackwardArgs<T>& g) {
                               if (!g.inputs_grad[0]) return;
                               const T s = g.grad_out[0] / static_cast<T>(b);
                               for (std::size_t r = 0; r < b; ++r)
                                   for (std::size_t j = 0; j < k; ++j) {
                                       const T target = static_cast<std::size_t>(lab[r]) == j ? T{1} : T{0};
                                       (*g.inputs_grad[0])[r * k + j] += s * (probs[r * k + j] - target);
                                   }
                           });
}

/// mean |pred - target|.
template <typename T>
Var<T> mae(Var<T> pred, Var<T> target) {
    if (pred.shape() != target.shape()) throw detail::mismatch("mae", pred.shape(), target.shape());
    return reduce_mean(abs(sub(pred, target)));
}

/// Per-channel statistics of an [N,C] or [N,C,H,W] tensor.
template <typename T>
struct ChannelStats {
    std::vector<T> mean;
    std::vector<T> var; ///< biased
};

/// Batch normalisation using the statistics of the current batch. The batch
/// statistics are written to `stats` so the caller can update running
/// averages.
template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps, ChannelStats<T>* stats = nullptr) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() < 2 || gamma.value().size() != xv.dim(1) || beta.value().size() != xv.dim(1)) {
        throw detail::mismatch("batch_norm", xv.shape(), gamma.shape());
    }
    const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
    const T count = static_cast<T>(n * inner);
    std::vector<T> mean(c, T{0}), var(c, T{0}), inv_std(c);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* row = xv.ptr() + (s * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) mean[ch] += row[i];
        }
    for (auto& m : mean) m /= count;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* row = xv.ptr() + (s * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) var[ch] += (row[i] - mean[ch]) * (row[i] - mean[ch]);
        }
    for (std::size_t ch = 0; ch < c; ++ch) {
        var[ch] /= count;
        inv_std[ch] = T{1} / std::sqrt(var[ch] + eps);
    }
    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    const Tensor<T>& gv = gamma.value();
    const Tensor<T>& bv = beta.value();
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (s * c + ch) * inner + i;
                xhat[idx] = (xv[idx] - mean[ch]) * inv_std[ch];
                out[idx] = gv[ch] * xhat[idx] + bv[ch];
            }
    if (stats) *stats = ChannelStats<T>{mean, var};
    return detail::emit<T>(
        "batch_norm", {x, gamma, beta}, std::move(out),
        [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, inner, count](const BackwardArgs<T>& g) {
            const Tensor<T>& gv = *g.inputs[1];
            std::vector<T> sum_dy(c, T{0}), sum_dy_xhat(c, T{0});
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (s * c + ch) * inner + i;
                        sum_dy[ch] += g.grad_out[idx];
                        sum_dy_xhat[ch] += g.grad_out[idx] * xhat[idx];
                    }
            if (g.inputs_grad[1])
                for (std::size_t ch = 0; ch < c; ++ch) (*g.inputs_grad[1])[ch] += sum_dy_xhat[ch];
            if (g.inputs_grad[2])
                for (std::size_t ch = 0; ch < c; ++ch) (*g.inputs_grad[2])[ch] += sum_dy[ch];
            if (g.inputs_grad[0]) {
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const T k = gv[ch] * inv_std[ch];
                        const T mdy = sum_dy[ch] / count, mdyx = sum_dy_xhat[ch] / count;
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t idx = (s * c + ch) * inner + i;
                            (*g.inputs_grad[0])[idx] += k * (g.grad_out[idx] - mdy - xhat[idx] * mdyx);
                        }
                    }
            }
        });
}

/// Batch normalisation with frozen statistics: an affine map per channel.
template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> gamma, Var<T> beta, std::span<const T> mean, std::span<const T> var, T eps) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() < 2 || gamma.value().size() != xv.dim(1) || mean.size() != xv.dim(1)) {
        throw detail::mismatch("batch_norm", xv.shape(), gamma.shape());
    }
    const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
    std::vector<T> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T{1} / std::sqrt(var[ch] + eps);
    std::vector<T> mu(mean.begin(), mean.end());
    Tensor<T> out(xv.shape());
    const Tensor<T>& gv = gamma.value();
    const Tensor<T>& bv = beta.value();
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (s * c + ch) * inner + i;
                out[idx] = gv[ch] * (xv[idx] - mu[ch]) * inv_std[ch] + bv[ch];
            }
    return detail::emit<T>(
        "batch_norm_eval", {x, gamma, beta}, std::move(out),
        [mu = std::move(mu), inv_std = std::move(inv_std), n, c, inner](const BackwardArgs<T>& g) {
            const Tensor<T>& xv = *g.inputs[0];
            const Tensor<T>& gv = *g.inputs[1];
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (s * c + ch) * inner + i;
                        const T dy = g.grad_out[idx];
                        const T xh = (xv[idx] - mu[ch]) * inv_std[ch];
                        if (g.inputs_grad[0]) (*g.inputs_grad[0])[idx] += dy * gv[ch] * inv_std[ch];
                        if (g.inputs_grad[1]) (*g.inputs_grad[1])[ch] += dy * xh;
                        if (g.inputs_grad[2]) (*g.inputs_grad[2])[ch] += dy;
                    }
        });
}

} // namespace ftn::ops
