#pragma once

// Learnable pooling with a scalar LSTM unit.
//
// Each k x k region of every channel is scanned row-major into a sequence of
// k*k scalars. A single LSTM neuron (one input, one hidden unit) consumes the
// sequence starting from (h, c) = (0, 0); its final hidden state is the
// pooled value. The gates use the logistic sigmoid and the input/output
// modulations use a configurable activation psi:
//
//   i = sigmoid(w_i x + r_i h + b_i)      g  = psi(w_g x + r_g h + b_g)
//   f = sigmoid(w_f x + r_f h + b_f)      c' = i g + f c
//   o = sigmoid(w_o x + r_o h + b_o)      h' = o psi(c')
//
// With psi = relu, zero initial state and non-negative inputs, w_g <= 0 makes
// the unit output 0 forever, so training keeps w_g > 0 and b_g >= 0 by
// projecting after every optimizer step.

#include "ftn/error.hpp"
#include "ftn/ops.hpp"
#include "ftn/random.hpp"
#include "ftn/tape.hpp"
#include "ftn/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ftn {

enum class PoolSharing { per_region, per_layer, global_shared };

inline std::string_view to_string(PoolSharing s) {
    switch (s) {
    case PoolSharing::per_region: return "per_region";
    case PoolSharing::per_layer: return "per_layer";
    case PoolSharing::global_shared: return "global_shared";
    }
    return "?";
}

inline PoolSharing parse_pool_sharing(std::string_view s) {
    if (s == "per_region") return PoolSharing::per_region;
    if (s == "per_layer") return PoolSharing::per_layer;
    if (s == "global_shared" || s == "shared") return PoolSharing::global_shared;
    throw ConfigError("unknown pool sharing mode '" + std::string(s) + "'");
}

/// Activation psi used by the input and output modulations.
struct Modulation {
    enum class Kind { tanh, relu, leaky_relu };

    Kind kind = Kind::relu;
    double alpha = 0.0; ///< leakiness, leaky_relu only

    static Modulation relu() { return {Kind::relu, 0.0}; }
    static Modulation tanh() { return {Kind::tanh, 0.0}; }
    static Modulation leaky_relu(double a) { return {Kind::leaky_relu, a}; }

    template <typename T>
    T apply(T z) const {
        switch (kind) {
        case Kind::tanh: return std::tanh(z);
        case Kind::relu: return z > T{0} ? z : T{0};
        case Kind::leaky_relu: return z > T{0} ? z : static_cast<T>(alpha) * z;
        }
        return z;
    }

    /// d psi / dz at pre-activation z; at z == 0 the negative-side slope.
    template <typename T>
    T derivative(T z) const {
        switch (kind) {
        case Kind::tanh: {
            const T t = std::tanh(z);
            return T{1} - t * t;
        }
        case Kind::relu: return z > T{0} ? T{1} : T{0};
        case Kind::leaky_relu: return z > T{0} ? T{1} : static_cast<T>(alpha);
        }
        return T{1};
    }

    std::string name() const {
        switch (kind) {
        case Kind::tanh: return "tanh";
        case Kind::relu: return "relu";
        case Kind::leaky_relu: return "leaky_relu";
        }
        return "?";
    }

    friend bool operator==(const Modulation&, const Modulation&) = default;
};

inline Modulation parse_modulation(std::string_view name, double alpha = 0.0) {
    if (name == "relu") return Modulation::relu();
    if (name == "tanh") return Modulation::tanh();
    if (name == "leaky_relu") return Modulation::leaky_relu(alpha);
    throw ConfigError("unknown modulation activation '" + std::string(name) + "'");
}

/// Index of each scalar in the flat 12-vector layout.
enum LstmParam : std::size_t {
    w_i, r_i, b_i,
    w_f, r_f, b_f,
    w_o, r_o, b_o,
    w_g, r_g, b_g,
};

inline constexpr std::size_t kLstmParamCount = 12;

inline constexpr std::array<std::string_view, kLstmParamCount> kLstmParamNames = {
    "w_i", "r_i", "b_i", "w_f", "r_f", "b_f", "w_o", "r_o", "b_o", "w_g", "r_g", "b_g"};

/// The twelve trainable scalars of one pooling unit: input weight, recurrent
/// weight and bias for the input/forget/output gates and input modulation.
template <typename T>
struct LstmPoolParams {
    std::array<T, kLstmParamCount> v{};

    T& operator[](LstmParam p) { return v[p]; }
    T operator[](LstmParam p) const { return v[p]; }

    static LstmPoolParams from_span(std::span<const T> s) {
        if (s.size() != kLstmParamCount) {
            throw ShapeError("lstm params: expected 12 values, got " + std::to_string(s.size()));
        }
        LstmPoolParams p;
        std::copy(s.begin(), s.end(), p.v.begin());
        return p;
    }

    Tensor<T> to_tensor() const { return Tensor<T>(Shape{kLstmParamCount}, std::vector<T>(v.begin(), v.end())); }

    friend bool operator==(const LstmPoolParams&, const LstmPoolParams&) = default;
};

template <typename T>
struct LstmState {
    T h{0};
    T c{0};
};

/// Every intermediate of one step, kept for back-propagation through time.
template <typename T>
struct LstmStepTrace {
    T x, h_prev, c_prev;
    T i, f, o;
    T g_pre, g;
    T c, h;
};

template <typename T>
LstmStepTrace<T> lstm_step_trace(const LstmPoolParams<T>& p, const Modulation& psi, T x, LstmState<T> s) {
    if (!std::isfinite(x)) throw NumericError("lstm_step: non-finite input");
    auto gate = [&](LstmParam w, LstmParam r, LstmParam b, const char* name) {
        const T a = p[w] * x + p[r] * s.h + p[b];
        if (!std::isfinite(a)) throw NumericError(std::string("lstm_step: non-finite ") + name);
        return a;
    };
    LstmStepTrace<T> t{};
    t.x = x;
    t.h_prev = s.h;
    t.c_prev = s.c;
    t.i = ops::sigmoid_scalar(gate(w_i, r_i, b_i, "input gate"));
    t.f = ops::sigmoid_scalar(gate(w_f, r_f, b_f, "forget gate"));
    t.o = ops::sigmoid_scalar(gate(w_o, r_o, b_o, "output gate"));
    t.g_pre = gate(w_g, r_g, b_g, "input modulation");
    t.g = psi.apply(t.g_pre);
    t.c = t.i * t.g + t.f * s.c;
    if (!std::isfinite(t.c)) throw NumericError("lstm_step: non-finite cell state");
    t.h = t.o * psi.apply(t.c);
    if (!std::isfinite(t.h)) throw NumericError("lstm_step: non-finite output modulation");
    return t;
}

template <typename T>
LstmState<T> lstm_step(const LstmPoolParams<T>& p, const Modulation& psi, T x, LstmState<T> s) {
    const auto t = lstm_step_trace(p, psi, x, s);
    return {t.h, t.c};
}

/// Final hidden state after consuming `seq` from the zero state.
template <typename T>
T lstm_sequence(const LstmPoolParams<T>& p, const Modulation& psi, std::span<const T> seq) {
    LstmState<T> s;
    for (T x : seq) s = lstm_step(p, psi, x, s);
    return s.h;
}

/// Gradients of one step with respect to its parameters, input and incoming
/// state.
template <typename T>
struct LstmStepGrad {
    std::array<T, kLstmParamCount> dparams{};
    T dx{0}, dh_prev{0}, dc_prev{0};
};

/// Backward rule of one step, given dL/dh and dL/dc at its outputs.
template <typename T>
LstmStepGrad<T> lstm_step_backward(const LstmPoolParams<T>& p, const Modulation& psi, const LstmStepTrace<T>& st, T dh,
                                   T dc) {
    dc += dh * st.o * psi.derivative(st.c);
    const T a_i = dc * st.g * st.i * (T{1} - st.i);
    const T a_f = dc * st.c_prev * st.f * (T{1} - st.f);
    const T a_o = dh * psi.apply(st.c) * st.o * (T{1} - st.o);
    const T a_g = dc * st.i * psi.derivative(st.g_pre);

    LstmStepGrad<T> g;
    g.dparams[w_i] = a_i * st.x;
    g.dparams[r_i] = a_i * st.h_prev;
    g.dparams[b_i] = a_i;
    g.dparams[w_f] = a_f * st.x;
    g.dparams[r_f] = a_f * st.h_prev;
    g.dparams[b_f] = a_f;
    g.dparams[w_o] = a_o * st.x;
    g.dparams[r_o] = a_o * st.h_prev;
    g.dparams[b_o] = a_o;
    g.dparams[w_g] = a_g * st.x;
    g.dparams[r_g] = a_g * st.h_prev;
    g.dparams[b_g] = a_g;
    g.dx = a_i * p[w_i] + a_f * p[w_f] + a_o * p[w_o] + a_g * p[w_g];
    g.dh_prev = a_i * p[r_i] + a_f * p[r_f] + a_o * p[r_o] + a_g * p[r_g];
    g.dc_prev = dc * st.f;
    return g;
}

/// Back-propagation through time for one sequence. Given dL/dh at the last
/// step, accumulates dL/dparams into `dparams` and writes dL/dx_t into `dseq`
/// (which may be empty when input gradients are not needed).
template <typename T>
void lstm_sequence_backward(const LstmPoolParams<T>& p, const Modulation& psi, std::span<const T> seq, T dh_out,
                            std::span<T> dparams, std::span<T> dseq, std::vector<LstmStepTrace<T>>& scratch) {
    scratch.clear();
    LstmState<T> s;
    for (T x : seq) {
        scratch.push_back(lstm_step_trace(p, psi, x, s));
        s = {scratch.back().h, scratch.back().c};
    }
    T dh = dh_out;
    T dc{0};
    for (std::size_t t = scratch.size(); t-- > 0;) {
        const auto g = lstm_step_backward(p, psi, scratch[t], dh, dc);
        for (std::size_t k = 0; k < kLstmParamCount; ++k) dparams[k] += g.dparams[k];
        if (!dseq.empty()) dseq[t] = g.dx;
        dh = g.dh_prev;
        dc = g.dc_prev;
    }
}

/// Row-major scan of the k x k region whose top-left corner is (y0, x0) in
/// the [H,W] plane at `plane`.
template <typename T>
void scan_region(const T* plane, std::size_t width, std::size_t y0, std::size_t x0, std::size_t k, T* seq) {
    for (std::size_t dy = 0; dy < k; ++dy)
        for (std::size_t dx = 0; dx < k; ++dx) seq[dy * k + dx] = plane[(y0 + dy) * width + x0 + dx];
}

template <typename T>
std::vector<T> scan_region(const Tensor<T>& plane_hw, std::size_t y0, std::size_t x0, std::size_t k) {
    if (plane_hw.rank() != 2 || y0 + k > plane_hw.dim(0) || x0 + k > plane_hw.dim(1)) {
        throw ShapeError("scan_region: region out of bounds for " + to_string(plane_hw.shape()));
    }
    std::vector<T> seq(k * k);
    scan_region(plane_hw.ptr(), plane_hw.dim(1), y0, x0, k, seq.data());
    return seq;
}

struct PoolGeometry {
    std::size_t batch, channels, height, width, k, stride;

    std::size_t out_h() const { return (height - k) / stride + 1; }
    std::size_t out_w() const { return (width - k) / stride + 1; }
    std::size_t regions() const { return out_h() * out_w(); }
};

inline PoolGeometry lstm_pool_geometry(const Shape& s, std::size_t k, std::size_t stride) {
    if (k == 0 || stride == 0) throw ShapeError("lstm_pool: region size and stride must be positive");
    if (s.size() == 3) return lstm_pool_geometry(Shape{1, s[0], s[1], s[2]}, k, stride);
    ops::check_pool_geometry<double>("lstm_pool", s, k, stride);
    return {s[0], s[1], s[2], s[3], k, stride};
}

namespace detail {

/// Number of unit parameter rows a params tensor holds: [12] is one unit
/// shared by every region, [R,12] is one unit per spatial region.
inline std::size_t unit_rows(const Shape& params, const PoolGeometry& g) {
    if (params.size() == 1 && params[0] == kLstmParamCount) return 1;
    if (params.size() == 2 && params[1] == kLstmParamCount && params[0] == g.regions()) return params[0];
    throw ShapeError("lstm_pool: params shape " + to_string(params) + " fits neither [12] nor [" +
                     std::to_string(g.regions()) + ",12]");
}

} // namespace detail

/// Plain (untaped) pooling of a [C,H,W] or [N,C,H,W] tensor. `params` holds
/// either one unit or one unit per output region.
template <typename T>
Tensor<T> pool_forward(const Tensor<T>& feat, std::size_t k, std::size_t stride,
                       std::span<const LstmPoolParams<T>> params, const Modulation& psi) {
    const PoolGeometry g = lstm_pool_geometry(feat.shape(), k, stride);
    if (params.size() != 1 && params.size() != g.regions()) {
        throw ShapeError("pool_forward: " + std::to_string(params.size()) + " units for " +
                         std::to_string(g.regions()) + " regions");
    }
    const std::size_t oh = g.out_h(), ow = g.out_w();
    Shape out_shape = feat.rank() == 3 ? Shape{g.channels, oh, ow} : Shape{g.batch, g.channels, oh, ow};
    Tensor<T> out(out_shape);
    std::vector<T> seq(k * k);
    for (std::size_t p = 0; p < g.batch * g.channels; ++p) {
        const T* plane = feat.ptr() + p * g.height * g.width;
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                scan_region(plane, g.width, i * stride, j * stride, k, seq.data());
                const auto& unit = params.size() == 1 ? params[0] : params[i * ow + j];
                out[(p * oh + i) * ow + j] = lstm_sequence<T>(unit, psi, seq);
            }
    }
    return out;
}

template <typename T>
Tensor<T> pool_forward(const Tensor<T>& feat, std::size_t k, std::size_t stride, const LstmPoolParams<T>& params,
                       const Modulation& psi) {
    return pool_forward<T>(feat, k, stride, std::span<const LstmPoolParams<T>>(&params, 1), psi);
}

/// Taped pooling: x [N,C,H,W], params [12] or [regions,12]. The backward
/// rule runs BPTT per region and sums parameter gradients over every region
/// and channel sharing a unit, in a fixed order.
template <typename T>
Var<T> lstm_pool2d(Var<T> x, Var<T> params, std::size_t k, std::size_t stride, Modulation psi) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("lstm_pool: expected [N,C,H,W], got " + to_string(xv.shape()));
    const PoolGeometry g = lstm_pool_geometry(xv.shape(), k, stride);
    const std::size_t rows = detail::unit_rows(params.shape(), g);

    auto units = [rows](const Tensor<T>& pv) {
        std::vector<LstmPoolParams<T>> u(rows);
        for (std::size_t r = 0; r < rows; ++r)
            u[r] = LstmPoolParams<T>::from_span(std::span<const T>(pv.ptr() + r * kLstmParamCount, kLstmParamCount));
        return u;
    };
    const auto unit_list = units(params.value());
    Tensor<T> out = pool_forward<T>(xv, k, stride, std::span<const LstmPoolParams<T>>(unit_list), psi);

    return ops::detail::emit<T>(
        "lstm_pool", {x, params}, std::move(out), [g, rows, psi, units](const BackwardArgs<T>& a) {
            const Tensor<T>& xv = *a.inputs[0];
            const auto unit_list = units(*a.inputs[1]);
            const std::size_t oh = g.out_h(), ow = g.out_w(), len = g.k * g.k;
            std::vector<T> seq(len), dseq(len);
            std::vector<LstmStepTrace<T>> scratch;
            std::vector<T> dparams(rows * kLstmParamCount, T{0});
            const bool want_x = a.inputs_grad[0] != nullptr;
            for (std::size_t p = 0; p < g.batch * g.channels; ++p) {
                const T* plane = xv.ptr() + p * g.height * g.width;
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const T go = a.grad_out[(p * oh + i) * ow + j];
                        if (go == T{0}) continue;
                        const std::size_t r = rows == 1 ? 0 : i * ow + j;
                        scan_region(plane, g.width, i * g.stride, j * g.stride, g.k, seq.data());
                        lstm_sequence_backward<T>(unit_list[r], psi, seq, go,
                                                  std::span<T>(dparams.data() + r * kLstmParamCount, kLstmParamCount),
                                                  want_x ? std::span<T>(dseq) : std::span<T>(), scratch);
                        if (want_x) {
                            T* dplane = a.inputs_grad[0]->ptr() + p * g.height * g.width;
                            for (std::size_t dy = 0; dy < g.k; ++dy)
                                for (std::size_t dx = 0; dx < g.k; ++dx)
                                    dplane[(i * g.stride + dy) * g.width + j * g.stride + dx] += dseq[dy * g.k + dx];
                        }
                    }
            }
            if (a.inputs_grad[1]) {
                for (std::size_t q = 0; q < dparams.size(); ++q) (*a.inputs_grad[1])[q] += dparams[q];
            }
        });
}

/// Projection onto the feasible set: w_g >= eps, b_g >= 0; other scalars are
/// untouched.
template <typename T>
LstmPoolParams<T> project_constraints(LstmPoolParams<T> p, T eps = T(1e-6)) {
    p[w_g] = std::max(p[w_g], eps);
    p[b_g] = std::max(p[b_g], T{0});
    return p;
}

/// In-place projection of a params tensor holding one or more units.
template <typename T>
void project_constraints(Tensor<T>& units, T eps = T(1e-6)) {
    if (units.size() % kLstmParamCount != 0) {
        throw ShapeError("project_constraints: " + to_string(units.shape()) + " is not a list of units");
    }
    for (std::size_t base = 0; base < units.size(); base += kLstmParamCount) {
        units[base + w_g] = std::max(units[base + w_g], eps);
        units[base + b_g] = std::max(units[base + b_g], T{0});
    }
}

/// Gate weights and biases ~ U(-0.1, 0.1), forget bias 1, w_g ~ U(0.25, 0.75),
/// b_g = 0.
template <typename T>
LstmPoolParams<T> init_lstm_pool_params(Rng& rng) {
    LstmPoolParams<T> p;
    for (auto& v : p.v) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    p[b_f] = T{1};
    p[w_g] = static_cast<T>(rng.uniform(0.25, 0.75));
    p[b_g] = T{0};
    return p;
}

template <typename T>
T max_pool_oracle(std::span<const T> region) {
    if (region.empty()) throw ShapeError("max_pool_oracle: empty region");
    return *std::max_element(region.begin(), region.end());
}

template <typename T>
T avg_pool_oracle(std::span<const T> region) {
    if (region.empty()) throw ShapeError("avg_pool_oracle: empty region");
    T acc{0};
    for (T v : region) acc += v;
    return acc / static_cast<T>(region.size());
}

} // namespace ftn
