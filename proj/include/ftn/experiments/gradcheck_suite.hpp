#pragma once

// Finite-difference checks of the hand-written backward rules: a single
// LSTM step (parameters, input and incoming state), taped pooling over a
// [2,4,4] input, and a small end-to-end network.

#include "ftn/gradcheck.hpp"
#include "ftn/lstm_pool.hpp"
#include "ftn/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace ftn::exp {

struct GradCheckCase {
    std::string name;
    double max_rel_error = 0;
    double rtol = 0;
    std::size_t points = 0;
    bool passed() const { return max_rel_error <= rtol; }
};

namespace detail {

inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Parameters whose modulation pre-activation stays clear of the ReLU kink
/// for the non-negative inputs used below.
inline LstmPoolParams<double> check_params(Rng& rng) {
    LstmPoolParams<double> p;
    for (auto& v : p.v) v = rng.uniform(-0.8, 0.8);
    p[w_g] = rng.uniform(0.3, 0.9);
    p[r_g] = rng.uniform(0.05, 0.3);
    p[b_g] = rng.uniform(0.1, 0.3);
    return p;
}

inline Tensor<double> uniform_tensor(Rng& rng, const Shape& s, double lo, double hi) {
    Tensor<double> t(s);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

} // namespace detail

/// One step: L = a h' + b c' with random a, b; all 12 parameters, x, h, c.
inline GradCheckCase check_lstm_step(std::uint64_t seed, std::size_t points = 100, double rtol = 1e-4) {
    Rng rng(seed);
    GradCheckCase out{"lstm_step", 0, rtol, 0};
    for (auto psi : {Modulation::relu(), Modulation::tanh(), Modulation::leaky_relu(0.3)}) {
        for (std::size_t n = 0; n < points; ++n) {
            auto p = detail::check_params(rng);
            const double x = rng.uniform(0.0, 2.0), h = rng.uniform(0.0, 1.0), c = rng.uniform(0.1, 1.5);
            const double a = rng.uniform(-1.0, 1.0), b = rng.uniform(-1.0, 1.0);
            auto loss = [&](const LstmPoolParams<double>& q, double xx, double hh, double cc) {
                const auto s = lstm_step(q, psi, xx, {hh, cc});
                return a * s.h + b * s.c;
            };
            const auto g = lstm_step_backward(p, psi, lstm_step_trace(p, psi, x, {h, c}), a, b);
            auto central = [](auto&& f, double v) {
                const double step = 1e-5 * std::max(1.0, std::abs(v));
                return (f(v + step) - f(v - step)) / (2 * step);
            };
            for (std::size_t k = 0; k < kLstmParamCount; ++k) {
                const double num = central(
                    [&](double v) {
                        auto q = p;
                        q[static_cast<LstmParam>(k)] = v;
                        return loss(q, x, h, c);
                    },
                    p[static_cast<LstmParam>(k)]);
                out.max_rel_error = std::max(out.max_rel_error, detail::rel_error(g.dparams[k], num));
            }
            out.max_rel_error = std::max(out.max_rel_error, detail::rel_error(g.dx, central([&](double v) { return loss(p, v, h, c); }, x)));
            out.max_rel_error = std::max(out.max_rel_error, detail::rel_error(g.dh_prev, central([&](double v) { return loss(p, x, v, c); }, h)));
            out.max_rel_error = std::max(out.max_rel_error, detail::rel_error(g.dc_prev, central([&](double v) { return loss(p, x, h, v); }, c)));
            ++out.points;
        }
    }
    return out;
}

/// Taped pooling of a [1,2,4,4] input with 2x2 regions: gradients with
/// respect to the unit and to the input.
inline GradCheckCase check_pool_forward(std::uint64_t seed, std::size_t points = 10, double rtol = 1e-4) {
    Rng rng(seed);
    GradCheckCase out{"pool_forward", 0, rtol, 0};
    for (auto psi : {Modulation::relu(), Modulation::tanh(), Modulation::leaky_relu(0.3)}) {
        for (std::size_t n = 0; n < points; ++n) {
            const auto feat = detail::uniform_tensor(rng, {1, 2, 4, 4}, 0.0, 2.0);
            const auto unit = detail::check_params(rng).to_tensor();
            const auto weights = detail::uniform_tensor(rng, {1, 2, 2, 2}, -1.0, 1.0);
            auto objective = [&](Tape<double>& t, Var<double> y) { return ops::reduce_sum(ops::mul(y, t.constant(weights))); };
            const auto wrt_params = grad_check(
                [&](Tape<double>& t, Var<double> p) { return objective(t, lstm_pool2d(t.constant(feat), p, 2, 2, psi)); },
                unit, 1e-3, rtol);
            const auto wrt_input = grad_check(
                [&](Tape<double>& t, Var<double> x) { return objective(t, lstm_pool2d(x, t.constant(unit), 2, 2, psi)); },
                feat, 1e-3, rtol);
            out.max_rel_error = std::max({out.max_rel_error, wrt_params.max_rel_error, wrt_input.max_rel_error});
            ++out.points;
        }
    }
    return out;
}

/// conv -> tanh -> lstm pool -> fc -> softmax cross-entropy on a [2,1,4,4]
/// batch; every trainable parameter.
inline GradCheckCase check_end_to_end(std::uint64_t seed, std::size_t points = 20, double rtol = 1e-3) {
    NetworkSpec s;
    s.input = {1, 4, 4};
    s.layers = {Conv2dLayer{2, 3, 1, 1}, ActivationLayer{ActivationKind::tanh, 0},
                PoolLayer{PoolKind::lstm, 2, 2, PoolSharing::per_layer, Modulation::tanh()}, FcLayer{3},
                SoftmaxXentLayer{3}};
    const int labels[] = {0, 2};
    GradCheckCase out{"end_to_end", 0, rtol, 0};
    Rng rng(seed);
    for (std::size_t n = 0; n < points; ++n) {
        Model<double> m(s, rng.next());
        const auto x = detail::uniform_tensor(rng, {2, 1, 4, 4}, -1.0, 1.0);
        auto loss_of = [&] {
            Tape<double> tape;
            auto f = m.forward(tape, x, Mode::train);
            return ops::softmax_xent(f.output, std::span<const int>(labels)).value().item();
        };
        Tape<double> tape;
        auto f = m.forward(tape, x, Mode::train);
        tape.backward(ops::softmax_xent(f.output, std::span<const int>(labels)));
        auto params = m.parameters();
        for (std::size_t k = 0; k < params.size(); ++k) {
            const auto analytic = tape.grad(f.params[k]);
            auto& t = *params[k].value;
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double orig = t[i];
                const double h = 1e-5 * std::max(1.0, std::abs(orig));
                t[i] = orig + h;
                const double up = loss_of();
                t[i] = orig - h;
                const double down = loss_of();
                t[i] = orig;
                out.max_rel_error = std::max(out.max_rel_error, detail::rel_error(analytic[i], (up - down) / (2 * h)));
            }
        }
        ++out.points;
    }
    return out;
}

inline std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
    return {check_lstm_step(seed), check_pool_forward(seed + 1), check_end_to_end(seed + 2)};
}

} // namespace ftn::exp
