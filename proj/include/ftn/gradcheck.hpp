#pragma once

#include "ftn/tape.hpp"
#include "ftn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>

namespace ftn {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t offending_index = 0; ///< coordinate with the largest error
    double analytic = 0.0;           ///< tape gradient at that coordinate
    double numeric = 0.0;            ///< central difference at that coordinate
    bool passed = true;
};

/// Builds a scalar-valued graph from a leaf holding the evaluation point.
using GraphBuilder = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Compares the tape gradient of `f` at `point` with central differences,
/// coordinate by coordinate. The step for coordinate k is step * max(1, |x_k|).
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// near-zero gradients from inflating the ratio.
inline GradCheckReport grad_check(const GraphBuilder& f, const Tensor<double>& point, double step = 1e-3,
                                  double rtol = 1e-4, double floor = 1e-3) {
    Tensor<double> analytic;
    {
        Tape<double> tape;
        auto x = tape.leaf(point);
        tape.backward(f(tape, x));
        analytic = tape.grad(x);
    }
    auto eval = [&](const Tensor<double>& p) {
        Tape<double> tape;
        auto x = tape.leaf(p);
        return f(tape, x).value().item();
    };

    GradCheckReport report;
    Tensor<double> probe = point;
    for (std::size_t k = 0; k < point.size(); ++k) {
        const double h = step * std::max(1.0, std::abs(point[k]));
        probe[k] = point[k] + h;
        const double up = eval(probe);
        probe[k] = point[k] - h;
        const double down = eval(probe);
        probe[k] = point[k];
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), floor});
        const double rel = std::abs(analytic[k] - numeric) / denom;
        if (rel > report.max_rel_error || k == 0) {
            report.max_rel_error = rel;
            report.offending_index = k;
            report.analytic = analytic[k];
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= rtol;
    return report;
}

} // namespace ftn
