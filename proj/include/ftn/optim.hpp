#pragma once

#include "ftn/error.hpp"
#include "ftn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace ftn {

/// L2 norm over all gradient tensors taken together, accumulated in double.
template <typename T>
double global_norm(std::span<const Tensor<T>> grads) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(sq);
}

/// Rescales every gradient by max_norm / norm when the global norm exceeds
/// max_norm. Returns the norm before clipping.
template <typename T>
double clip_total_norm(std::span<Tensor<T>> grads, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("clip_total_norm: max_norm must be positive");
    const double norm = global_norm<T>(grads);
    if (norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& g : grads)
            for (auto& v : g.data()) v *= s;
    }
    return norm;
}

template <typename T>
struct OptimizerState {
    std::vector<Tensor<T>> velocity; ///< one per parameter tensor, same shape
    double lr = 0.01;
    double momentum = 0.9;
    std::optional<double> clip_norm;
};

template <typename T>
OptimizerState<T> make_optimizer_state(std::span<Tensor<T>* const> params, double lr, double momentum,
                                       std::optional<double> clip_norm) {
    if (!(lr > 0.0)) throw ConfigError("optimizer: learning rate must be positive");
    OptimizerState<T> st;
    st.lr = lr;
    st.momentum = momentum;
    st.clip_norm = clip_norm;
    for (auto* p : params) st.velocity.emplace_back(p->shape(), T{0});
    return st;
}

/// SGD with Nesterov momentum in look-ahead form:
///   v <- mu v - lr g;   theta <- theta + mu v - lr g
/// Gradients are clipped first when the state carries a clip norm. Pooling
/// unit projection is the caller's job, right after this returns.
template <typename T>
void nesterov_step(std::span<Tensor<T>* const> params, std::span<Tensor<T>> grads, OptimizerState<T>& st) {
    if (params.size() != grads.size() || params.size() != st.velocity.size()) {
        throw ShapeError("nesterov_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(st.velocity.size()) +
                         " velocities");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k]->shape() != grads[k].shape() || params[k]->shape() != st.velocity[k].shape()) {
            throw ShapeError("nesterov_step: shape mismatch at parameter " + std::to_string(k) + ": " +
                             to_string(params[k]->shape()) + " vs " + to_string(grads[k].shape()));
        }
    }
    if (st.clip_norm) clip_total_norm<T>(grads, *st.clip_norm);
    const T mu = static_cast<T>(st.momentum);
    const T lr = static_cast<T>(st.lr);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto theta = params[k]->data();
        auto v = st.velocity[k].data();
        auto g = grads[k].data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            v[i] = mu * v[i] - lr * g[i];
            theta[i] += mu * v[i] - lr * g[i];
        }
    }
}

/// Multiply by `factor` at each listed iteration.
struct StepSchedule {
    std::vector<std::int64_t> milestones;
    double factor = 0.1;
};

/// Multiply by `factor` once the best validation score has not strictly
/// improved for `patience` consecutive validation rounds; never below min_lr.
struct PlateauSchedule {
    int patience = 1;
    double factor = 0.1;
    double min_lr = 1e-6;
};

struct ConstantSchedule {};

using LrSchedule = std::variant<ConstantSchedule, StepSchedule, PlateauSchedule>;

class LrScheduler {
public:
    LrScheduler(double lr0, LrSchedule schedule) : lr0_(lr0), lr_(lr0), schedule_(std::move(schedule)) {
        if (!(lr0 > 0.0)) throw ConfigError("schedule: initial learning rate must be positive");
        if (auto* s = std::get_if<StepSchedule>(&schedule_)) {
            check_factor(s->factor);
            for (std::size_t k = 1; k < s->milestones.size(); ++k) {
                if (s->milestones[k] <= s->milestones[k - 1]) {
                    throw ConfigError("schedule: milestones must be strictly increasing");
                }
            }
        } else if (auto* p = std::get_if<PlateauSchedule>(&schedule_)) {
            check_factor(p->factor);
            if (p->patience < 1) throw ConfigError("schedule: patience must be at least 1");
        }
    }

    double lr() const noexcept { return lr_; }

    /// Learning rate in effect for iteration `iter` (0-based count of
    /// completed iterations).
    double on_iteration(std::int64_t iter) {
        if (auto* s = std::get_if<StepSchedule>(&schedule_)) {
            const auto passed = std::count_if(s->milestones.begin(), s->milestones.end(),
                                              [iter](std::int64_t m) { return iter >= m; });
            lr_ = lr0_ * std::pow(s->factor, static_cast<double>(passed));
        }
        return lr_;
    }

    /// Feeds one validation score (higher is better) to a plateau schedule.
    double on_validation(double score) {
        if (auto* p = std::get_if<PlateauSchedule>(&schedule_)) {
            if (score > best_) {
                best_ = score;
                stale_ = 0;
            } else if (++stale_ >= p->patience) {
                lr_ = std::max(lr_ * p->factor, p->min_lr);
                stale_ = 0;
            }
        }
        return lr_;
    }

    /// True once a plateau schedule sits at its floor.
    bool at_floor() const {
        if (auto* p = std::get_if<PlateauSchedule>(&schedule_)) return lr_ <= p->min_lr;
        return false;
    }

    double best_score() const noexcept { return best_; }

private:
    static void check_factor(double f) {
        if (!(f > 0.0 && f < 1.0)) throw ConfigError("schedule: factor must lie in (0,1)");
    }

    double lr0_;
    double lr_;
    LrSchedule schedule_;
    double best_ = -std::numeric_limits<double>::infinity();
    int stale_ = 0;
};

} // namespace ftn
