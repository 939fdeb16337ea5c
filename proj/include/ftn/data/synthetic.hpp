#pragma once

// Synthetic pooling data: sequences of L values in [0,300] whose entries are
// zeroed with a regime-dependent probability (T1 0%, T2 50%, T3 80%).

#include "ftn/error.hpp"
#include "ftn/random.hpp"
#include "ftn/tensor.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace ftn::data {

inline constexpr double kSyntheticMax = 300.0;
inline constexpr std::size_t kSyntheticBatch = 128;

enum class Regime { T1, T2, T3 };
enum class PoolTarget { max, avg };

inline double zero_fraction(Regime r) {
    switch (r) {
    case Regime::T1: return 0.0;
    case Regime::T2: return 0.5;
    case Regime::T3: return 0.8;
    }
    return 0.0;
}

inline std::string to_string(Regime r) {
    switch (r) {
    case Regime::T1: return "T1";
    case Regime::T2: return "T2";
    case Regime::T3: return "T3";
    }
    return "?";
}

inline Regime parse_regime(const std::string& s) {
    if (s == "T1") return Regime::T1;
    if (s == "T2") return Regime::T2;
    if (s == "T3") return Regime::T3;
    throw ConfigError("unknown regime '" + s + "' (expected T1, T2 or T3)");
}

inline std::string to_string(PoolTarget t) { return t == PoolTarget::max ? "max" : "avg"; }

inline PoolTarget parse_pool_target(const std::string& s) {
    if (s == "max") return PoolTarget::max;
    if (s == "avg") return PoolTarget::avg;
    throw ConfigError("unknown approximation target '" + s + "' (expected max or avg)");
}

template <typename T>
struct SyntheticPoolBatch {
    Tensor<T> inputs;  ///< [B,L]
    Tensor<T> targets; ///< [B]
    Regime regime;
    std::size_t length;
};

inline void check_length(std::size_t length) {
    if (length != 4 && length != 9 && length != 16) {
        throw ConfigError("synthetic: sequence length must be 4, 9 or 16, got " + std::to_string(length));
    }
}

template <typename T = double>
SyntheticPoolBatch<T> gen_pool_batch(std::size_t length, Regime regime, PoolTarget target, Rng& rng,
                                     std::size_t batch = kSyntheticBatch) {
    check_length(length);
    if (batch == 0) throw ConfigError("synthetic: batch size must be positive");
    SyntheticPoolBatch<T> out{Tensor<T>(Shape{batch, length}), Tensor<T>(Shape{batch}), regime, length};
    const double p_zero = zero_fraction(regime);
    for (std::size_t b = 0; b < batch; ++b) {
        T* row = out.inputs.ptr() + b * length;
        for (std::size_t i = 0; i < length; ++i) {
            // Draw both numbers every time so streams align across regimes.
            const bool zero = rng.bernoulli(p_zero);
            const double v = rng.uniform(0.0, kSyntheticMax);
            row[i] = zero ? T{0} : static_cast<T>(v);
        }
        if (target == PoolTarget::max) {
            out.targets[b] = *std::max_element(row, row + length);
        } else {
            T s{0};
            for (std::size_t i = 0; i < length; ++i) s += row[i];
            out.targets[b] = s / static_cast<T>(length);
        }
    }
    return out;
}

/// Spatially correlated stand-in images in [0,255], shape [N,C,H,W]: a
/// bilinearly upsampled coarse random field shared across channels plus a
/// per-channel field and pixel noise.
inline Tensor<float> smooth_images(std::size_t n, std::size_t channels, std::size_t h, std::size_t w, Rng& rng,
                                   std::size_t grid = 4) {
    if (grid < 2) throw ConfigError("smooth_images: grid must be at least 2");
    Tensor<float> out(Shape{n, channels, h, w});
    std::vector<double> shared(grid * grid), own(grid * grid);
    auto sample = [&](const std::vector<double>& g, double y, double x) {
        const double gy = y * static_cast<double>(grid - 1), gx = x * static_cast<double>(grid - 1);
        const auto y0 = std::min(static_cast<std::size_t>(gy), grid - 2), x0 = std::min(static_cast<std::size_t>(gx), grid - 2);
        const double ty = gy - static_cast<double>(y0), tx = gx - static_cast<double>(x0);
        auto at = [&](std::size_t a, std::size_t b) { return g[a * grid + b]; };
        return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) + ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
    };
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& v : shared) v = rng.uniform(0.0, 160.0);
        for (std::size_t c = 0; c < channels; ++c) {
            for (auto& v : own) v = rng.uniform(0.0, 80.0);
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const double fy = h > 1 ? static_cast<double>(y) / static_cast<double>(h - 1) : 0.0;
                    const double fx = w > 1 ? static_cast<double>(x) / static_cast<double>(w - 1) : 0.0;
                    const double v = sample(shared, fy, fx) + sample(own, fy, fx) + rng.uniform(0.0, 15.0);
                    out[((i * channels + c) * h + y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 255.0));
                }
            }
        }
    }
    return out;
}

} // namespace ftn::data
