#pragma once

// Training-time augmentation: zero-pad, random crop back to the original
// size, random horizontal flip.

#include "ftn/error.hpp"
#include "ftn/random.hpp"
#include "ftn/tensor.hpp"

#include <cstddef>

namespace ftn::data {

struct CropFlip {
    std::size_t dy = 0, dx = 0; ///< crop offset inside the padded image
    bool flip = false;
};

inline CropFlip draw_crop_flip(Rng& rng, std::size_t pad, double flip_prob) {
    CropFlip a;
    a.dy = static_cast<std::size_t>(rng.below(2 * pad + 1));
    a.dx = static_cast<std::size_t>(rng.below(2 * pad + 1));
    a.flip = rng.bernoulli(flip_prob);
    return a;
}

/// dst[c,y,x] = padded(src)[c, y+dy, x'+dx] with x' = W-1-x when flipped.
template <typename T>
void crop_flip(const T* src, T* dst, std::size_t channels, std::size_t h, std::size_t w, std::size_t pad,
               const CropFlip& a) {
    if (a.dy > 2 * pad || a.dx > 2 * pad) throw ShapeError("augment: crop offset outside the padded image");
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + a.dy) - static_cast<std::ptrdiff_t>(pad);
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t xs = a.flip ? w - 1 - x : x;
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xs + a.dx) - static_cast<std::ptrdiff_t>(pad);
                const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                                    sx < static_cast<std::ptrdiff_t>(w);
                dst[(c * h + y) * w + x] = inside ? src[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : T{0};
            }
        }
    }
}

/// Augments every image of a [B,C,H,W] batch with its own draw from `rng`.
template <typename T>
Tensor<T> augment_batch(const Tensor<T>& batch, Rng& rng, std::size_t pad = 4, double flip_prob = 0.5) {
    if (batch.rank() != 4) throw ShapeError("augment: expected [B,C,H,W], got " + ftn::to_string(batch.shape()));
    const std::size_t b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    Tensor<T> out(batch.shape());
    for (std::size_t i = 0; i < b; ++i) {
        const auto a = draw_crop_flip(rng, pad, flip_prob);
        crop_flip(batch.ptr() + i * c * h * w, out.ptr() + i * c * h * w, c, h, w, pad, a);
    }
    return out;
}

} // namespace ftn::data
