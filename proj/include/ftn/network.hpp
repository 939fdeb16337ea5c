#pragma once

// Declarative network description, shape checking, parameter ownership and
// the taped forward pass.

#include "ftn/error.hpp"
#include "ftn/lstm_pool.hpp"
#include "ftn/ops.hpp"
#include "ftn/random.hpp"
#include "ftn/tape.hpp"
#include "ftn/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

namespace ftn {

enum class ActivationKind { relu, leaky_relu, tanh, sigmoid };
enum class PoolKind { max, avg, lstm };

struct Conv2dLayer {
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;
};

struct ActivationLayer {
    ActivationKind kind = ActivationKind::relu;
    double alpha = 0.0;
};

struct PoolLayer {
    PoolKind kind = PoolKind::max;
    std::size_t k = 2;
    std::size_t stride = 2;
    PoolSharing sharing = PoolSharing::per_layer;
    /// Modulation for lstm pooling; when unset, follows the closest
    /// preceding activation layer.
    std::optional<Modulation> psi;
};

struct FcLayer {
    std::size_t out_units = 1;
};

/// Inverted dropout.
struct DropoutLayer {
    double rate = 0.5;
};

struct BatchNormLayer {
    double momentum = 0.9;
    double eps = 1e-5;
};

struct SoftmaxXentLayer {
    std::size_t classes = 10;
};

using LayerDesc =
    std::variant<Conv2dLayer, ActivationLayer, PoolLayer, FcLayer, DropoutLayer, BatchNormLayer, SoftmaxXentLayer>;

struct NetworkSpec {
    Shape input{3, 32, 32};
    std::vector<LayerDesc> layers;
};

inline std::string layer_type(const LayerDesc& d) {
    return std::visit(
        [](const auto& l) -> std::string {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Conv2dLayer>) return "conv2d";
            else if constexpr (std::is_same_v<L, ActivationLayer>) return "activation";
            else if constexpr (std::is_same_v<L, PoolLayer>) return "pool";
            else if constexpr (std::is_same_v<L, FcLayer>) return "fc";
            else if constexpr (std::is_same_v<L, DropoutLayer>) return "dropout";
            else if constexpr (std::is_same_v<L, BatchNormLayer>) return "batchnorm";
            else return "softmax_xent";
        },
        d);
}

// ---------------------------------------------------------------------------
// JSON

inline std::string_view to_string(ActivationKind k) {
    switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::sigmoid: return "sigmoid";
    }
    return "?";
}

inline ActivationKind parse_activation(std::string_view s) {
    if (s == "relu") return ActivationKind::relu;
    if (s == "leaky_relu") return ActivationKind::leaky_relu;
    if (s == "tanh") return ActivationKind::tanh;
    if (s == "sigmoid") return ActivationKind::sigmoid;
    throw ConfigError("unknown activation '" + std::string(s) + "'");
}

inline std::string_view to_string(PoolKind k) {
    switch (k) {
    case PoolKind::max: return "max";
    case PoolKind::avg: return "avg";
    case PoolKind::lstm: return "lstm";
    }
    return "?";
}

inline PoolKind parse_pool_kind(std::string_view s) {
    if (s == "max") return PoolKind::max;
    if (s == "avg") return PoolKind::avg;
    if (s == "lstm") return PoolKind::lstm;
    throw ConfigError("unknown pool kind '" + std::string(s) + "'");
}

inline nlohmann::json to_json(const LayerDesc& d) {
    using nlohmann::json;
    json j{{"type", layer_type(d)}};
    std::visit(
        [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Conv2dLayer>) {
                j["out_channels"] = l.out_channels;
                j["kernel"] = l.kernel;
                j["stride"] = l.stride;
                j["pad"] = l.pad;
            } else if constexpr (std::is_same_v<L, ActivationLayer>) {
                j["kind"] = to_string(l.kind);
                j["alpha"] = l.alpha;
            } else if constexpr (std::is_same_v<L, PoolLayer>) {
                j["kind"] = to_string(l.kind);
                j["k"] = l.k;
                j["stride"] = l.stride;
                j["sharing"] = to_string(l.sharing);
                if (l.psi) {
                    j["psi"] = l.psi->name();
                    j["psi_alpha"] = l.psi->alpha;
                }
            } else if constexpr (std::is_same_v<L, FcLayer>) {
                j["out_units"] = l.out_units;
            } else if constexpr (std::is_same_v<L, DropoutLayer>) {
                j["rate"] = l.rate;
            } else if constexpr (std::is_same_v<L, BatchNormLayer>) {
                j["momentum"] = l.momentum;
                j["eps"] = l.eps;
            } else {
                j["classes"] = l.classes;
            }
        },
        d);
    return j;
}

inline nlohmann::json to_json(const NetworkSpec& spec) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : spec.layers) layers.push_back(to_json(l));
    return {{"input", spec.input}, {"layers", layers}};
}

inline LayerDesc layer_from_json(const nlohmann::json& j, std::size_t index) {
    const std::string where = "layer " + std::to_string(index);
    try {
        const std::string type = j.at("type").get<std::string>();
        if (type == "conv2d") {
            Conv2dLayer l;
            l.out_channels = j.at("out_channels").get<std::size_t>();
            l.kernel = j.value("kernel", l.kernel);
            l.stride = j.value("stride", l.stride);
            l.pad = j.value("pad", l.pad);
            return l;
        }
        if (type == "activation") {
            return ActivationLayer{parse_activation(j.at("kind").get<std::string>()), j.value("alpha", 0.0)};
        }
        if (type == "pool") {
            PoolLayer l;
            l.kind = parse_pool_kind(j.at("kind").get<std::string>());
            l.k = j.at("k").get<std::size_t>();
            l.stride = j.value("stride", l.k);
            l.sharing = parse_pool_sharing(j.value("sharing", std::string("per_layer")));
            if (j.contains("psi")) l.psi = parse_modulation(j.at("psi").get<std::string>(), j.value("psi_alpha", 0.0));
            return l;
        }
        if (type == "fc") return FcLayer{j.at("out_units").get<std::size_t>()};
        if (type == "dropout") return DropoutLayer{j.at("rate").get<double>()};
        if (type == "batchnorm") return BatchNormLayer{j.value("momentum", 0.9), j.value("eps", 1e-5)};
        if (type == "softmax_xent") return SoftmaxXentLayer{j.at("classes").get<std::size_t>()};
        throw ConfigError(where + ": unknown layer type '" + type + "'");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
    NetworkSpec spec;
    try {
        if (j.contains("input")) spec.input = j.at("input").get<Shape>();
        const auto& layers = j.at("layers");
        for (std::size_t i = 0; i < layers.size(); ++i) spec.layers.push_back(layer_from_json(layers[i], i));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("network spec: ") + e.what());
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Shape inference

/// Per-sample output shape of every layer (batch dimension excluded).
/// Throws ShapeError naming the first layer that does not chain.
inline std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
    std::vector<Shape> shapes;
    Shape cur = spec.input;
    if (cur.empty()) throw ShapeError("network: empty input shape");
    for (std::size_t idx = 0; idx < spec.layers.size(); ++idx) {
        const auto& d = spec.layers[idx];
        auto fail = [&](const std::string& why) {
            return ShapeError("network: layer " + std::to_string(idx) + " (" + layer_type(d) + ") " + why +
                              "; input " + to_string(cur));
        };
        std::visit(
            [&](const auto& l) {
                using L = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<L, Conv2dLayer>) {
                    if (cur.size() != 3) throw fail("needs a [C,H,W] input");
                    if (l.kernel == 0 || l.stride == 0 || l.out_channels == 0) throw fail("has a zero extent");
                    if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel) throw fail("kernel too large");
                    cur = {l.out_channels, (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1,
                           (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1};
                } else if constexpr (std::is_same_v<L, PoolLayer>) {
                    if (cur.size() != 3) throw fail("needs a [C,H,W] input");
                    if (l.k == 0 || l.stride == 0) throw fail("has a zero region size or stride");
                    if (cur[1] < l.k || cur[2] < l.k || (cur[1] - l.k) % l.stride || (cur[2] - l.k) % l.stride) {
                        throw fail("regions do not tile the input");
                    }
                    cur = {cur[0], (cur[1] - l.k) / l.stride + 1, (cur[2] - l.k) / l.stride + 1};
                } else if constexpr (std::is_same_v<L, FcLayer>) {
                    if (l.out_units == 0) throw fail("has zero units");
                    cur = {l.out_units};
                } else if constexpr (std::is_same_v<L, DropoutLayer>) {
                    if (!(l.rate >= 0.0 && l.rate < 1.0)) throw fail("rate must lie in [0,1)");
                } else if constexpr (std::is_same_v<L, SoftmaxXentLayer>) {
                    if (idx + 1 != spec.layers.size()) throw fail("must be the last layer");
                    if (shape_size(cur) != l.classes) throw fail("expects " + std::to_string(l.classes) + " logits");
                    cur = {l.classes};
                }
            },
            d);
        shapes.push_back(cur);
    }
    return shapes;
}

// ---------------------------------------------------------------------------
// Presets

/// Two stacks of two 3x3 convolutions (N units each, batchnorm, leaky ReLU)
/// closed by a 4x4 and an 8x8 pooling layer, then FC(N), FC(N) with dropout
/// and an FC(classes) softmax classifier.
inline NetworkSpec conv_n_preset(std::size_t n, PoolKind pool, PoolSharing sharing = PoolSharing::per_layer,
                                 std::size_t classes = 10, double leak = 0.3) {
    NetworkSpec s;
    s.input = {3, 32, 32};
    auto conv_block = [&] {
        s.layers.push_back(Conv2dLayer{n, 3, 1, 1});
        s.layers.push_back(BatchNormLayer{});
        s.layers.push_back(ActivationLayer{ActivationKind::leaky_relu, leak});
    };
    conv_block();
    conv_block();
    s.layers.push_back(PoolLayer{pool, 4, 4, sharing, std::nullopt});
    conv_block();
    conv_block();
    s.layers.push_back(PoolLayer{pool, 8, 8, sharing, std::nullopt});
    for (int k = 0; k < 2; ++k) {
        s.layers.push_back(FcLayer{n});
        s.layers.push_back(ActivationLayer{ActivationKind::leaky_relu, leak});
        s.layers.push_back(DropoutLayer{0.5});
    }
    s.layers.push_back(FcLayer{classes});
    s.layers.push_back(SoftmaxXentLayer{classes});
    return s;
}

/// Five convolution stacks (2,2,3,3,3 layers; 64..512 units scaled by
/// `width`) each closed by 2x2 pooling and 30% dropout, two FC layers with
/// 50% dropout, and an FC(classes) softmax classifier.
inline NetworkSpec vgg16_preset(double width, PoolKind pool, PoolSharing sharing = PoolSharing::per_layer,
                                std::size_t classes = 100, double leak = 0.1) {
    auto scaled = [width](std::size_t c) {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(c) * width)));
    };
    NetworkSpec s;
    s.input = {3, 32, 32};
    const std::size_t units[] = {64, 128, 256, 512, 512};
    const int depth[] = {2, 2, 3, 3, 3};
    for (int stack = 0; stack < 5; ++stack) {
        for (int k = 0; k < depth[stack]; ++k) {
            s.layers.push_back(Conv2dLayer{scaled(units[stack]), 3, 1, 1});
            s.layers.push_back(BatchNormLayer{});
            s.layers.push_back(ActivationLayer{ActivationKind::leaky_relu, leak});
        }
        s.layers.push_back(PoolLayer{pool, 2, 2, sharing, std::nullopt});
        s.layers.push_back(DropoutLayer{0.3});
    }
    for (int k = 0; k < 2; ++k) {
        s.layers.push_back(FcLayer{scaled(512)});
        s.layers.push_back(ActivationLayer{ActivationKind::leaky_relu, leak});
        s.layers.push_back(DropoutLayer{0.5});
    }
    s.layers.push_back(FcLayer{classes});
    s.layers.push_back(SoftmaxXentLayer{classes});
    return s;
}

// ---------------------------------------------------------------------------
// Model

enum class Mode { train, eval };

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value;
    bool pool_unit; ///< lstm pooling params: projected after each step
};

template <typename T>
class Model {
public:
    /// Deterministic initialisation from `seed`. Lstm pooling layers without
    /// an explicit psi take the closest preceding activation; the stored spec
    /// records the resolved choice.
    Model(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        shapes_ = infer_shapes(spec_);
        resolve_modulations();
        Rng rng(seed);
        layers_.resize(spec_.layers.size());
        Shape in = spec_.input;
        for (std::size_t idx = 0; idx < spec_.layers.size(); ++idx) {
            init_layer(idx, in, rng);
            in = shapes_[idx];
        }
        check_pool_accounting();
    }

    const NetworkSpec& spec() const noexcept { return spec_; }
    const std::vector<Shape>& shapes() const noexcept { return shapes_; }

    /// Trainable tensors in spec order. A globally shared pooling unit is
    /// listed once, at the first lstm pooling layer.
    std::vector<ParamRef<T>> parameters() {
        std::vector<ParamRef<T>> out;
        for (std::size_t idx = 0; idx < layers_.size(); ++idx) {
            auto& L = layers_[idx];
            const std::string prefix = "layer" + std::to_string(idx) + "." + layer_type(spec_.layers[idx]);
            if (L.shared_unit_owner || L.trainable.size() > 0) {
                const bool pool = std::holds_alternative<PoolLayer>(spec_.layers[idx]);
                if (pool && L.shared_unit_owner) {
                    out.push_back({prefix + ".unit", &shared_unit_, true});
                    continue;
                }
                for (std::size_t k = 0; k < L.trainable.size(); ++k)
                    out.push_back({prefix + "." + std::to_string(k), &L.trainable[k], pool});
            }
        }
        return out;
    }

    /// Every tensor persisted in a checkpoint: trainable parameters plus
    /// batchnorm running statistics, in spec order.
    std::vector<Tensor<T>*> state_tensors() {
        std::vector<Tensor<T>*> out;
        for (std::size_t idx = 0; idx < layers_.size(); ++idx) {
            auto& L = layers_[idx];
            if (L.shared_unit_owner) out.push_back(&shared_unit_);
            for (auto& t : L.trainable) out.push_back(&t);
            for (auto& t : L.stats) out.push_back(&t);
        }
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.value->size();
        return n;
    }

    /// Modulation used by lstm pooling layer `idx`.
    Modulation pool_modulation(std::size_t idx) const {
        const auto* pool = std::get_if<PoolLayer>(&spec_.layers.at(idx));
        if (!pool || !pool->psi) throw ConfigError("layer " + std::to_string(idx) + " is not an lstm pool");
        return *pool->psi;
    }

    /// Pooling unit tensor of lstm pooling layer `idx` ([12] or [R,12]).
    Tensor<T>& pool_unit(std::size_t idx) {
        const auto* pool = std::get_if<PoolLayer>(&spec_.layers.at(idx));
        if (!pool || pool->kind != PoolKind::lstm) throw ConfigError("layer " + std::to_string(idx) + " is not an lstm pool");
        if (pool->sharing == PoolSharing::global_shared) return shared_unit_;
        return layers_[idx].trainable.at(0);
    }

    struct Forward {
        Var<T> output;              ///< logits, or the input of `stop_before`
        std::vector<Var<T>> params; ///< aligned with parameters()
    };

    /// Records the forward pass of `batch` ([B, input...]) on `tape`. In
    /// train mode dropout draws masks from `rng` and batchnorm uses (and
    /// folds into its running averages) the batch statistics. Stops before
    /// layer `stop_before` when given; softmax_xent layers pass logits
    /// through unchanged.
    Forward forward(Tape<T>& tape, const Tensor<T>& batch, Mode mode, Rng* rng = nullptr,
                    std::size_t stop_before = static_cast<std::size_t>(-1)) {
        Shape expected = spec_.input;
        expected.insert(expected.begin(), batch.dim(0));
        if (batch.shape() != expected) {
            throw ShapeError("network: batch shape " + to_string(batch.shape()) + " does not match input " +
                             to_string(spec_.input));
        }
        Forward f;
        auto refs = parameters();
        const bool track = mode == Mode::train || track_in_eval_;
        for (const auto& r : refs) f.params.push_back(tape.leaf(*r.value, track));
        auto param_var = [&](const Tensor<T>* t) {
            for (std::size_t k = 0; k < refs.size(); ++k)
                if (refs[k].value == t) return f.params[k];
            throw Error(ErrorCategory::generic, "network: unknown parameter tensor");
        };

        Var<T> x = tape.constant(batch);
        const std::size_t b = batch.dim(0);
        for (std::size_t idx = 0; idx < spec_.layers.size() && idx < stop_before; ++idx) {
            auto& L = layers_[idx];
            try {
                x = std::visit(
                    [&](const auto& l) -> Var<T> {
                        using D = std::decay_t<decltype(l)>;
                        if constexpr (std::is_same_v<D, Conv2dLayer>) {
                            auto y = ops::conv2d(x, param_var(&L.trainable[0]), l.stride, l.pad);
                            return ops::add_channel_bias(y, param_var(&L.trainable[1]));
                        } else if constexpr (std::is_same_v<D, ActivationLayer>) {
                            switch (l.kind) {
                            case ActivationKind::relu: return ops::relu(x);
                            case ActivationKind::leaky_relu: return ops::leaky_relu(x, static_cast<T>(l.alpha));
                            case ActivationKind::tanh: return ops::tanh(x);
                            case ActivationKind::sigmoid: return ops::sigmoid(x);
                            }
                            return x;
                        } else if constexpr (std::is_same_v<D, PoolLayer>) {
                            switch (l.kind) {
                            case PoolKind::max: return ops::max_pool2d(x, l.k, l.stride);
                            case PoolKind::avg: return ops::avg_pool2d(x, l.k, l.stride);
                            case PoolKind::lstm: return lstm_pool2d(x, param_var(&pool_unit(idx)), l.k, l.stride, *l.psi);
                            }
                            return x;
                        } else if constexpr (std::is_same_v<D, FcLayer>) {
                            const std::size_t in = x.value().size() / b;
                            auto flat = x.shape().size() == 2 ? x : ops::reshape(x, {b, in});
                            return ops::add_channel_bias(ops::matmul(flat, param_var(&L.trainable[0])),
                                                         param_var(&L.trainable[1]));
                        } else if constexpr (std::is_same_v<D, DropoutLayer>) {
                            if (mode == Mode::eval || l.rate == 0.0) return x;
                            if (!rng) throw ConfigError("network: train-mode dropout needs an rng");
                            Tensor<T> mask(x.shape());
                            const T keep = static_cast<T>(1.0 / (1.0 - l.rate));
                            for (auto& m : mask.data()) m = rng->bernoulli(l.rate) ? T{0} : keep;
                            return ops::mul(x, tape.constant(std::move(mask)));
                        } else if constexpr (std::is_same_v<D, BatchNormLayer>) {
                            auto gamma = param_var(&L.trainable[0]);
                            auto beta = param_var(&L.trainable[1]);
                            if (mode == Mode::eval) {
                                return ops::batch_norm_eval<T>(x, gamma, beta, L.stats[0].data(), L.stats[1].data(),
                                                               static_cast<T>(l.eps));
                            }
                            ops::ChannelStats<T> stats;
                            auto y = ops::batch_norm_train(x, gamma, beta, static_cast<T>(l.eps), &stats);
                            const T m = static_cast<T>(l.momentum);
                            for (std::size_t c = 0; c < stats.mean.size(); ++c) {
                                L.stats[0][c] = m * L.stats[0][c] + (T{1} - m) * stats.mean[c];
                                L.stats[1][c] = m * L.stats[1][c] + (T{1} - m) * stats.var[c];
                            }
                            return y;
                        } else {
                            return x.shape().size() == 2 ? x : ops::reshape(x, {b, l.classes});
                        }
                    },
                    spec_.layers[idx]);
            } catch (const NumericError& e) {
                throw NumericError("network: layer " + std::to_string(idx) + " (" + layer_type(spec_.layers[idx]) +
                                   "): " + e.what());
            }
        }
        f.output = x;
        return f;
    }

    /// Eval-mode logits without gradient tracking.
    Tensor<T> predict(const Tensor<T>& batch) {
        Tape<T> tape;
        return forward(tape, batch, Mode::eval).output.value();
    }

    /// Track parameters in eval mode too (for gradient checks through
    /// frozen batchnorm).
    void track_params_in_eval(bool on) { track_in_eval_ = on; }

private:
    struct LayerState {
        std::vector<Tensor<T>> trainable;
        std::vector<Tensor<T>> stats; ///< batchnorm running mean, running var
        bool shared_unit_owner = false;
    };

    void resolve_modulations() {
        std::optional<Modulation> last;
        for (auto& d : spec_.layers) {
            if (auto* a = std::get_if<ActivationLayer>(&d)) {
                switch (a->kind) {
                case ActivationKind::relu: last = Modulation::relu(); break;
                case ActivationKind::leaky_relu: last = Modulation::leaky_relu(a->alpha); break;
                case ActivationKind::tanh: last = Modulation::tanh(); break;
                case ActivationKind::sigmoid: break;
                }
            } else if (auto* p = std::get_if<PoolLayer>(&d)) {
                if (p->kind == PoolKind::lstm && !p->psi) p->psi = last.value_or(Modulation::relu());
                if (p->kind != PoolKind::lstm) p->psi.reset();
            }
        }
    }

    static Tensor<T> uniform(Rng& rng, Shape shape, double bound) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        return t;
    }

    void init_layer(std::size_t idx, const Shape& in, Rng& rng) {
        auto& L = layers_[idx];
        std::visit(
            [&](const auto& l) {
                using D = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<D, Conv2dLayer>) {
                    const std::size_t fan_in = in[0] * l.kernel * l.kernel;
                    L.trainable.push_back(uniform(rng, {l.out_channels, in[0], l.kernel, l.kernel},
                                                  std::sqrt(6.0 / static_cast<double>(fan_in))));
                    L.trainable.emplace_back(Shape{l.out_channels}, T{0});
                } else if constexpr (std::is_same_v<D, FcLayer>) {
                    const std::size_t fan_in = shape_size(in);
                    L.trainable.push_back(uniform(rng, {fan_in, l.out_units}, std::sqrt(6.0 / static_cast<double>(fan_in))));
                    L.trainable.emplace_back(Shape{l.out_units}, T{0});
                } else if constexpr (std::is_same_v<D, BatchNormLayer>) {
                    L.trainable.emplace_back(Shape{in[0]}, T{1});
                    L.trainable.emplace_back(Shape{in[0]}, T{0});
                    L.stats.emplace_back(Shape{in[0]}, T{0});
                    L.stats.emplace_back(Shape{in[0]}, T{1});
                } else if constexpr (std::is_same_v<D, PoolLayer>) {
                    if (l.kind != PoolKind::lstm) return;
                    if (l.sharing == PoolSharing::global_shared) {
                        if (shared_unit_.empty()) {
                            shared_unit_ = init_lstm_pool_params<T>(rng).to_tensor();
                            L.shared_unit_owner = true;
                        }
                        return;
                    }
                    const std::size_t rows =
                        l.sharing == PoolSharing::per_region ? shapes_[idx][1] * shapes_[idx][2] : 1;
                    Tensor<T> units(rows == 1 ? Shape{kLstmParamCount} : Shape{rows, kLstmParamCount});
                    for (std::size_t r = 0; r < rows; ++r) {
                        const auto p = init_lstm_pool_params<T>(rng);
                        std::copy(p.v.begin(), p.v.end(), units.ptr() + r * kLstmParamCount);
                    }
                    L.trainable.push_back(std::move(units));
                }
            },
            spec_.layers[idx]);
    }

    // Pooling adds 12 scalars per unit and nothing else: one unit per
    // per-layer pool, one per region, one in total when globally shared.
    void check_pool_accounting() {
        std::size_t expected = 0, actual = 0;
        bool shared_seen = false;
        for (std::size_t idx = 0; idx < spec_.layers.size(); ++idx) {
            const auto* pool = std::get_if<PoolLayer>(&spec_.layers[idx]);
            if (!pool || pool->kind != PoolKind::lstm) continue;
            if (pool->sharing == PoolSharing::global_shared) {
                if (!shared_seen) expected += kLstmParamCount;
                shared_seen = true;
            } else if (pool->sharing == PoolSharing::per_region) {
                expected += kLstmParamCount * shapes_[idx][1] * shapes_[idx][2];
            } else {
                expected += kLstmParamCount;
            }
        }
        for (const auto& p : parameters())
            if (p.pool_unit) actual += p.value->size();
        if (actual != expected) {
            throw ShapeError("pooling units hold " + std::to_string(actual) + " parameters, expected " +
                             std::to_string(expected));
        }
    }

    NetworkSpec spec_;
    std::vector<Shape> shapes_;
    std::vector<LayerState> layers_;
    Tensor<T> shared_unit_;
    bool track_in_eval_ = false;
};

} // namespace ftn
