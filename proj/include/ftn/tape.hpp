#pragma once

#include "ftn/error.hpp"
#include "ftn/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ftn {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Arguments handed to an op's backward rule.
///
/// `inputs_grad[k]` is null when input k does not need a gradient; rules must
/// accumulate (+=) into non-null entries since a node can feed several ops.
template <typename T>
struct BackwardArgs {
    const Tensor<T>& grad_out;
    const Tensor<T>& out;
    std::span<const Tensor<T>* const> inputs;
    std::span<Tensor<T>* const> inputs_grad;
};

template <typename T>
using BackwardFn = std::function<void(const BackwardArgs<T>&)>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so every input
/// id precedes its consumer and a reverse sweep is a valid topological order.
template <typename T>
class Tape {
public:
    struct Node {
        std::string op;
        std::vector<std::size_t> inputs;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        bool trainable = false;
        BackwardFn<T> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf node. Trainable leaves receive gradients from backward().
    Var<T> leaf(Tensor<T> value, bool trainable = true) {
        Node n;
        n.op = trainable ? "param" : "const";
        n.value = std::move(value);
        n.requires_grad = trainable;
        n.trainable = trainable;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    /// Appends an op result. The backward rule is kept only when at least one
    /// input is tracked.
    Var<T> record(std::string op, std::vector<Var<T>> inputs, Tensor<T> value, BackwardFn<T> backward) {
        Node n;
        n.op = std::move(op);
        n.value = std::move(value);
        for (const auto& in : inputs) {
            if (in.tape != this) throw Error(ErrorCategory::generic, n.op + ": input belongs to another tape");
            n.inputs.push_back(in.id);
            n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
    void backward(Var<T> loss) {
        if (loss.tape != this) throw Error(ErrorCategory::generic, "backward: loss belongs to another tape");
        if (nodes_.at(loss.id).value.size() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " +
                             to_string(nodes_[loss.id].value.shape()));
        }
        for (auto& n : nodes_) n.grad = Tensor<T>();
        nodes_[loss.id].grad = Tensor<T>(nodes_[loss.id].value.shape(), T{1});

        std::vector<const Tensor<T>*> in_values;
        std::vector<Tensor<T>*> in_grads;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.backward || n.grad.empty()) continue;
            in_values.clear();
            in_grads.clear();
            for (auto in : n.inputs) {
                Node& src = nodes_[in];
                in_values.push_back(&src.value);
                if (src.requires_grad) {
                    if (src.grad.empty()) src.grad = Tensor<T>(src.value.shape(), T{0});
                    in_grads.push_back(&src.grad);
                } else {
                    in_grads.push_back(nullptr);
                }
            }
            n.backward(BackwardArgs<T>{n.grad, n.value, in_values, in_grads});
        }
    }

    /// Gradient of the last backward() loss w.r.t. `v`; zeros when `v` did not
    /// influence the loss.
    Tensor<T> grad(Var<T> v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{0});
        return n.grad;
    }

    /// Ids of all trainable leaves, in creation order.
    std::vector<std::size_t> trainable_leaves() const {
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].trainable) ids.push_back(i);
        }
        return ids;
    }

private:
    std::vector<Node> nodes_;
};

} // namespace ftn
