#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pia/tensor.hpp"

namespace pia {

enum class Prim {
    leaf,
    constant,
    conv2d,
    relu,
    sigmoid,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    channel_max_pool,
    channel_avg_pool,
    concat,
    global_avg_pool,
    global_max_pool,
    linear,
    batch_norm,
    log_softmax,
    l2_normalize,
    dot,
    mean,
    sum,
    abs,
    spatial_mask,
    gather_rows,
};

inline const char* prim_name(Prim p) {
    switch (p) {
        case Prim::leaf: return "leaf";
        case Prim::constant: return "constant";
        case Prim::conv2d: return "conv2d";
        case Prim::relu: return "relu";
        case Prim::sigmoid: return "sigmoid";
        case Prim::add: return "add";
        case Prim::sub: return "sub";
        case Prim::mul: return "mul";
        case Prim::scale: return "scale";
        case Prim::add_scalar: return "add_scalar";
        case Prim::channel_max_pool: return "channel_max_pool";
        case Prim::channel_avg_pool: return "channel_avg_pool";
        case Prim::concat: return "concat";
        case Prim::global_avg_pool: return "global_avg_pool";
        case Prim::global_max_pool: return "global_max_pool";
        case Prim::linear: return "linear";
        case Prim::batch_norm: return "batch_norm";
        case Prim::log_softmax: return "log_softmax";
        case Prim::l2_normalize: return "l2_normalize";
        case Prim::dot: return "dot";
        case Prim::mean: return "mean";
        case Prim::sum: return "sum";
        case Prim::abs: return "abs";
        case Prim::spatial_mask: return "spatial_mask";
        case Prim::gather_rows: return "gather_rows";
    }
    return "?";
}

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    double item() const { return value().item(); }
    bool requires_grad() const;
};

/// Define-by-run record of primitive applications. Nodes are appended in
/// execution order, which is a topological order of the graph; backward
/// visits them once in reverse.
class Tape {
public:
    // Receives the tape, the node's own index and its upstream gradient; adds
    // into the gradient buffers of its inputs via grad_of().
    using BackwardFn = std::function<void(Tape&, std::size_t self, const std::vector<double>& upstream)>;

    struct Node {
        Prim kind = Prim::constant;
        Tensor value;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardFn backward;
        Tensor* bound = nullptr;  // leaf parameter receiving the gradient
        std::vector<double> grad;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Records a parameter leaf. Gradients are accumulated into `param.grad`
    /// after backward() when `param.requires_grad` is set.
    Var param(Tensor& param) {
        Node n;
        n.kind = Prim::leaf;
        n.value = Tensor(param.shape, param.data);
        n.requires_grad = param.requires_grad;
        n.bound = param.requires_grad ? &param : nullptr;
        return push(std::move(n));
    }

    Var constant(Tensor value) {
        Node n;
        n.kind = Prim::constant;
        value.requires_grad = false;
        value.grad.reset();
        n.value = std::move(value);
        return push(std::move(n));
    }

    Var constant(double v) { return constant(Tensor::scalar(v)); }

    /// Appends the result of a primitive. The backward rule is kept only when
    /// some input requires gradients.
    Var record(Prim kind, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
        Node n;
        n.kind = kind;
        n.value = std::move(value);
        for (const auto& v : inputs) {
            if (v.tape != this) throw TapeError(std::string(prim_name(kind)) + ": input recorded on a different tape");
            n.inputs.push_back(v.id);
            n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(backward);
        return push(std::move(n));
    }

    const Node& node(std::size_t i) const { return nodes_.at(i); }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Gradient buffer of node `i`, or nullptr when it does not require gradients.
    std::vector<double>* grad_of(std::size_t i) {
        auto& n = nodes_[i];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return &n.grad;
    }

    /// Reverse pass from a scalar output. A tape supports exactly one pass.
    void backward(Var output) {
        if (output.tape != this) throw TapeError("backward: output belongs to a different tape");
        if (consumed_) throw TapeError("backward: stale tape (backward already ran on this tape)");
        const auto& out = nodes_.at(output.id);
        if (!out.value.shape.empty()) {
            throw TapeError("backward: output must be a scalar, got shape " + to_string(out.value.shape));
        }
        consumed_ = true;
        if (!out.requires_grad) return;
        grad_of(output.id)->assign(1, 1.0);
        for (std::size_t i = output.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i, n.grad);
            if (n.bound) n.bound->accumulate_grad(n.grad);
        }
    }

    /// Smallest observed distance of any relu/abs/max input to its kink.
    double kink_margin() const { return kink_margin_; }
    void note_kink(double margin) {
        if (margin < kink_margin_) kink_margin_ = margin;
    }

private:
    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
    double kink_margin_ = std::numeric_limits<double>::infinity();
};

inline const Tensor& Var::value() const { return tape->node(id).value; }
inline bool Var::requires_grad() const { return tape->node(id).requires_grad; }

}  // namespace pia
