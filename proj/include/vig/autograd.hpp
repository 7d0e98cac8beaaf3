#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vig/core.hpp"

namespace vig {

/// Trainable (or stateful) tensor owned by a model. Gradients accumulate
/// additively across backward passes; callers zero them between steps.
template <class Real>
struct Parameter {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<Real> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape), trainable(train) {}

    void zero_grad() { grad.fill(Real(0)); }
};

template <class Real>
class Tape;

/// Lightweight handle to a tape node.
template <class Real>
struct Var {
    Tape<Real>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
};

// ---------------------------------------------------------------------------
// Tape: the recorded trace of forward operations, in execution order (which
// is a topological order by construction: every node is appended after its
// inputs). backward() replays it once in reverse.
// ---------------------------------------------------------------------------

template <class Real>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;  // empty until first accumulation
        const char* op = "leaf";
        std::vector<int> inputs;
        BackwardFn backward;  // null for leaves / grad-free nodes
        bool requires_grad = false;
        Parameter<Real>* bound = nullptr;  // set for parameter leaves
    };

    /// Constant leaf; gradients are not tracked through it.
    Var<Real> value(Tensor<Real> v) { return push_leaf(std::move(v), false, nullptr); }

    /// Differentiable leaf (an input under gradient check).
    Var<Real> input(Tensor<Real> v) { return push_leaf(std::move(v), true, nullptr); }

    /// Differentiable leaf bound to a persistent parameter; after backward()
    /// the leaf gradient is added into p.grad.
    Var<Real> param(Parameter<Real>& p) { return push_leaf(p.value, true, &p); }

    /// Records an operation node. `backward` may be null when no input
    /// requires gradients (it is then never invoked).
    Var<Real> make_node(const char* op, std::vector<int> inputs, Tensor<Real> value,
                        BackwardFn backward) {
        debug_check_finite(value, op);
        Node n;
        n.value = std::move(value);
        n.op = op;
        n.inputs = std::move(inputs);
        for (int i : n.inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var<Real>{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<Real>& val(Var<Real> v) const { return nodes_[v.id].value; }
    const Tensor<Real>& val(int id) const { return nodes_[id].value; }

    bool requires_grad(Var<Real> v) const { return nodes_[v.id].requires_grad; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of a node, allocated (zero) on first use.
    Tensor<Real>& grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor<Real>(n.value.shape);
        return n.grad;
    }
    Tensor<Real>& grad(Var<Real> v) { return grad(v.id); }

    bool has_grad(int id) const { return !nodes_[id].grad.data.empty(); }

    /// Reverse sweep from a scalar loss. Each recorded operation's backward
    /// runs at most once; leaf gradients are added into bound parameters.
    /// Returns the number of backward functions invoked.
    std::size_t backward(Var<Real> loss) {
        if (loss.tape != this) throw ConfigError("backward: loss var belongs to another tape");
        const Node& ln = nodes_[loss.id];
        if (ln.value.size() != 1)
            throw ConfigError("backward requires a scalar loss, got shape " +
                              shape_str(ln.value.shape));
        grad(loss.id).data[0] = Real(1);
        std::size_t visited = 0;
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.grad.data.empty() || !n.backward) continue;
            n.backward(*this, id);
            ++visited;
        }
        for (Node& n : nodes_) {
            if (n.bound && !n.grad.data.empty()) {
                Tensor<Real>& pg = n.bound->grad;
                for (std::size_t i = 0; i < pg.size(); ++i) pg.data[i] += n.grad.data[i];
            }
        }
        return visited;
    }

    std::size_t size() const { return nodes_.size(); }
    const char* op_kind(int id) const { return nodes_[id].op; }
    const std::vector<int>& op_inputs(int id) const { return nodes_[id].inputs; }

private:
    Var<Real> push_leaf(Tensor<Real> v, bool needs_grad, Parameter<Real>* bound) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = needs_grad;
        n.bound = bound;
        nodes_.push_back(std::move(n));
        return Var<Real>{this, static_cast<int>(nodes_.size()) - 1};
    }

    // deque: node references returned by val()/grad() stay valid while more
    // operations are recorded
    std::deque<Node> nodes_;
};

template <class Real>
inline void require_same_tape(Var<Real> a, Var<Real> b, const char* op) {
    if (a.tape != b.tape)
        throw ConfigError(std::string(op) + ": operands recorded on different tapes");
}

}  // namespace vig
