#include "saessv/graph.hpp"

#include "saessv/error.hpp"

namespace saessv::nd {

const Tensor& Var::value() const { return graph->value(*this); }
const Tensor& Var::grad() const { return graph->grad(*this); }

Var Graph::input(Tensor t) {
    if (!t.all_finite()) throw NonFiniteError("non-finite value in graph input");
    Node node;
    node.requires_grad = t.requires_grad();
    node.value = std::move(t);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Var Graph::param(Tensor t) {
    t.set_requires_grad(true);
    return input(std::move(t));
}

Var Graph::constant(Tensor t) {
    t.set_requires_grad(false);
    return input(std::move(t));
}

void Graph::check_owner(Var v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw GraphError("variable does not belong to this graph");
}

const Tensor& Graph::value(Var v) const {
    check_owner(v);
    return nodes_[v.id].value;
}

const Tensor& Graph::grad(Var v) const {
    check_owner(v);
    auto& node = const_cast<Node&>(nodes_[v.id]);
    if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
    return node.grad;
}

bool Graph::requires_grad(Var v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    if (!value.all_finite()) throw NonFiniteError("operation produced a non-finite value");
    bool tracked = false;
    for (auto in : inputs) {
        check_owner(in);
        tracked = tracked || nodes_[in.id].requires_grad;
    }
    Node node;
    node.value = std::move(value);
    node.requires_grad = tracked;
    if (tracked) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad_buffer(Var target) {
    auto& node = nodes_[target.id];
    if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
    return node.grad;
}

void Graph::accumulate(Var target, const Tensor& contribution) {
    check_owner(target);
    if (!nodes_[target.id].requires_grad) return;
    auto& g = grad_buffer(target);
    if (g.numel() != contribution.numel()) throw ShapeError("gradient contribution has the wrong size");
    auto dst = g.data();
    auto src = contribution.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Graph::backward(Var loss) {
    check_owner(loss);
    if (consumed_) throw GraphError("graph already consumed by a previous backward pass");
    if (nodes_[loss.id].value.numel() != 1) {
        throw GraphError("backward() needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss).fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
        // Move the closure out so its captures die with this sweep.
        auto fn = std::move(node.backward);
        fn(*this, node.grad);
    }
}

}  // namespace saessv::nd
