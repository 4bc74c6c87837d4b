#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "saessv/tensor.hpp"

namespace saessv::nd {

class Graph;

// Handle to a node on a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }
};

// Dynamic reverse-mode tape. Nodes are appended in creation order, which is
// a topological order, so backward() is a single reverse sweep.
class Graph {
public:
    // Receives the gradient of the loss w.r.t. this node's output and
    // scatters contributions into its inputs via accumulate().
    using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf whose gradient is tracked iff t.requires_grad().
    Var input(Tensor t);
    Var param(Tensor t);
    Var constant(Tensor t);

    const Tensor& value(Var v) const;
    // Zero tensor of the right shape when no gradient reached the node.
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

    void backward(Var loss);

    // Used by operation implementations.
    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
    void accumulate(Var target, const Tensor& contribution);
    Tensor& grad_buffer(Var target);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    void check_owner(Var v) const;

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

}  // namespace saessv::nd
