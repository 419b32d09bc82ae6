#pragma once

// Tape-based reverse-mode automatic differentiation over dense double tensors.
//
// A Graph is an append-only record of operations. Every op appends one node
// whose parents precede it, so creation order is a topological order. The
// backward sweep walks node ids in decreasing order. When a sweep is asked to
// retain the graph for higher order, the gradient computation itself is
// recorded with the same ops, so the returned gradients are ordinary nodes that
// can be differentiated again (gradients of gradients, as needed to
// differentiate through an inner-loop update).
//
// Broadcasting is limited to a bias vector over the last axis.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cavia/array.hpp"

namespace cavia::ad {

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
    leaf,
    constant,
    add,
    sub,
    mul,
    square,
    relu,
    tanh,
    exp,
    affine,  // scale * a + shift
    matmul,
    concat_last,
    slice_last,
    pad_last,
    reshape,
    reduce_sum,
    reduce_mean,
    broadcast,
    log_softmax,
};

const char* op_name(OpKind op);

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
class Tensor {
public:
    Tensor() = default;
    Tensor(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

    NodeId node_id() const noexcept { return id_; }
    Graph* graph() const noexcept { return graph_; }
    bool valid() const noexcept { return graph_ != nullptr && id_ >= 0; }

    const Array& value() const;
    const Shape& shape() const;
    bool requires_grad() const;
    double item() const { return value().item(); }

private:
    Graph* graph_ = nullptr;
    NodeId id_ = -1;
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // A differentiable input (parameter or context vector).
    Tensor leaf(Array value, bool requires_grad = true);
    // A non-differentiable input (data, masks, seeds).
    Tensor constant(Array value);

    std::size_t size() const noexcept { return nodes_.size(); }
    const Array& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    OpKind op(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].op; }
    std::pair<NodeId, NodeId> parents(NodeId id) const {
        const auto& n = nodes_[static_cast<std::size_t>(id)];
        return {n.parent0, n.parent1};
    }

    // While recording is off every op yields a constant node.
    bool recording() const noexcept { return recording_; }

    // Number of times the backward rule of `id` ran over the lifetime of the graph.
    std::uint32_t backward_calls(NodeId id) const;

    class NoRecordGuard {
    public:
        explicit NoRecordGuard(Graph& g) : graph_(g), saved_(g.recording_) { g.recording_ = false; }
        ~NoRecordGuard() { graph_.recording_ = saved_; }
        NoRecordGuard(const NoRecordGuard&) = delete;
        NoRecordGuard& operator=(const NoRecordGuard&) = delete;

    private:
        Graph& graph_;
        bool saved_;
    };

private:
    friend class Ops;

    struct Node {
        OpKind op = OpKind::constant;
        NodeId parent0 = -1;
        NodeId parent1 = -1;
        bool requires_grad = false;
        // Op attributes: scale/shift for affine, flags/offsets/axes for the rest.
        double c0 = 0.0;
        double c1 = 0.0;
        std::int64_t i0 = 0;
        std::int64_t i1 = 0;
        Array value;
    };

    Tensor append(Node node);
    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    void count_backward(NodeId id);

    std::vector<Node> nodes_;
    std::vector<std::uint32_t> backward_calls_;
    bool recording_ = true;
};

// ---- ops -------------------------------------------------------------------

Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor square(Tensor a);
Tensor relu(Tensor a);
Tensor tanh(Tensor a);
Tensor exp(Tensor a);
Tensor scale(Tensor a, double factor);
Tensor affine(Tensor a, double factor, double shift);
Tensor neg(Tensor a);

// a: [m x k] (or [k x m] with transpose_a), b: [k x n] (or [n x k] with transpose_b).
Tensor matmul(Tensor a, Tensor b, bool transpose_a = false, bool transpose_b = false);

// a: [... x p], b: [... x q] or a [q] vector broadcast over the rows of a 2-D `a`.
Tensor concat_last_axis(Tensor a, Tensor b);
Tensor slice_last_axis(Tensor a, std::size_t offset, std::size_t length);
Tensor pad_last_axis(Tensor a, std::size_t offset, std::size_t width);
Tensor reshape(Tensor a, Shape shape);

// axis < 0 reduces over all elements and yields a rank-0 tensor.
Tensor sum(Tensor a, int axis = -1);
Tensor mean(Tensor a, int axis = -1);
// Inverse of a reduction: re-inserts `axis` with the given extent (axis < 0
// expands a scalar to `target` shape).
Tensor broadcast(Tensor a, int axis, std::size_t extent);
Tensor broadcast_to(Tensor a, const Shape& target);

Tensor log_softmax_rows(Tensor logits);

// ---- losses ------------------------------------------------------------------

// Mean over all M*d squared differences.
Tensor loss_mse(Tensor pred, Tensor target);
// Mean negative log-softmax of the true class; labels in [0, C).
Tensor loss_softmax_xent(Tensor logits, std::span<const int> labels);

// ---- gradients ---------------------------------------------------------------

class GradientMap {
public:
    void insert(NodeId id, Tensor grad) { entries_.emplace_back(id, grad); }
    Tensor operator[](const Tensor& wrt) const { return at(wrt.node_id()); }
    Tensor at(NodeId id) const;
    bool contains(NodeId id) const;
    std::size_t size() const noexcept { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::vector<std::pair<NodeId, Tensor>> entries_;
};

// Reverse-mode gradient of a scalar `output` with respect to every tensor in
// `wrt`. Tensors the output does not depend on receive zeros. With
// `retain_for_higher_order` the returned gradients are recorded graph nodes.
GradientMap grad(Tensor output, std::span<const Tensor> wrt, bool retain_for_higher_order);
GradientMap grad(Tensor output, std::initializer_list<Tensor> wrt, bool retain_for_higher_order);

}  // namespace cavia::ad
