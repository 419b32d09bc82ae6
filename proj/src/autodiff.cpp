#include "cavia/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "cavia/errors.hpp"

namespace cavia::ad {

namespace {

enum Broadcast : std::int64_t { none = 0, lhs_vector = 1, rhs_vector = 2 };

Graph& graph_of(const Tensor& a) {
    if (!a.valid()) throw ContractError("operation on an unbound tensor");
    return *a.graph();
}

Graph& graph_of(const Tensor& a, const Tensor& b) {
    Graph& g = graph_of(a);
    if (&graph_of(b) != &g) throw ContractError("operands belong to different graphs");
    return g;
}

// Decides how two elementwise operands line up: equal shapes, or a vector
// that matches the last axis of a 2-D operand.
Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return none;
    if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return rhs_vector;
    if (b.size() == 2 && a.size() == 1 && a[0] == b[1]) return lhs_vector;
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                         " are not broadcast-compatible");
}

std::vector<double> transposed(const Array& a) {
    const std::size_t r = a.shape[0], c = a.shape[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data[i * c + j];
    return out;
}

// C[m x n] = A[m x k] B[k x n], all row-major. Vector lanes run across the
// columns of C, and every entry accumulates over k in increasing order, so the
// result is bit-identical whatever the alignment or the number of rows.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* c0 = c + i * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        const double* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double y = brow[j];
                c0[j] += x0 * y;
                c1[j] += x1 * y;
                c2[j] += x2 * y;
                c3[j] += x3 * y;
            }
        }
    }
    for (; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double x = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += x * brow[j];
        }
    }
}

void check_finite(const Array& v, OpKind op) {
    for (double x : v.data)
        if (!std::isfinite(x))
            throw NumericError(std::string("non-finite value produced by ") + op_name(op));
}

template <class F>
Array binary_values(const Array& a, const Array& b, Broadcast kind, F f) {
    if (kind == none) {
        Array out(a.shape);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    const Array& big = kind == rhs_vector ? a : b;
    const Array& vec = kind == rhs_vector ? b : a;
    Array out(big.shape);
    const std::size_t cols = vec.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = vec[i % cols];
        out[i] = kind == rhs_vector ? f(big[i], v) : f(v, big[i]);
    }
    return out;
}

template <class F>
Array unary_values(const Array& a, F f) {
    Array out(a.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
    return out;
}

std::size_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::leaf: return "leaf";
        case OpKind::constant: return "constant";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::square: return "square";
        case OpKind::relu: return "relu";
        case OpKind::tanh: return "tanh";
        case OpKind::exp: return "exp";
        case OpKind::affine: return "affine";
        case OpKind::matmul: return "matmul";
        case OpKind::concat_last: return "concat_last_axis";
        case OpKind::slice_last: return "slice_last_axis";
        case OpKind::pad_last: return "pad_last_axis";
        case OpKind::reshape: return "reshape";
        case OpKind::reduce_sum: return "sum";
        case OpKind::reduce_mean: return "mean";
        case OpKind::broadcast: return "broadcast";
        case OpKind::log_softmax: return "log_softmax_rows";
    }
    return "?";
}

// ---- Tensor / Graph ------------------------------------------------------------

const Array& Tensor::value() const { return graph_of(*this).value(id_); }
const Shape& Tensor::shape() const { return value().shape; }
bool Tensor::requires_grad() const { return graph_of(*this).requires_grad(id_); }

Tensor Graph::leaf(Array value, bool requires_grad) {
    check_finite(value, OpKind::leaf);
    Node n;
    n.op = OpKind::leaf;
    n.requires_grad = requires_grad && recording_;
    n.value = std::move(value);
    return append(std::move(n));
}

Tensor Graph::constant(Array value) {
    Node n;
    n.op = OpKind::constant;
    n.value = std::move(value);
    return append(std::move(n));
}

Tensor Graph::append(Node n) {
    const bool needs =
        recording_ && ((n.parent0 >= 0 && node(n.parent0).requires_grad) ||
                       (n.parent1 >= 0 && node(n.parent1).requires_grad));
    if (n.op != OpKind::leaf) {
        n.requires_grad = needs;
        if (!needs) {
            // Untracked results are plain constants: no parent links survive.
            n.op = OpKind::constant;
            n.parent0 = n.parent1 = -1;
        }
    }
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<NodeId>(nodes_.size() - 1));
}

std::uint32_t Graph::backward_calls(NodeId id) const {
    const auto i = static_cast<std::size_t>(id);
    return i < backward_calls_.size() ? backward_calls_[i] : 0;
}

void Graph::count_backward(NodeId id) {
    const auto i = static_cast<std::size_t>(id);
    if (backward_calls_.size() <= i) backward_calls_.resize(nodes_.size(), 0);
    ++backward_calls_[i];
}

// Builds nodes and holds the backward rules. Friend of Graph.
class Ops {
public:
    static Tensor make(Graph& g, OpKind op, Array value, NodeId p0, NodeId p1 = -1, double c0 = 0.0,
                       double c1 = 0.0, std::int64_t i0 = 0, std::int64_t i1 = 0) {
        check_finite(value, op);
        Graph::Node n;
        n.op = op;
        n.parent0 = p0;
        n.parent1 = p1;
        n.c0 = c0;
        n.c1 = c1;
        n.i0 = i0;
        n.i1 = i1;
        n.value = std::move(value);
        return g.append(std::move(n));
    }

    // Applies the backward rule of node `id` given its upstream gradient,
    // accumulating contributions into `grads` for parents flagged in `dep`.
    static void backward(Graph& g, NodeId id, Tensor upstream, const std::vector<char>& dep,
                         std::vector<Tensor>& grads);
};

namespace {

void accumulate(std::vector<Tensor>& grads, NodeId parent, Tensor contribution) {
    auto& slot = grads[static_cast<std::size_t>(parent)];
    slot = slot.valid() ? add(slot, contribution) : contribution;
}

// Sums a gradient back down to a broadcast vector operand's shape.
Tensor unbroadcast(Tensor grad, const Shape& target) {
    return grad.shape() == target ? grad : sum(grad, 0);
}

}  // namespace

void Ops::backward(Graph& g, NodeId id, Tensor up, const std::vector<char>& dep, std::vector<Tensor>& grads) {
    // Copy what we need: appending nodes may reallocate the node storage.
    const Graph::Node& ref = g.node(id);
    const OpKind op = ref.op;
    const NodeId p0 = ref.parent0;
    const NodeId p1 = ref.parent1;
    const double c0 = ref.c0;
    const std::int64_t i0 = ref.i0;
    const std::int64_t i1 = ref.i1;

    const auto want = [&](NodeId p) { return p >= 0 && dep[static_cast<std::size_t>(p)]; };
    const Tensor self(&g, id);
    const Tensor a(&g, p0);
    const Tensor b(&g, p1);
    // Shapes are copied too; references into node storage dangle once ops append.
    const Shape a_shape = p0 >= 0 ? a.shape() : Shape{};
    const Shape b_shape = p1 >= 0 ? b.shape() : Shape{};
    const Shape self_shape = self.shape();

    g.count_backward(id);

    switch (op) {
        case OpKind::leaf:
        case OpKind::constant:
            return;
        case OpKind::add:
            if (want(p0)) accumulate(grads, p0, unbroadcast(up, a_shape));
            if (want(p1)) accumulate(grads, p1, unbroadcast(up, b_shape));
            return;
        case OpKind::sub:
            if (want(p0)) accumulate(grads, p0, unbroadcast(up, a_shape));
            if (want(p1)) accumulate(grads, p1, unbroadcast(neg(up), b_shape));
            return;
        case OpKind::mul:
            if (want(p0)) accumulate(grads, p0, unbroadcast(mul(up, b), a_shape));
            if (want(p1)) accumulate(grads, p1, unbroadcast(mul(up, a), b_shape));
            return;
        case OpKind::square:
            if (want(p0)) accumulate(grads, p0, scale(mul(up, a), 2.0));
            return;
        case OpKind::relu: {
            if (!want(p0)) return;
            Array mask = unary_values(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
            accumulate(grads, p0, mul(up, g.constant(std::move(mask))));
            return;
        }
        case OpKind::tanh:
            if (want(p0)) accumulate(grads, p0, mul(up, affine(square(self), -1.0, 1.0)));
            return;
        case OpKind::exp:
            if (want(p0)) accumulate(grads, p0, mul(up, self));
            return;
        case OpKind::affine:
            if (want(p0)) accumulate(grads, p0, scale(up, c0));
            return;
        case OpKind::matmul: {
            const bool ta = i0 != 0;
            const bool tb = i1 != 0;
            if (want(p0)) accumulate(grads, p0, ta ? matmul(b, up, tb, true) : matmul(up, b, false, !tb));
            if (want(p1)) accumulate(grads, p1, tb ? matmul(up, a, true, ta) : matmul(a, up, !ta, false));
            return;
        }
        case OpKind::concat_last: {
            const std::size_t p = last_extent(a_shape);
            const std::size_t q = last_extent(b_shape);
            if (want(p0)) accumulate(grads, p0, slice_last_axis(up, 0, p));
            if (want(p1)) accumulate(grads, p1, unbroadcast(slice_last_axis(up, p, q), b_shape));
            return;
        }
        case OpKind::slice_last:
            if (want(p0)) accumulate(grads, p0, pad_last_axis(up, static_cast<std::size_t>(i0), last_extent(a_shape)));
            return;
        case OpKind::pad_last:
            if (want(p0)) accumulate(grads, p0, slice_last_axis(up, static_cast<std::size_t>(i0), last_extent(a_shape)));
            return;
        case OpKind::reshape:
            if (want(p0)) accumulate(grads, p0, reshape(up, a_shape));
            return;
        case OpKind::reduce_sum:
        case OpKind::reduce_mean: {
            if (!want(p0)) return;
            const Shape& in = a_shape;
            Tensor spread = i0 < 0 ? broadcast_to(up, in)
                                   : broadcast(up, static_cast<int>(i0), in[static_cast<std::size_t>(i0)]);
            if (op == OpKind::reduce_mean) {
                const double n = i0 < 0 ? static_cast<double>(numel(in))
                                        : static_cast<double>(in[static_cast<std::size_t>(i0)]);
                spread = scale(spread, 1.0 / n);
            }
            accumulate(grads, p0, spread);
            return;
        }
        case OpKind::broadcast:
            if (want(p0)) accumulate(grads, p0, i0 < 0 ? sum(up) : sum(up, static_cast<int>(i0)));
            return;
        case OpKind::log_softmax: {
            if (!want(p0)) return;
            const Shape& s = self_shape;
            Tensor row_sums = s.size() == 2 ? broadcast(sum(up, 1), 1, s[1]) : broadcast_to(sum(up), s);
            accumulate(grads, p0, sub(up, mul(exp(self), row_sums)));
            return;
        }
    }
}

// ---- elementwise ---------------------------------------------------------------

Tensor add(Tensor a, Tensor b) {
    Graph& g = graph_of(a, b);
    const auto kind = broadcast_kind(a.shape(), b.shape(), "add");
    return Ops::make(g, OpKind::add, binary_values(a.value(), b.value(), kind, std::plus<>()), a.node_id(),
                     b.node_id());
}

Tensor sub(Tensor a, Tensor b) {
    Graph& g = graph_of(a, b);
    const auto kind = broadcast_kind(a.shape(), b.shape(), "sub");
    return Ops::make(g, OpKind::sub, binary_values(a.value(), b.value(), kind, std::minus<>()), a.node_id(),
                     b.node_id());
}

Tensor mul(Tensor a, Tensor b) {
    Graph& g = graph_of(a, b);
    const auto kind = broadcast_kind(a.shape(), b.shape(), "mul");
    return Ops::make(g, OpKind::mul, binary_values(a.value(), b.value(), kind, std::multiplies<>()), a.node_id(),
                     b.node_id());
}

Tensor square(Tensor a) {
    return Ops::make(graph_of(a), OpKind::square, unary_values(a.value(), [](double x) { return x * x; }),
                     a.node_id());
}

Tensor relu(Tensor a) {
    return Ops::make(graph_of(a), OpKind::relu, unary_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }),
                     a.node_id());
}

Tensor tanh(Tensor a) {
    return Ops::make(graph_of(a), OpKind::tanh, unary_values(a.value(), [](double x) { return std::tanh(x); }),
                     a.node_id());
}

Tensor exp(Tensor a) {
    return Ops::make(graph_of(a), OpKind::exp, unary_values(a.value(), [](double x) { return std::exp(x); }),
                     a.node_id());
}

Tensor affine(Tensor a, double factor, double shift) {
    return Ops::make(graph_of(a), OpKind::affine,
                     unary_values(a.value(), [=](double x) { return factor * x + shift; }), a.node_id(), -1, factor,
                     shift);
}

Tensor scale(Tensor a, double factor) { return affine(a, factor, 0.0); }
Tensor neg(Tensor a) { return affine(a, -1.0, 0.0); }

// ---- matmul --------------------------------------------------------------------

Tensor matmul(Tensor a, Tensor b, bool transpose_a, bool transpose_b) {
    Graph& g = graph_of(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2)
        throw DimensionError("matmul: expects matrices, got " + shape_str(sa) + " and " + shape_str(sb));
    const std::size_t m = transpose_a ? sa[1] : sa[0];
    const std::size_t k = transpose_a ? sa[0] : sa[1];
    const std::size_t kb = transpose_b ? sb[1] : sb[0];
    const std::size_t n = transpose_b ? sb[0] : sb[1];
    if (k != kb)
        throw DimensionError("matmul: inner dimensions differ for " + shape_str(sa) + (transpose_a ? "^T" : "") +
                             " x " + shape_str(sb) + (transpose_b ? "^T" : ""));

    Array out(Shape{m, n});
    if (k > 0) {
        const std::vector<double> at = transpose_a ? transposed(a.value()) : std::vector<double>();
        const std::vector<double> bt = transpose_b ? transposed(b.value()) : std::vector<double>();
        gemm(transpose_a ? at.data() : a.value().data.data(), transpose_b ? bt.data() : b.value().data.data(),
             out.data.data(), m, k, n);
    }
    return Ops::make(g, OpKind::matmul, std::move(out), a.node_id(), b.node_id(), 0.0, 0.0, transpose_a ? 1 : 0,
                     transpose_b ? 1 : 0);
}

// ---- structural ----------------------------------------------------------------

Tensor concat_last_axis(Tensor a, Tensor b) {
    Graph& g = graph_of(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.empty() || sb.empty()) throw DimensionError("concat_last_axis: scalar operand");

    const std::size_t p = sa.back();
    const std::size_t q = sb.back();
    const bool broadcast_rows = sa.size() == 2 && sb.size() == 1;
    if (!broadcast_rows && (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())))
        throw DimensionError("concat_last_axis: leading shapes differ for " + shape_str(sa) + " and " +
                             shape_str(sb));

    Shape shape = sa;
    shape.back() = p + q;
    Array out(shape);
    const std::size_t row_count = sa.size() == 2 ? sa[0] : 1;
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    for (std::size_t r = 0; r < row_count; ++r) {
        double* dst = out.data.data() + r * (p + q);
        std::copy_n(av.data() + r * p, p, dst);
        std::copy_n(bv.data() + (broadcast_rows ? 0 : r * q), q, dst + p);
    }
    return Ops::make(g, OpKind::concat_last, std::move(out), a.node_id(), b.node_id());
}

Tensor slice_last_axis(Tensor a, std::size_t offset, std::size_t length) {
    const Shape& sa = a.shape();
    if (sa.empty() || offset + length > sa.back())
        throw DimensionError("slice_last_axis: range [" + std::to_string(offset) + ", " +
                             std::to_string(offset + length) + ") outside " + shape_str(sa));
    const std::size_t w = sa.back();
    const std::size_t rows = sa.size() == 2 ? sa[0] : 1;
    Shape shape = sa;
    shape.back() = length;
    Array out(shape);
    const auto& av = a.value().data;
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * w + offset, length, out.data.data() + r * length);
    return Ops::make(graph_of(a), OpKind::slice_last, std::move(out), a.node_id(), -1, 0.0, 0.0,
                     static_cast<std::int64_t>(offset), static_cast<std::int64_t>(length));
}

Tensor pad_last_axis(Tensor a, std::size_t offset, std::size_t width) {
    const Shape& sa = a.shape();
    if (sa.empty() || offset + sa.back() > width)
        throw DimensionError("pad_last_axis: " + shape_str(sa) + " does not fit width " + std::to_string(width));
    const std::size_t len = sa.back();
    const std::size_t rows = sa.size() == 2 ? sa[0] : 1;
    Shape shape = sa;
    shape.back() = width;
    Array out(shape);
    const auto& av = a.value().data;
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * len, len, out.data.data() + r * width + offset);
    return Ops::make(graph_of(a), OpKind::pad_last, std::move(out), a.node_id(), -1, 0.0, 0.0,
                     static_cast<std::int64_t>(offset), static_cast<std::int64_t>(width));
}

Tensor reshape(Tensor a, Shape shape) {
    if (numel(shape) != numel(a.shape()))
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    Array out(std::move(shape), a.value().data);
    return Ops::make(graph_of(a), OpKind::reshape, std::move(out), a.node_id());
}

// ---- reductions ----------------------------------------------------------------

namespace {

Array reduce_values(const Array& in, int axis) {
    if (axis < 0) return Array::scalar(in.sum());
    const Shape& s = in.shape;
    if (static_cast<std::size_t>(axis) >= s.size())
        throw DimensionError("reduce: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    if (s.size() == 1) return Array::scalar(in.sum());
    if (s.size() != 2) throw DimensionError("reduce: only rank <= 2 supported, got " + shape_str(s));
    const std::size_t rows = s[0], cols = s[1];
    if (axis == 0) {
        Array out(Shape{cols});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out[c] += in[r * cols + c];
        return out;
    }
    Array out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += in[r * cols + c];
        out[r] = acc;
    }
    return out;
}

}  // namespace

Tensor sum(Tensor a, int axis) {
    Array out = reduce_values(a.value(), axis);
    return Ops::make(graph_of(a), OpKind::reduce_sum, std::move(out), a.node_id(), -1, 0.0, 0.0, axis);
}

Tensor mean(Tensor a, int axis) {
    Array out = reduce_values(a.value(), axis);
    const std::size_t n = axis < 0 ? numel(a.shape()) : a.shape()[static_cast<std::size_t>(axis)];
    if (n == 0) throw DimensionError("mean over an empty extent");
    for (double& v : out.data) v /= static_cast<double>(n);
    return Ops::make(graph_of(a), OpKind::reduce_mean, std::move(out), a.node_id(), -1, 0.0, 0.0, axis);
}

Tensor broadcast(Tensor a, int axis, std::size_t extent) {
    const Shape& s = a.shape();
    if (axis < 0 || static_cast<std::size_t>(axis) > s.size() || s.size() > 1)
        throw DimensionError("broadcast: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    Shape shape = s;
    shape.insert(shape.begin() + axis, extent);
    Array out(shape);
    const auto& av = a.value().data;
    if (s.empty()) {
        std::fill(out.data.begin(), out.data.end(), av[0]);
    } else if (axis == 0) {
        for (std::size_t r = 0; r < extent; ++r) std::copy(av.begin(), av.end(), out.data.begin() + r * s[0]);
    } else {
        for (std::size_t r = 0; r < s[0]; ++r) std::fill_n(out.data.begin() + r * extent, extent, av[r]);
    }
    return Ops::make(graph_of(a), OpKind::broadcast, std::move(out), a.node_id(), -1, 0.0, 0.0, axis);
}

Tensor broadcast_to(Tensor a, const Shape& target) {
    if (numel(a.shape()) != 1) throw DimensionError("broadcast_to: source must hold one element");
    Array out(target, a.value().data[0]);
    return Ops::make(graph_of(a), OpKind::broadcast, std::move(out), a.node_id(), -1, 0.0, 0.0, -1);
}

Tensor log_softmax_rows(Tensor logits) {
    const Array& in = logits.value();
    if (in.rank() != 1 && in.rank() != 2) throw DimensionError("log_softmax_rows: rank must be 1 or 2");
    const std::size_t cols = in.cols();
    const std::size_t rows = in.rank() == 2 ? in.shape[0] : 1;
    Array out(in.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in.data.data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[c] - lse;
    }
    return Ops::make(graph_of(logits), OpKind::log_softmax, std::move(out), logits.node_id());
}

// ---- losses --------------------------------------------------------------------

Tensor loss_mse(Tensor pred, Tensor target) {
    if (pred.shape() != target.shape())
        throw DimensionError("loss_mse: prediction " + shape_str(pred.shape()) + " vs target " +
                             shape_str(target.shape()));
    if (numel(pred.shape()) == 0) throw DimensionError("loss_mse: empty batch");
    return mean(square(sub(pred, target)));
}

Tensor loss_softmax_xent(Tensor logits, std::span<const int> labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw DimensionError("loss_softmax_xent: logits must be [M x C], got " + shape_str(s));
    if (labels.size() != s[0] || s[0] == 0)
        throw DimensionError("loss_softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                             shape_str(s) + " logits");
    const std::size_t classes = s[1];
    Array onehot(s);
    for (std::size_t m = 0; m < labels.size(); ++m) {
        if (labels[m] < 0 || static_cast<std::size_t>(labels[m]) >= classes)
            throw DomainError("loss_softmax_xent: label " + std::to_string(labels[m]) + " outside [0, " +
                              std::to_string(classes) + ")");
        onehot.at(m, static_cast<std::size_t>(labels[m])) = 1.0;
    }
    Graph& g = graph_of(logits);
    Tensor picked = mul(log_softmax_rows(logits), g.constant(std::move(onehot)));
    return scale(sum(picked), -1.0 / static_cast<double>(labels.size()));
}

// ---- gradients -----------------------------------------------------------------

Tensor GradientMap::at(NodeId id) const {
    for (const auto& [key, g] : entries_)
        if (key == id) return g;
    throw ContractError("no gradient recorded for node " + std::to_string(id));
}

bool GradientMap::contains(NodeId id) const {
    return std::any_of(entries_.begin(), entries_.end(), [id](const auto& e) { return e.first == id; });
}

GradientMap grad(Tensor output, std::span<const Tensor> wrt, bool retain_for_higher_order) {
    Graph& g = graph_of(output);
    if (numel(output.shape()) != 1)
        throw ContractError("grad: output must be a scalar, got shape " + shape_str(output.shape()));

    const NodeId out = output.node_id();
    const auto count = static_cast<std::size_t>(out) + 1;

    // Nodes on a path from some `wrt` tensor to the output.
    std::vector<char> dep(count, 0);
    NodeId first = out;
    for (const Tensor& w : wrt) {
        if (&graph_of(w) != &g) throw ContractError("grad: wrt tensor from a different graph");
        if (w.node_id() <= out) {
            dep[static_cast<std::size_t>(w.node_id())] = 1;
            first = std::min(first, w.node_id());
        }
    }
    for (NodeId id = first; id <= out; ++id) {
        auto [p0, p1] = g.parents(id);
        if ((p0 >= 0 && dep[static_cast<std::size_t>(p0)]) || (p1 >= 0 && dep[static_cast<std::size_t>(p1)]))
            dep[static_cast<std::size_t>(id)] = 1;
    }

    std::optional<Graph::NoRecordGuard> no_record;
    if (!retain_for_higher_order) no_record.emplace(g);

    std::vector<Tensor> grads(count);
    if (dep[static_cast<std::size_t>(out)]) {
        grads[static_cast<std::size_t>(out)] = g.constant(Array(output.shape(), 1.0));
        for (NodeId id = out; id >= first; --id) {
            const Tensor up = grads[static_cast<std::size_t>(id)];
            if (!up.valid() || !dep[static_cast<std::size_t>(id)]) continue;
            const OpKind op = g.op(id);
            if (op == OpKind::leaf || op == OpKind::constant) continue;
            Ops::backward(g, id, up, dep, grads);
        }
    }

    GradientMap result;
    for (const Tensor& w : wrt) {
        const auto i = static_cast<std::size_t>(w.node_id());
        Tensor gw = i < count && grads[i].valid() ? grads[i] : g.constant(Array(w.shape(), 0.0));
        result.insert(w.node_id(), gw);
    }
    return result;
}

GradientMap grad(Tensor output, std::initializer_list<Tensor> wrt, bool retain_for_higher_order) {
    return grad(output, std::span<const Tensor>(wrt.begin(), wrt.size()), retain_for_higher_order);
}

}  // namespace cavia::ad
