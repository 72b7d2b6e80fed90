#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vmim {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class AutodiffError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NodeRef {
    std::uint64_t graph = 0;
    std::size_t index = 0;
};

// Dense row-major float64 tensor. The shape and the data are immutable once
// constructed; copies share storage. `node` links the tensor to the graph it
// was recorded in, if any.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    std::span<const double> data() const;
    double item() const;
    double operator[](std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    std::optional<NodeRef> node() const;

    // Same values, no gradient tracking.
    Tensor detach() const;
    // Same values as a fresh leaf with requires_grad set.
    Tensor as_parameter() const;

private:
    friend class Graph;
    struct Impl {
        Shape shape;
        std::vector<double> data;
        bool requires_grad = false;
        mutable std::optional<NodeRef> node;
    };
    std::shared_ptr<const Impl> impl_;
};

enum class OpKind {
    add,
    sub,
    mul,
    div,
    scale,
    matmul,
    reshape,
    permute,
    concat,
    slice,
    gather_rows,
    scatter_rows,
    softmax,
    log_softmax,
    layernorm,
    gelu,
    linear,
    mean,
    sum,
    transpose_conv3d,
    embedding_add,
    abs,
    square,
    sqrt,
    exp,
    log,
};

std::string_view op_name(OpKind kind);
// Throws std::invalid_argument("unknown op-kind ...") for unrecognised names.
OpKind op_kind_from_name(std::string_view name);

struct OpAttrs {
    double factor = 1.0;                    // scale
    double eps = 1e-6;                      // layernorm
    std::size_t axis = 0;                   // softmax, concat, slice
    std::optional<std::size_t> reduce_axis; // sum/mean; nullopt reduces everything
    std::size_t start = 0;                  // slice
    std::size_t length = 0;                 // slice
    std::size_t rows = 0;                   // scatter_rows output rows
    std::size_t stride = 1;                 // transpose_conv3d
    Shape shape;                            // reshape
    std::vector<std::size_t> perm;          // permute
    std::vector<std::size_t> indices;       // gather/scatter rows, embedding ids
};

class GradientMap;

// Append-only tape of recorded operations. Inputs always precede outputs, so
// a reverse sweep over creation order visits every node after all of its
// consumers.
class Graph {
public:
    Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    // Registers a requires_grad leaf so it receives a gradient even if unused.
    NodeRef watch(const Tensor& leaf);
    bool contains(const Tensor& t) const;

    Tensor record(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs, Tensor output);

    GradientMap backward(const Tensor& loss) const;

private:
    struct Node {
        OpKind kind{};
        bool leaf = true;
        std::vector<Tensor> inputs;
        std::vector<std::optional<std::size_t>> input_nodes;
        OpAttrs attrs;
        Tensor output;
    };
    std::uint64_t id_;
    std::vector<Node> nodes_;
};

class GradientMap {
public:
    GradientMap() = default;
    GradientMap(std::uint64_t graph, std::unordered_map<std::size_t, Tensor> grads)
        : graph_(graph), grads_(std::move(grads)) {}

    // Gradient for `t`; a zero tensor of t's shape when t did not take part.
    Tensor of(const Tensor& t) const;
    const std::unordered_map<std::size_t, Tensor>& by_node() const { return grads_; }

private:
    std::uint64_t graph_ = 0;
    std::unordered_map<std::size_t, Tensor> grads_;
};

GradientMap backward(const Graph& graph, const Tensor& loss);

// Makes `graph` the recording target for operations on this thread while in scope.
class ActiveGraph {
public:
    explicit ActiveGraph(Graph& graph);
    ~ActiveGraph();
    ActiveGraph(const ActiveGraph&) = delete;
    ActiveGraph& operator=(const ActiveGraph&) = delete;

private:
    Graph* previous_;
};

Graph* current_graph();

// Generic entry point; the named functions below forward to it.
Tensor apply(OpKind kind, const std::vector<Tensor>& operands, const OpAttrs& attrs = {});

// Binary ops broadcast numpy-style (right-aligned, size-1 axes expand).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// [..., M, K] x [..., K, N]; b may also be a plain [K, N] shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., in] * weight [in, out] (+ bias [out]).
Tensor linear(const Tensor& x, const Tensor& weight);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::vector<std::size_t> perm);
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

// Row = index along axis 0.
Tensor gather_rows(const Tensor& a, std::vector<std::size_t> indices);
Tensor scatter_rows(const Tensor& a, std::vector<std::size_t> indices, std::size_t rows);
Tensor embedding_add(const Tensor& x, const Tensor& table, std::vector<std::size_t> ids);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
// Normalises over the last axis.
Tensor layernorm(const Tensor& x, double eps = 1e-6);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor gelu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

// Kernel size equals stride. x [D, H, W, Cin], weight [s, s, s, Cin, Cout],
// bias [Cout] -> [sD, sH, sW, Cout].
Tensor transpose_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride);

// Max over probed coordinates of |analytic - central difference| / max(1, |analytic|).
// Probes every coordinate when x has at most `probes` entries, otherwise a
// seeded sample of `probes` distinct coordinates.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5, std::size_t probes = 20, std::uint64_t seed = 0);

}  // namespace vmim
