#include "vmim/tensor.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <sstream>
#include <utility>

#include "ops_internal.hpp"
#include "vmim/rng.hpp"

namespace vmim {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("Tensor: zero extent in shape " + to_string(shape));
        }
    }
    if (vmim::numel(shape) != data.size()) {
        throw ShapeError("Tensor: shape " + to_string(shape) + " holds " + std::to_string(vmim::numel(shape)) +
                         " elements but data has " + std::to_string(data.size()));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    impl_ = std::move(impl);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = vmim::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, {value}, requires_grad);
}

namespace {
const Shape kEmptyShape{};
}

const Shape& Tensor::shape() const {
    return impl_ ? impl_->shape : kEmptyShape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("Tensor::dim: axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const {
    return impl_ ? impl_->data.size() : 0;
}

std::span<const double> Tensor::data() const {
    if (!impl_) return {};
    return {impl_->data.data(), impl_->data.size()};
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("Tensor::item: tensor of shape " + to_string(shape()) + " is not scalar");
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const {
    return impl_ && impl_->requires_grad;
}

std::optional<NodeRef> Tensor::node() const {
    return impl_ ? impl_->node : std::nullopt;
}

Tensor Tensor::detach() const {
    return Tensor(shape(), std::vector<double>(data().begin(), data().end()), false);
}

Tensor Tensor::as_parameter() const {
    return Tensor(shape(), std::vector<double>(data().begin(), data().end()), true);
}

// ---------------------------------------------------------------------------
// Op names

namespace {
constexpr std::array<std::pair<OpKind, std::string_view>, 26> kOpNames{{
    {OpKind::add, "add"},
    {OpKind::sub, "sub"},
    {OpKind::mul, "mul"},
    {OpKind::div, "div"},
    {OpKind::scale, "scale"},
    {OpKind::matmul, "matmul"},
    {OpKind::reshape, "reshape"},
    {OpKind::permute, "permute"},
    {OpKind::concat, "concat"},
    {OpKind::slice, "slice"},
    {OpKind::gather_rows, "gather-rows"},
    {OpKind::scatter_rows, "scatter-rows"},
    {OpKind::softmax, "softmax"},
    {OpKind::log_softmax, "log-softmax"},
    {OpKind::layernorm, "layernorm"},
    {OpKind::gelu, "gelu"},
    {OpKind::linear, "linear"},
    {OpKind::mean, "mean"},
    {OpKind::sum, "sum"},
    {OpKind::transpose_conv3d, "transpose-conv3d"},
    {OpKind::embedding_add, "embedding-add"},
    {OpKind::abs, "abs"},
    {OpKind::square, "square"},
    {OpKind::sqrt, "sqrt"},
    {OpKind::exp, "exp"},
    {OpKind::log, "log"},
}};
}  // namespace

std::string_view op_name(OpKind kind) {
    for (const auto& [k, name] : kOpNames) {
        if (k == kind) return name;
    }
    return "unknown";
}

OpKind op_kind_from_name(std::string_view name) {
    for (const auto& [k, n] : kOpNames) {
        if (n == name) return k;
    }
    throw std::invalid_argument("unknown op-kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Graph

namespace {
std::atomic<std::uint64_t> g_next_graph_id{1};
thread_local Graph* t_current_graph = nullptr;
}  // namespace

Graph::Graph() : id_(g_next_graph_id.fetch_add(1)) {}

bool Graph::contains(const Tensor& t) const {
    const auto n = t.node();
    return n && n->graph == id_ && n->index < nodes_.size();
}

NodeRef Graph::watch(const Tensor& leaf) {
    if (!leaf.requires_grad()) {
        throw AutodiffError("Graph::watch: tensor does not require grad");
    }
    if (contains(leaf)) {
        return *leaf.node();
    }
    Node node;
    node.leaf = true;
    node.output = leaf;
    nodes_.push_back(std::move(node));
    const NodeRef ref{id_, nodes_.size() - 1};
    leaf.impl_->node = ref;
    return ref;
}

Tensor Graph::record(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs, Tensor output) {
    Node node;
    node.kind = kind;
    node.leaf = false;
    node.input_nodes.reserve(inputs.size());
    for (const auto& in : inputs) {
        if (in.requires_grad()) {
            node.input_nodes.emplace_back(watch(in).index);
        } else {
            node.input_nodes.emplace_back(std::nullopt);
        }
    }
    // `output` was freshly produced by the kernel and is not shared yet.
    auto impl = std::make_shared<Tensor::Impl>();
    impl->shape = output.shape();
    impl->data = std::move(const_cast<Tensor::Impl&>(*output.impl_).data);
    impl->requires_grad = true;
    impl->node = NodeRef{id_, nodes_.size()};
    Tensor recorded;
    recorded.impl_ = std::move(impl);
    node.inputs = std::move(inputs);
    node.attrs = std::move(attrs);
    node.output = recorded;
    nodes_.push_back(std::move(node));
    return recorded;
}

GradientMap Graph::backward(const Tensor& loss) const {
    if (loss.numel() != 1) {
        throw AutodiffError("backward: loss must be scalar-shaped, got " + to_string(loss.shape()));
    }
    if (!contains(loss)) {
        throw AutodiffError("backward: loss is not part of this graph");
    }
    const std::size_t root = loss.node()->index;
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[root] = {1.0};
    std::unordered_map<std::size_t, Tensor> result;
    for (std::size_t i = root + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (node.leaf) {
            if (grads[i].empty()) {
                result.emplace(i, Tensor::zeros(node.output.shape()));
            } else {
                result.emplace(i, Tensor(node.output.shape(), std::move(grads[i])));
            }
            continue;
        }
        if (grads[i].empty()) {
            continue;
        }
        std::vector<bool> needs(node.inputs.size());
        for (std::size_t j = 0; j < needs.size(); ++j) {
            needs[j] = node.input_nodes[j].has_value();
        }
        auto in_grads = detail::vjp(node.kind, node.inputs, node.output, node.attrs, grads[i], needs);
        grads[i].clear();
        grads[i].shrink_to_fit();
        for (std::size_t j = 0; j < needs.size(); ++j) {
            if (!needs[j]) continue;
            auto& dst = grads[*node.input_nodes[j]];
            if (dst.empty()) {
                dst = std::move(in_grads[j]);
            } else {
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += in_grads[j][k];
            }
        }
    }
    // Leaves created after the loss never contributed to it.
    for (std::size_t i = root + 1; i < nodes_.size(); ++i) {
        if (nodes_[i].leaf) {
            result.emplace(i, Tensor::zeros(nodes_[i].output.shape()));
        }
    }
    return GradientMap(id_, std::move(result));
}

Tensor GradientMap::of(const Tensor& t) const {
    const auto n = t.node();
    if (n && n->graph == graph_) {
        auto it = grads_.find(n->index);
        if (it != grads_.end()) {
            return it->second;
        }
    }
    return Tensor::zeros(t.shape());
}

GradientMap backward(const Graph& graph, const Tensor& loss) {
    return graph.backward(loss);
}

ActiveGraph::ActiveGraph(Graph& graph) : previous_(t_current_graph) {
    t_current_graph = &graph;
}

ActiveGraph::~ActiveGraph() {
    t_current_graph = previous_;
}

Graph* current_graph() {
    return t_current_graph;
}

// ---------------------------------------------------------------------------
// Op front-ends

Tensor apply(OpKind kind, const std::vector<Tensor>& operands, const OpAttrs& attrs) {
    Tensor out = detail::forward(kind, operands, attrs);
    Graph* graph = current_graph();
    if (graph == nullptr) {
        return out;
    }
    const bool tracked = std::any_of(operands.begin(), operands.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
    if (!tracked) {
        return out;
    }
    return graph->record(kind, operands, attrs, std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) { return apply(OpKind::add, {a, b}); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply(OpKind::sub, {a, b}); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply(OpKind::mul, {a, b}); }
Tensor div(const Tensor& a, const Tensor& b) { return apply(OpKind::div, {a, b}); }

Tensor scale(const Tensor& a, double factor) {
    OpAttrs at;
    at.factor = factor;
    return apply(OpKind::scale, {a}, at);
}

Tensor matmul(const Tensor& a, const Tensor& b) { return apply(OpKind::matmul, {a, b}); }
Tensor linear(const Tensor& x, const Tensor& weight) { return apply(OpKind::linear, {x, weight}); }
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return apply(OpKind::linear, {x, weight, bias});
}

Tensor reshape(const Tensor& a, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return apply(OpKind::reshape, {a}, at);
}

Tensor permute(const Tensor& a, std::vector<std::size_t> perm) {
    OpAttrs at;
    at.perm = std::move(perm);
    return apply(OpKind::permute, {a}, at);
}

Tensor transpose(const Tensor& a) {
    if (a.rank() < 2) {
        throw ShapeError("transpose: needs rank >= 2, got " + to_string(a.shape()));
    }
    std::vector<std::size_t> perm(a.rank());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, std::move(perm));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    OpAttrs at;
    at.axis = axis;
    return apply(OpKind::concat, parts, at);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    OpAttrs at;
    at.axis = axis;
    at.start = start;
    at.length = length;
    return apply(OpKind::slice, {a}, at);
}

Tensor gather_rows(const Tensor& a, std::vector<std::size_t> indices) {
    OpAttrs at;
    at.indices = std::move(indices);
    return apply(OpKind::gather_rows, {a}, at);
}

Tensor scatter_rows(const Tensor& a, std::vector<std::size_t> indices, std::size_t rows) {
    OpAttrs at;
    at.indices = std::move(indices);
    at.rows = rows;
    return apply(OpKind::scatter_rows, {a}, at);
}

Tensor embedding_add(const Tensor& x, const Tensor& table, std::vector<std::size_t> ids) {
    OpAttrs at;
    at.indices = std::move(ids);
    return apply(OpKind::embedding_add, {x, table}, at);
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    OpAttrs at;
    at.axis = axis;
    return apply(OpKind::softmax, {a}, at);
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
    OpAttrs at;
    at.axis = axis;
    return apply(OpKind::log_softmax, {a}, at);
}

Tensor layernorm(const Tensor& x, double eps) {
    OpAttrs at;
    at.eps = eps;
    return apply(OpKind::layernorm, {x}, at);
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    OpAttrs at;
    at.eps = eps;
    return apply(OpKind::layernorm, {x, gamma, beta}, at);
}

Tensor gelu(const Tensor& a) { return apply(OpKind::gelu, {a}); }
Tensor abs(const Tensor& a) { return apply(OpKind::abs, {a}); }
Tensor square(const Tensor& a) { return apply(OpKind::square, {a}); }
Tensor sqrt(const Tensor& a) { return apply(OpKind::sqrt, {a}); }
Tensor exp(const Tensor& a) { return apply(OpKind::exp, {a}); }
Tensor log(const Tensor& a) { return apply(OpKind::log, {a}); }

Tensor sum(const Tensor& a) { return apply(OpKind::sum, {a}); }

Tensor sum(const Tensor& a, std::size_t axis) {
    OpAttrs at;
    at.reduce_axis = axis;
    return apply(OpKind::sum, {a}, at);
}

Tensor mean(const Tensor& a) { return apply(OpKind::mean, {a}); }

Tensor mean(const Tensor& a, std::size_t axis) {
    OpAttrs at;
    at.reduce_axis = axis;
    return apply(OpKind::mean, {a}, at);
}

Tensor transpose_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
    OpAttrs at;
    at.stride = stride;
    return apply(OpKind::transpose_conv3d, {x, weight, bias}, at);
}

// ---------------------------------------------------------------------------
// Gradient check

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
                         std::size_t probes, std::uint64_t seed) {
    if (!(h > 0.0 && h <= 1e-2)) {
        throw std::invalid_argument("finite_diff_check: step must lie in (0, 1e-2]");
    }
    const Tensor param = x.as_parameter();
    Graph graph;
    Tensor y;
    {
        ActiveGraph scope(graph);
        graph.watch(param);
        y = f(param);
    }
    if (y.numel() != 1 || !std::isfinite(y.item())) {
        throw std::domain_error("finite_diff_check: f(x) is not a finite scalar");
    }
    const Tensor analytic = graph.backward(y).of(param);

    std::vector<std::size_t> coords;
    if (x.numel() <= probes) {
        coords.resize(x.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
        Rng rng(seed);
        coords = rng.sample_without_replacement(x.numel(), probes);
        std::sort(coords.begin(), coords.end());
    }
    auto eval_at = [&](std::size_t i, double delta) {
        std::vector<double> moved(x.data().begin(), x.data().end());
        moved[i] += delta;
        const double v = f(Tensor(x.shape(), std::move(moved))).item();
        if (!std::isfinite(v)) {
            throw std::domain_error("finite_diff_check: f is not finite near x");
        }
        return v;
    };
    double worst = 0.0;
    for (std::size_t i : coords) {
        const double numeric = (eval_at(i, h) - eval_at(i, -h)) / (2.0 * h);
        const double a = analytic[i];
        worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
    return worst;
}

}  // namespace vmim
