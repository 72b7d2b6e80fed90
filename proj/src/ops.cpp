#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ops_internal.hpp"

namespace vmim::detail {
namespace {

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const Shape& b, const std::string& what) {
    throw ShapeError(std::string(op_name(kind)) + ": " + what + " (" + to_string(a) + " vs " +
                     to_string(b) + ")");
}

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const std::string& what) {
    throw ShapeError(std::string(op_name(kind)) + ": " + what + " (" + to_string(a) + ")");
}

void expect_arity(OpKind kind, const std::vector<Tensor>& in, std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
        throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(lo) +
                                    (lo == hi ? "" : ".." + std::to_string(hi)) + " operands, got " +
                                    std::to_string(in.size()));
    }
    for (const auto& t : in) {
        if (!t.defined()) {
            throw std::invalid_argument(std::string(op_name(kind)) + ": undefined operand");
        }
    }
}

std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
    std::size_t p = 1;
    for (std::size_t i = from; i < to; ++i) {
        p *= s[i];
    }
    return p;
}

Shape squeeze_empty(Shape s) {
    if (s.empty()) {
        s.push_back(1);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
    enum class Mode { same, b_cyclic, a_cyclic, general };
    Shape out;
    std::vector<std::size_t> sa;
    std::vector<std::size_t> sb;
    std::size_t na = 0;
    std::size_t nb = 0;
    Mode mode = Mode::general;
};

bool is_suffix_of(const Shape& small, const Shape& big) {
    std::size_t first = 0;
    while (first < small.size() && small[first] == 1) {
        ++first;
    }
    const std::size_t len = small.size() - first;
    if (len > big.size()) {
        return false;
    }
    return std::equal(small.begin() + static_cast<std::ptrdiff_t>(first), small.end(),
                      big.end() - static_cast<std::ptrdiff_t>(len));
}

Broadcast plan_broadcast(OpKind kind, const Shape& a, const Shape& b) {
    Broadcast p;
    const std::size_t r = std::max(a.size(), b.size());
    p.out.assign(r, 1);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    const auto stra = strides_of(a);
    const auto strb = strides_of(b);
    for (std::size_t i = 0; i < r; ++i) {
        const bool has_a = i >= r - a.size();
        const bool has_b = i >= r - b.size();
        const std::size_t da = has_a ? a[i - (r - a.size())] : 1;
        const std::size_t db = has_b ? b[i - (r - b.size())] : 1;
        if (da != db && da != 1 && db != 1) {
            shape_error(kind, a, b, "cannot broadcast");
        }
        p.out[i] = std::max(da, db);
        if (has_a && da != 1) {
            p.sa[i] = stra[i - (r - a.size())];
        }
        if (has_b && db != 1) {
            p.sb[i] = strb[i - (r - b.size())];
        }
    }
    p.na = numel(a);
    p.nb = numel(b);
    const std::size_t n = numel(p.out);
    if (a == b) {
        p.mode = Broadcast::Mode::same;
    } else if (p.na == n && is_suffix_of(b, p.out)) {
        p.mode = Broadcast::Mode::b_cyclic;
    } else if (p.nb == n && is_suffix_of(a, p.out)) {
        p.mode = Broadcast::Mode::a_cyclic;
    }
    return p;
}

template <typename F>
void for_each_broadcast(const Broadcast& p, F&& fn) {
    const std::size_t n = numel(p.out);
    switch (p.mode) {
        case Broadcast::Mode::same:
            for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
            return;
        case Broadcast::Mode::b_cyclic:
            for (std::size_t i = 0; i < n; ++i) fn(i, i, i % p.nb);
            return;
        case Broadcast::Mode::a_cyclic:
            for (std::size_t i = 0; i < n; ++i) fn(i, i % p.na, i);
            return;
        case Broadcast::Mode::general:
            break;
    }
    const std::size_t r = p.out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        fn(i, ia, ib);
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            ia += p.sa[ax];
            ib += p.sb[ax];
            if (idx[ax] < p.out[ax]) {
                break;
            }
            ia -= p.sa[ax] * p.out[ax];
            ib -= p.sb[ax] * p.out[ax];
            idx[ax] = 0;
        }
    }
}

Tensor binary_forward(OpKind kind, const Tensor& a, const Tensor& b) {
    const auto p = plan_broadcast(kind, a.shape(), b.shape());
    std::vector<double> out(numel(p.out));
    const auto x = a.data();
    const auto y = b.data();
    switch (kind) {
        case OpKind::add:
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = x[ia] + y[ib]; });
            break;
        case OpKind::sub:
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = x[ia] - y[ib]; });
            break;
        case OpKind::mul:
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = x[ia] * y[ib]; });
            break;
        case OpKind::div:
            for (double v : y) {
                if (v == 0.0) {
                    throw std::domain_error("div: division by zero");
                }
            }
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = x[ia] / y[ib]; });
            break;
        default:
            throw std::logic_error("binary_forward: not a binary op");
    }
    return Tensor(p.out, std::move(out));
}

std::vector<std::vector<double>> binary_vjp(OpKind kind, const Tensor& a, const Tensor& b,
                                            std::span<const double> g, const std::vector<bool>& needs) {
    const auto p = plan_broadcast(kind, a.shape(), b.shape());
    std::vector<std::vector<double>> out(2);
    const auto x = a.data();
    const auto y = b.data();
    if (needs[0]) out[0].assign(p.na, 0.0);
    if (needs[1]) out[1].assign(p.nb, 0.0);
    auto& ga = out[0];
    auto& gb = out[1];
    switch (kind) {
        case OpKind::add:
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                if (needs[0]) ga[ia] += g[i];
                if (needs[1]) gb[ib] += g[i];
            });
            break;
        case OpKind::sub:
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                if (needs[0]) ga[ia] += g[i];
                if (needs[1]) gb[ib] -= g[i];
            });
            break;
        case OpKind::mul:
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                if (needs[0]) ga[ia] += g[i] * y[ib];
                if (needs[1]) gb[ib] += g[i] * x[ia];
            });
            break;
        case OpKind::div:
            for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                if (needs[0]) ga[ia] += g[i] / y[ib];
                if (needs[1]) gb[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
            });
            break;
        default:
            throw std::logic_error("binary_vjp: not a binary op");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Contractions

struct MatmulDims {
    std::size_t batch = 1;
    std::size_t m = 0;
    std::size_t k = 0;
    std::size_t n = 0;
    bool shared_b = false;
    Shape out;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
    if (a.size() < 2 || b.size() < 2) {
        shape_error(OpKind::matmul, a, b, "operands must have rank >= 2");
    }
    MatmulDims d;
    d.m = a[a.size() - 2];
    d.k = a[a.size() - 1];
    if (b[b.size() - 2] != d.k) {
        shape_error(OpKind::matmul, a, b, "inner dimensions differ");
    }
    d.n = b[b.size() - 1];
    d.batch = prod(a, 0, a.size() - 2);
    if (b.size() == 2) {
        d.shared_b = true;
    } else if (!std::equal(a.begin(), a.end() - 2, b.begin(), b.end() - 2) || a.size() != b.size()) {
        shape_error(OpKind::matmul, a, b, "batch dimensions differ");
    }
    d.out = Shape(a.begin(), a.end() - 2);
    d.out.push_back(d.m);
    d.out.push_back(d.n);
    return d;
}

// c[m, n] += a[m, k] * b[k, n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

// da[m, k] += g[m, n] * b[k, n]^T
void gemm_nt(const double* g, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* gi = g + i * n;
        double* di = da + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                s += gi[j] * bp[j];
            }
            di[p] += s;
        }
    }
}

// db[k, n] += a[m, k]^T * g[m, n]
void gemm_tn(const double* a, const double* g, double* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* gi = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* dp = db + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                dp[j] += av * gi[j];
            }
        }
    }
}

Tensor matmul_forward(const Tensor& a, const Tensor& b) {
    const auto d = matmul_dims(a.shape(), b.shape());
    std::vector<double> out(d.batch * d.m * d.n, 0.0);
    for (std::size_t t = 0; t < d.batch; ++t) {
        const double* pa = a.data().data() + t * d.m * d.k;
        const double* pb = b.data().data() + (d.shared_b ? 0 : t * d.k * d.n);
        gemm_nn(pa, pb, out.data() + t * d.m * d.n, d.m, d.k, d.n);
    }
    return Tensor(d.out, std::move(out));
}

std::vector<std::vector<double>> matmul_vjp(const Tensor& a, const Tensor& b, std::span<const double> g,
                                            const std::vector<bool>& needs) {
    const auto d = matmul_dims(a.shape(), b.shape());
    std::vector<std::vector<double>> out(2);
    if (needs[0]) out[0].assign(a.numel(), 0.0);
    if (needs[1]) out[1].assign(b.numel(), 0.0);
    for (std::size_t t = 0; t < d.batch; ++t) {
        const double* pa = a.data().data() + t * d.m * d.k;
        const std::size_t boff = d.shared_b ? 0 : t * d.k * d.n;
        const double* pb = b.data().data() + boff;
        const double* pg = g.data() + t * d.m * d.n;
        if (needs[0]) gemm_nt(pg, pb, out[0].data() + t * d.m * d.k, d.m, d.k, d.n);
        if (needs[1]) gemm_tn(pa, pg, out[1].data() + boff, d.m, d.k, d.n);
    }
    return out;
}

void check_linear(const std::vector<Tensor>& in) {
    const auto& xs = in[0].shape();
    const auto& ws = in[1].shape();
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[0]) {
        shape_error(OpKind::linear, xs, ws, "input features do not match weight [in, out]");
    }
    if (in.size() == 3 && (in[2].rank() != 1 || in[2].dim(0) != ws[1])) {
        shape_error(OpKind::linear, ws, in[2].shape(), "bias must be [out]");
    }
}

Tensor linear_forward(const std::vector<Tensor>& in) {
    check_linear(in);
    const std::size_t fin = in[1].dim(0);
    const std::size_t fout = in[1].dim(1);
    const std::size_t rows = in[0].numel() / fin;
    std::vector<double> out(rows * fout, 0.0);
    if (in.size() == 3) {
        const auto bias = in[2].data();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy(bias.begin(), bias.end(), out.begin() + static_cast<std::ptrdiff_t>(r * fout));
        }
    }
    gemm_nn(in[0].data().data(), in[1].data().data(), out.data(), rows, fin, fout);
    Shape shape = in[0].shape();
    shape.back() = fout;
    return Tensor(shape, std::move(out));
}

std::vector<std::vector<double>> linear_vjp(const std::vector<Tensor>& in, std::span<const double> g,
                                            const std::vector<bool>& needs) {
    const std::size_t fin = in[1].dim(0);
    const std::size_t fout = in[1].dim(1);
    const std::size_t rows = in[0].numel() / fin;
    std::vector<std::vector<double>> out(in.size());
    if (needs[0]) {
        out[0].assign(in[0].numel(), 0.0);
        gemm_nt(g.data(), in[1].data().data(), out[0].data(), rows, fin, fout);
    }
    if (needs[1]) {
        out[1].assign(in[1].numel(), 0.0);
        gemm_tn(in[0].data().data(), g.data(), out[1].data(), rows, fin, fout);
    }
    if (in.size() == 3 && needs[2]) {
        out[2].assign(fout, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < fout; ++j) {
                out[2][j] += g[r * fout + j];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layout ops

Shape permuted_shape(const Shape& s, const std::vector<std::size_t>& perm) {
    if (perm.size() != s.size()) {
        shape_error(OpKind::permute, s, Shape(perm.begin(), perm.end()), "permutation rank mismatch");
    }
    std::vector<bool> seen(perm.size(), false);
    Shape out(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= s.size() || seen[perm[i]]) {
            shape_error(OpKind::permute, s, Shape(perm.begin(), perm.end()), "invalid permutation");
        }
        seen[perm[i]] = true;
        out[i] = s[perm[i]];
    }
    return out;
}

// out[i] = in[source(i)] for out laid out with shape s[perm].
std::vector<double> permute_data(std::span<const double> in, const Shape& s, const std::vector<std::size_t>& perm) {
    const Shape os = permuted_shape(s, perm);
    const auto is = strides_of(s);
    const std::size_t r = s.size();
    std::vector<std::size_t> step(r);
    for (std::size_t i = 0; i < r; ++i) {
        step[i] = is[perm[i]];
    }
    std::vector<double> out(in.size());
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = in[src];
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            src += step[ax];
            if (idx[ax] < os[ax]) {
                break;
            }
            src -= step[ax] * os[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        inv[perm[i]] = i;
    }
    return inv;
}

Tensor concat_forward(const std::vector<Tensor>& in, std::size_t axis) {
    const Shape& first = in[0].shape();
    if (axis >= first.size()) {
        shape_error(OpKind::concat, first, "axis out of range");
    }
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& t : in) {
        const Shape& s = t.shape();
        if (s.size() != first.size()) {
            shape_error(OpKind::concat, first, s, "rank mismatch");
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != first[i]) {
                shape_error(OpKind::concat, first, s, "non-concatenated extents differ");
            }
        }
        out_shape[axis] += s[axis];
    }
    const std::size_t outer = prod(first, 0, axis);
    const std::size_t inner = prod(first, axis + 1, first.size());
    std::vector<double> out;
    out.reserve(numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o) {
        for (const auto& t : in) {
            const std::size_t block = t.dim(axis) * inner;
            const auto d = t.data().subspan(o * block, block);
            out.insert(out.end(), d.begin(), d.end());
        }
    }
    return Tensor(out_shape, std::move(out));
}

Tensor slice_forward(const Tensor& a, const OpAttrs& at) {
    const Shape& s = a.shape();
    if (at.axis >= s.size() || at.length == 0 || at.start + at.length > s[at.axis]) {
        shape_error(OpKind::slice, s, Shape{at.axis, at.start, at.length}, "slice (axis, start, length) out of range");
    }
    Shape out_shape = s;
    out_shape[at.axis] = at.length;
    const std::size_t outer = prod(s, 0, at.axis);
    const std::size_t inner = prod(s, at.axis + 1, s.size());
    std::vector<double> out;
    out.reserve(numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o) {
        const auto d = a.data().subspan((o * s[at.axis] + at.start) * inner, at.length * inner);
        out.insert(out.end(), d.begin(), d.end());
    }
    return Tensor(out_shape, std::move(out));
}

std::size_t row_size(const Tensor& a) {
    return a.numel() / a.dim(0);
}

Tensor gather_forward(const Tensor& a, const OpAttrs& at) {
    if (a.rank() == 0 || at.indices.empty()) {
        shape_error(OpKind::gather_rows, a.shape(), "needs rank >= 1 and at least one index");
    }
    const std::size_t rs = row_size(a);
    Shape out_shape = a.shape();
    out_shape[0] = at.indices.size();
    std::vector<double> out;
    out.reserve(numel(out_shape));
    for (std::size_t idx : at.indices) {
        if (idx >= a.dim(0)) {
            shape_error(OpKind::gather_rows, a.shape(), "row index " + std::to_string(idx) + " out of range");
        }
        const auto d = a.data().subspan(idx * rs, rs);
        out.insert(out.end(), d.begin(), d.end());
    }
    return Tensor(out_shape, std::move(out));
}

Tensor scatter_forward(const Tensor& a, const OpAttrs& at) {
    if (a.rank() == 0 || at.indices.size() != a.dim(0)) {
        shape_error(OpKind::scatter_rows, a.shape(), "one index per input row required");
    }
    std::vector<bool> used(at.rows, false);
    for (std::size_t idx : at.indices) {
        if (idx >= at.rows || used[idx]) {
            shape_error(OpKind::scatter_rows, a.shape(), "row index " + std::to_string(idx) +
                                                            " out of range or repeated");
        }
        used[idx] = true;
    }
    const std::size_t rs = row_size(a);
    Shape out_shape = a.shape();
    out_shape[0] = at.rows;
    std::vector<double> out(numel(out_shape), 0.0);
    for (std::size_t r = 0; r < at.indices.size(); ++r) {
        const auto d = a.data().subspan(r * rs, rs);
        std::copy(d.begin(), d.end(), out.begin() + static_cast<std::ptrdiff_t>(at.indices[r] * rs));
    }
    return Tensor(out_shape, std::move(out));
}

Tensor embedding_add_forward(const Tensor& x, const Tensor& table, const OpAttrs& at) {
    if (x.rank() != 2 || table.rank() != 2 || x.dim(1) != table.dim(1) || at.indices.size() != x.dim(0)) {
        shape_error(OpKind::embedding_add, x.shape(), table.shape(), "expects x [N, E], table [T, E], N ids");
    }
    const std::size_t e = x.dim(1);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < at.indices.size(); ++r) {
        if (at.indices[r] >= table.dim(0)) {
            shape_error(OpKind::embedding_add, x.shape(), table.shape(), "embedding id out of range");
        }
        const double* src = table.data().data() + at.indices[r] * e;
        for (std::size_t j = 0; j < e; ++j) {
            out[r * e + j] += src[j];
        }
    }
    return Tensor(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Normalisation and pointwise nonlinearities

struct AxisView {
    std::size_t outer;
    std::size_t n;
    std::size_t inner;
};

AxisView axis_view(OpKind kind, const Shape& s, std::size_t axis) {
    if (axis >= s.size()) {
        shape_error(kind, s, "axis " + std::to_string(axis) + " out of range");
    }
    return {prod(s, 0, axis), s[axis], prod(s, axis + 1, s.size())};
}

Tensor softmax_forward(OpKind kind, const Tensor& a, std::size_t axis) {
    const auto v = axis_view(kind, a.shape(), axis);
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.n * v.inner + in;
            double mx = x[base];
            for (std::size_t j = 1; j < v.n; ++j) {
                mx = std::max(mx, x[base + j * v.inner]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j < v.n; ++j) {
                total += std::exp(x[base + j * v.inner] - mx);
            }
            if (kind == OpKind::softmax) {
                for (std::size_t j = 0; j < v.n; ++j) {
                    out[base + j * v.inner] = std::exp(x[base + j * v.inner] - mx) / total;
                }
            } else {
                const double lse = mx + std::log(total);
                for (std::size_t j = 0; j < v.n; ++j) {
                    out[base + j * v.inner] = x[base + j * v.inner] - lse;
                }
            }
        }
    }
    return Tensor(a.shape(), std::move(out));
}

std::vector<double> softmax_vjp(OpKind kind, const Tensor& out, std::size_t axis, std::span<const double> g) {
    const auto v = axis_view(kind, out.shape(), axis);
    const auto y = out.data();
    std::vector<double> dx(y.size());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.n * v.inner + in;
            if (kind == OpKind::softmax) {
                double dot = 0.0;
                for (std::size_t j = 0; j < v.n; ++j) {
                    const std::size_t i = base + j * v.inner;
                    dot += g[i] * y[i];
                }
                for (std::size_t j = 0; j < v.n; ++j) {
                    const std::size_t i = base + j * v.inner;
                    dx[i] = y[i] * (g[i] - dot);
                }
            } else {
                double gs = 0.0;
                for (std::size_t j = 0; j < v.n; ++j) {
                    gs += g[base + j * v.inner];
                }
                for (std::size_t j = 0; j < v.n; ++j) {
                    const std::size_t i = base + j * v.inner;
                    dx[i] = g[i] - std::exp(y[i]) * gs;
                }
            }
        }
    }
    return dx;
}

void check_layernorm(const std::vector<Tensor>& in, const OpAttrs& at) {
    if (!(at.eps > 0.0)) {
        throw std::invalid_argument("layernorm: eps must be > 0");
    }
    if (in[0].rank() == 0) {
        shape_error(OpKind::layernorm, in[0].shape(), "needs rank >= 1");
    }
    if (in.size() == 2) {
        throw std::invalid_argument("layernorm: takes x, or x with both gamma and beta");
    }
    if (in.size() == 3) {
        const Shape feat{in[0].shape().back()};
        if (in[1].shape() != feat || in[2].shape() != feat) {
            shape_error(OpKind::layernorm, in[0].shape(), in[1].shape(), "gamma/beta must match last axis");
        }
    }
}

Tensor layernorm_forward(const std::vector<Tensor>& in, const OpAttrs& at) {
    check_layernorm(in, at);
    const std::size_t n = in[0].shape().back();
    const std::size_t rows = in[0].numel() / n;
    const auto x = in[0].data();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + at.eps);
        for (std::size_t j = 0; j < n; ++j) {
            double v = (xr[j] - mu) * inv;
            if (in.size() == 3) {
                v = v * in[1][j] + in[2][j];
            }
            out[r * n + j] = v;
        }
    }
    return Tensor(in[0].shape(), std::move(out));
}

std::vector<std::vector<double>> layernorm_vjp(const std::vector<Tensor>& in, const OpAttrs& at,
                                               std::span<const double> g, const std::vector<bool>& needs) {
    const std::size_t n = in[0].shape().back();
    const std::size_t rows = in[0].numel() / n;
    const auto x = in[0].data();
    const bool affine = in.size() == 3;
    std::vector<std::vector<double>> out(in.size());
    if (needs[0]) out[0].assign(x.size(), 0.0);
    if (affine && needs[1]) out[1].assign(n, 0.0);
    if (affine && needs[2]) out[2].assign(n, 0.0);
    std::vector<double> xhat(n);
    std::vector<double> dxhat(n);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        const double* gr = g.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + at.eps);
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (xr[j] - mu) * inv;
            dxhat[j] = affine ? gr[j] * in[1][j] : gr[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
            if (affine && needs[1]) out[1][j] += gr[j] * xhat[j];
            if (affine && needs[2]) out[2][j] += gr[j];
        }
        mean_d /= static_cast<double>(n);
        mean_dx /= static_cast<double>(n);
        if (needs[0]) {
            for (std::size_t j = 0; j < n; ++j) {
                out[0][r * n + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
    return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Tensor unary_forward(OpKind kind, const Tensor& a) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        switch (kind) {
            case OpKind::gelu: out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); break;
            case OpKind::abs: out[i] = std::abs(v); break;
            case OpKind::square: out[i] = v * v; break;
            case OpKind::sqrt:
                if (v < 0.0) throw std::domain_error("sqrt: negative input");
                out[i] = std::sqrt(v);
                break;
            case OpKind::exp: out[i] = std::exp(v); break;
            case OpKind::log:
                if (!(v > 0.0)) throw std::domain_error("log: non-positive input");
                out[i] = std::log(v);
                break;
            default: throw std::logic_error("unary_forward: not a unary op");
        }
    }
    return Tensor(a.shape(), std::move(out));
}

std::vector<double> unary_vjp(OpKind kind, const Tensor& a, const Tensor& y, std::span<const double> g) {
    const auto x = a.data();
    std::vector<double> dx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        double d = 0.0;
        switch (kind) {
            case OpKind::gelu:
                d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
                break;
            case OpKind::abs: d = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); break;
            case OpKind::square: d = 2.0 * v; break;
            case OpKind::sqrt:
                if (y[i] == 0.0) throw std::domain_error("sqrt: gradient undefined at 0");
                d = 0.5 / y[i];
                break;
            case OpKind::exp: d = y[i]; break;
            case OpKind::log: d = 1.0 / v; break;
            default: throw std::logic_error("unary_vjp: not a unary op");
        }
        dx[i] = g[i] * d;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce_forward(OpKind kind, const Tensor& a, const OpAttrs& at) {
    const auto x = a.data();
    if (!at.reduce_axis) {
        double s = 0.0;
        for (double v : x) s += v;
        if (kind == OpKind::mean) s /= static_cast<double>(x.size());
        return Tensor(Shape{1}, {s});
    }
    const auto v = axis_view(kind, a.shape(), *at.reduce_axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(*at.reduce_axis));
    std::vector<double> out(v.outer * v.inner, 0.0);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t j = 0; j < v.n; ++j) {
            const double* src = x.data() + (o * v.n + j) * v.inner;
            double* dst = out.data() + o * v.inner;
            for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in];
        }
    }
    if (kind == OpKind::mean) {
        for (double& o : out) o /= static_cast<double>(v.n);
    }
    return Tensor(squeeze_empty(out_shape), std::move(out));
}

std::vector<double> reduce_vjp(OpKind kind, const Tensor& a, const OpAttrs& at, std::span<const double> g) {
    std::vector<double> dx(a.numel());
    if (!at.reduce_axis) {
        const double v = kind == OpKind::mean ? g[0] / static_cast<double>(dx.size()) : g[0];
        std::fill(dx.begin(), dx.end(), v);
        return dx;
    }
    const auto v = axis_view(kind, a.shape(), *at.reduce_axis);
    const double f = kind == OpKind::mean ? 1.0 / static_cast<double>(v.n) : 1.0;
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t j = 0; j < v.n; ++j) {
            for (std::size_t in = 0; in < v.inner; ++in) {
                dx[(o * v.n + j) * v.inner + in] = g[o * v.inner + in] * f;
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Transposed convolution (kernel == stride, channels-last)

struct DeconvDims {
    std::size_t d, h, w, cin, cout, s;
};

DeconvDims deconv_dims(const std::vector<Tensor>& in, const OpAttrs& at) {
    const auto& xs = in[0].shape();
    const auto& ws = in[1].shape();
    const std::size_t s = at.stride;
    if (s == 0) {
        throw std::invalid_argument("transpose_conv3d: stride must be >= 1");
    }
    if (xs.size() != 4 || ws.size() != 5 || ws[0] != s || ws[1] != s || ws[2] != s || ws[3] != xs[3]) {
        shape_error(OpKind::transpose_conv3d, xs, ws, "expects x [D,H,W,Cin], weight [s,s,s,Cin,Cout]");
    }
    if (in.size() == 3 && in[2].shape() != Shape{ws[4]}) {
        shape_error(OpKind::transpose_conv3d, ws, in[2].shape(), "bias must be [Cout]");
    }
    return {xs[0], xs[1], xs[2], xs[3], ws[4], s};
}

Tensor deconv_forward(const std::vector<Tensor>& in, const OpAttrs& at) {
    const auto dd = deconv_dims(in, at);
    const std::size_t od = dd.d * dd.s, oh = dd.h * dd.s, ow = dd.w * dd.s;
    std::vector<double> out(od * oh * ow * dd.cout, 0.0);
    const double* x = in[0].data().data();
    const double* w = in[1].data().data();
    const std::size_t kblock = dd.cin * dd.cout;
    for (std::size_t z = 0; z < dd.d; ++z)
        for (std::size_t y = 0; y < dd.h; ++y)
            for (std::size_t xw = 0; xw < dd.w; ++xw) {
                const double* xv = x + ((z * dd.h + y) * dd.w + xw) * dd.cin;
                for (std::size_t a = 0; a < dd.s; ++a)
                    for (std::size_t b = 0; b < dd.s; ++b)
                        for (std::size_t c = 0; c < dd.s; ++c) {
                            const std::size_t ov = ((z * dd.s + a) * oh + (y * dd.s + b)) * ow + (xw * dd.s + c);
                            double* o = out.data() + ov * dd.cout;
                            if (in.size() == 3) {
                                for (std::size_t k = 0; k < dd.cout; ++k) o[k] = in[2][k];
                            }
                            gemm_nn(xv, w + ((a * dd.s + b) * dd.s + c) * kblock, o, 1, dd.cin, dd.cout);
                        }
            }
    return Tensor(Shape{od, oh, ow, dd.cout}, std::move(out));
}

std::vector<std::vector<double>> deconv_vjp(const std::vector<Tensor>& in, const OpAttrs& at,
                                            std::span<const double> g, const std::vector<bool>& needs) {
    const auto dd = deconv_dims(in, at);
    const std::size_t oh = dd.h * dd.s, ow = dd.w * dd.s;
    std::vector<std::vector<double>> out(in.size());
    if (needs[0]) out[0].assign(in[0].numel(), 0.0);
    if (needs[1]) out[1].assign(in[1].numel(), 0.0);
    if (in.size() == 3 && needs[2]) out[2].assign(dd.cout, 0.0);
    const double* x = in[0].data().data();
    const double* w = in[1].data().data();
    const std::size_t kblock = dd.cin * dd.cout;
    for (std::size_t z = 0; z < dd.d; ++z)
        for (std::size_t y = 0; y < dd.h; ++y)
            for (std::size_t xw = 0; xw < dd.w; ++xw) {
                const std::size_t iv = ((z * dd.h + y) * dd.w + xw) * dd.cin;
                for (std::size_t a = 0; a < dd.s; ++a)
                    for (std::size_t b = 0; b < dd.s; ++b)
                        for (std::size_t c = 0; c < dd.s; ++c) {
                            const std::size_t ov = ((z * dd.s + a) * oh + (y * dd.s + b)) * ow + (xw * dd.s + c);
                            const double* go = g.data() + ov * dd.cout;
                            const std::size_t woff = ((a * dd.s + b) * dd.s + c) * kblock;
                            if (needs[0]) gemm_nt(go, w + woff, out[0].data() + iv, 1, dd.cin, dd.cout);
                            if (needs[1]) gemm_tn(x + iv, go, out[1].data() + woff, 1, dd.cin, dd.cout);
                            if (in.size() == 3 && needs[2]) {
                                for (std::size_t k = 0; k < dd.cout; ++k) out[2][k] += go[k];
                            }
                        }
            }
    return out;
}

}  // namespace

Tensor forward(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& at) {
    switch (kind) {
        case OpKind::add:
        case OpKind::sub:
        case OpKind::mul:
        case OpKind::div:
            expect_arity(kind, in, 2, 2);
            return binary_forward(kind, in[0], in[1]);
        case OpKind::scale: {
            expect_arity(kind, in, 1, 1);
            std::vector<double> out(in[0].data().begin(), in[0].data().end());
            for (double& v : out) v *= at.factor;
            return Tensor(in[0].shape(), std::move(out));
        }
        case OpKind::matmul:
            expect_arity(kind, in, 2, 2);
            return matmul_forward(in[0], in[1]);
        case OpKind::linear:
            expect_arity(kind, in, 2, 3);
            return linear_forward(in);
        case OpKind::reshape: {
            expect_arity(kind, in, 1, 1);
            if (numel(at.shape) != in[0].numel() || at.shape.empty()) {
                shape_error(kind, in[0].shape(), at.shape, "element count differs");
            }
            return Tensor(at.shape, std::vector<double>(in[0].data().begin(), in[0].data().end()));
        }
        case OpKind::permute:
            expect_arity(kind, in, 1, 1);
            return Tensor(permuted_shape(in[0].shape(), at.perm), permute_data(in[0].data(), in[0].shape(), at.perm));
        case OpKind::concat:
            expect_arity(kind, in, 1, static_cast<std::size_t>(-1));
            return concat_forward(in, at.axis);
        case OpKind::slice:
            expect_arity(kind, in, 1, 1);
            return slice_forward(in[0], at);
        case OpKind::gather_rows:
            expect_arity(kind, in, 1, 1);
            return gather_forward(in[0], at);
        case OpKind::scatter_rows:
            expect_arity(kind, in, 1, 1);
            return scatter_forward(in[0], at);
        case OpKind::embedding_add:
            expect_arity(kind, in, 2, 2);
            return embedding_add_forward(in[0], in[1], at);
        case OpKind::softmax:
        case OpKind::log_softmax:
            expect_arity(kind, in, 1, 1);
            return softmax_forward(kind, in[0], at.axis);
        case OpKind::layernorm:
            expect_arity(kind, in, 1, 3);
            return layernorm_forward(in, at);
        case OpKind::gelu:
        case OpKind::abs:
        case OpKind::square:
        case OpKind::sqrt:
        case OpKind::exp:
        case OpKind::log:
            expect_arity(kind, in, 1, 1);
            return unary_forward(kind, in[0]);
        case OpKind::mean:
        case OpKind::sum:
            expect_arity(kind, in, 1, 1);
            return reduce_forward(kind, in[0], at);
        case OpKind::transpose_conv3d:
            expect_arity(kind, in, 2, 3);
            return deconv_forward(in, at);
    }
    throw std::invalid_argument("unknown op-kind " + std::to_string(static_cast<int>(kind)));
}

std::vector<std::vector<double>> vjp(OpKind kind, const std::vector<Tensor>& in, const Tensor& out,
                                     const OpAttrs& at, std::span<const double> g,
                                     const std::vector<bool>& needs) {
    switch (kind) {
        case OpKind::add:
        case OpKind::sub:
        case OpKind::mul:
        case OpKind::div:
            return binary_vjp(kind, in[0], in[1], g, needs);
        case OpKind::scale: {
            std::vector<double> dx(g.begin(), g.end());
            for (double& v : dx) v *= at.factor;
            return {std::move(dx)};
        }
        case OpKind::matmul:
            return matmul_vjp(in[0], in[1], g, needs);
        case OpKind::linear:
            return linear_vjp(in, g, needs);
        case OpKind::reshape:
            return {std::vector<double>(g.begin(), g.end())};
        case OpKind::permute:
            return {permute_data(g, out.shape(), inverse_perm(at.perm))};
        case OpKind::concat: {
            const std::size_t outer = prod(out.shape(), 0, at.axis);
            const std::size_t inner = prod(out.shape(), at.axis + 1, out.rank());
            std::vector<std::vector<double>> res(in.size());
            for (std::size_t i = 0; i < in.size(); ++i) {
                if (needs[i]) res[i].reserve(in[i].numel());
            }
            std::size_t pos = 0;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < in.size(); ++i) {
                    const std::size_t block = in[i].dim(at.axis) * inner;
                    if (needs[i]) res[i].insert(res[i].end(), g.begin() + static_cast<std::ptrdiff_t>(pos),
                                                g.begin() + static_cast<std::ptrdiff_t>(pos + block));
                    pos += block;
                }
            }
            return res;
        }
        case OpKind::slice: {
            const Shape& s = in[0].shape();
            const std::size_t outer = prod(s, 0, at.axis);
            const std::size_t inner = prod(s, at.axis + 1, s.size());
            std::vector<double> dx(in[0].numel(), 0.0);
            for (std::size_t o = 0; o < outer; ++o) {
                std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(o * at.length * inner), at.length * inner,
                            dx.begin() + static_cast<std::ptrdiff_t>((o * s[at.axis] + at.start) * inner));
            }
            return {std::move(dx)};
        }
        case OpKind::gather_rows: {
            const std::size_t rs = row_size(in[0]);
            std::vector<double> dx(in[0].numel(), 0.0);
            for (std::size_t r = 0; r < at.indices.size(); ++r) {
                double* dst = dx.data() + at.indices[r] * rs;
                for (std::size_t j = 0; j < rs; ++j) dst[j] += g[r * rs + j];
            }
            return {std::move(dx)};
        }
        case OpKind::scatter_rows: {
            const std::size_t rs = row_size(in[0]);
            std::vector<double> dx(in[0].numel());
            for (std::size_t r = 0; r < at.indices.size(); ++r) {
                std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(at.indices[r] * rs), rs,
                            dx.begin() + static_cast<std::ptrdiff_t>(r * rs));
            }
            return {std::move(dx)};
        }
        case OpKind::embedding_add: {
            std::vector<std::vector<double>> res(2);
            if (needs[0]) res[0].assign(g.begin(), g.end());
            if (needs[1]) {
                const std::size_t e = in[1].dim(1);
                res[1].assign(in[1].numel(), 0.0);
                for (std::size_t r = 0; r < at.indices.size(); ++r) {
                    double* dst = res[1].data() + at.indices[r] * e;
                    for (std::size_t j = 0; j < e; ++j) dst[j] += g[r * e + j];
                }
            }
            return res;
        }
        case OpKind::softmax:
        case OpKind::log_softmax:
            return {softmax_vjp(kind, out, at.axis, g)};
        case OpKind::layernorm:
            return layernorm_vjp(in, at, g, needs);
        case OpKind::gelu:
        case OpKind::abs:
        case OpKind::square:
        case OpKind::sqrt:
        case OpKind::exp:
        case OpKind::log:
            return {unary_vjp(kind, in[0], out, g)};
        case OpKind::mean:
        case OpKind::sum:
            return {reduce_vjp(kind, in[0], at, g)};
        case OpKind::transpose_conv3d:
            return deconv_vjp(in, at, g, needs);
    }
    throw std::invalid_argument("unknown op-kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace vmim::detail
