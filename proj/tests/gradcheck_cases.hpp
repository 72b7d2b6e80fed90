#pragma once

// Finite-difference cases covering every differentiable op, shared by the
// unit tests and the acceptance runner.

#include <functional>
#include <string>
#include <vector>

#include "vmim/rng.hpp"
#include "vmim/tensor.hpp"

namespace vmim::testing {

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
    Rng rng(seed);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(shape, std::move(v));
}

// Random magnitude in [lo, hi] with random sign; keeps |x| away from kinks.
inline Tensor random_signed_away_from_zero(const Shape& shape, std::uint64_t seed, double lo, double hi) {
    Rng rng(seed);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    return Tensor(shape, std::move(v));
}

struct GradCase {
    std::string name;
    Shape input_shape;
    std::function<Tensor(const Tensor&)> op;
    std::function<Tensor(std::uint64_t)> sample;
};

// Contracts op(x) against fixed random weights so every output coordinate matters.
inline std::function<Tensor(const Tensor&)> scalarize(std::function<Tensor(const Tensor&)> op) {
    return [op = std::move(op)](const Tensor& x) {
        Tensor y = op(x);
        Tensor w = random_tensor(y.shape(), 0xC0FFEE + y.numel(), -1.0, 1.0);
        return sum(mul(y, w));
    };
}

inline std::vector<GradCase> gradient_cases() {
    const Tensor m34 = random_tensor({3, 4}, 11);
    const Tensor v4 = random_tensor({4}, 12);
    const Tensor pos34 = random_tensor({3, 4}, 13, 0.5, 2.0);
    const Tensor b245 = random_tensor({2, 4, 5}, 14);
    const Tensor a234 = random_tensor({2, 3, 4}, 15);
    const Tensor w45 = random_tensor({4, 5}, 16);
    const Tensor b5 = random_tensor({5}, 17);
    const Tensor x34 = random_tensor({3, 4}, 18);
    const Tensor gamma = random_tensor({4}, 19, 0.5, 1.5);
    const Tensor beta = random_tensor({4}, 20);
    const Tensor vol = random_tensor({2, 2, 3, 3}, 21);
    const Tensor kern = random_tensor({2, 2, 2, 3, 2}, 22);
    const Tensor kb = random_tensor({2}, 23);
    const Tensor table = random_tensor({5, 4}, 24);

    auto uniform = [](Shape s) {
        return [s](std::uint64_t seed) { return random_tensor(s, seed); };
    };
    auto positive = [](Shape s) {
        return [s](std::uint64_t seed) { return random_tensor(s, seed, 0.5, 2.0); };
    };
    auto signed_away = [](Shape s) {
        return [s](std::uint64_t seed) { return random_signed_away_from_zero(s, seed, 0.2, 2.0); };
    };

    std::vector<GradCase> cases;
    auto push = [&](std::string name, Shape shape, std::function<Tensor(const Tensor&)> op,
                    std::function<Tensor(std::uint64_t)> sample) {
        cases.push_back({std::move(name), shape, scalarize(std::move(op)), std::move(sample)});
    };

    push("add/lhs", {3, 4}, [=](const Tensor& x) { return add(x, v4); }, uniform({3, 4}));
    push("add/rhs-broadcast", {4}, [=](const Tensor& x) { return add(m34, x); }, uniform({4}));
    push("sub/lhs", {3, 4}, [=](const Tensor& x) { return sub(x, m34); }, uniform({3, 4}));
    push("sub/rhs-broadcast", {3, 1}, [=](const Tensor& x) { return sub(m34, x); }, uniform({3, 1}));
    push("mul/lhs", {3, 4}, [=](const Tensor& x) { return mul(x, m34); }, uniform({3, 4}));
    push("mul/rhs-broadcast", {4}, [=](const Tensor& x) { return mul(m34, x); }, uniform({4}));
    push("div/lhs", {3, 4}, [=](const Tensor& x) { return div(x, pos34); }, uniform({3, 4}));
    push("div/rhs", {3, 4}, [=](const Tensor& x) { return div(m34, x); }, positive({3, 4}));
    push("scale", {3, 4}, [](const Tensor& x) { return scale(x, -1.7); }, uniform({3, 4}));
    push("matmul/lhs-batched", {2, 3, 4}, [=](const Tensor& x) { return matmul(x, b245); }, uniform({2, 3, 4}));
    push("matmul/rhs-batched", {2, 4, 5}, [=](const Tensor& x) { return matmul(a234, x); }, uniform({2, 4, 5}));
    push("matmul/rhs-shared", {4, 5}, [=](const Tensor& x) { return matmul(a234, x); }, uniform({4, 5}));
    push("reshape", {3, 4}, [](const Tensor& x) { return reshape(x, {2, 6}); }, uniform({3, 4}));
    push("permute", {2, 3, 4}, [](const Tensor& x) { return permute(x, {2, 0, 1}); }, uniform({2, 3, 4}));
    push("concat", {3, 2}, [=](const Tensor& x) { return concat({m34, x}, 1); }, uniform({3, 2}));
    push("slice", {3, 4}, [](const Tensor& x) { return slice(x, 1, 1, 2); }, uniform({3, 4}));
    push("gather-rows", {3, 4}, [](const Tensor& x) { return gather_rows(x, {2, 0, 2}); }, uniform({3, 4}));
    push("scatter-rows", {2, 4}, [](const Tensor& x) { return scatter_rows(x, {3, 1}, 4); }, uniform({2, 4}));
    push("softmax/axis0", {3, 4}, [](const Tensor& x) { return softmax(x, 0); }, uniform({3, 4}));
    push("softmax/axis1", {3, 4}, [](const Tensor& x) { return softmax(x, 1); }, uniform({3, 4}));
    push("log-softmax", {3, 4}, [](const Tensor& x) { return log_softmax(x, 1); }, uniform({3, 4}));
    push("layernorm", {3, 4}, [](const Tensor& x) { return layernorm(x); }, uniform({3, 4}));
    push("layernorm/affine-x", {3, 4}, [=](const Tensor& x) { return layernorm(x, gamma, beta); }, uniform({3, 4}));
    push("layernorm/affine-gamma", {4}, [=](const Tensor& g) { return layernorm(x34, g, beta); }, uniform({4}));
    push("layernorm/affine-beta", {4}, [=](const Tensor& b) { return layernorm(x34, gamma, b); }, uniform({4}));
    push("gelu", {3, 4}, [](const Tensor& x) { return gelu(x); }, uniform({3, 4}));
    push("linear/x", {3, 4}, [=](const Tensor& x) { return linear(x, w45, b5); }, uniform({3, 4}));
    push("linear/weight", {4, 5}, [=](const Tensor& w) { return linear(x34, w, b5); }, uniform({4, 5}));
    push("linear/bias", {5}, [=](const Tensor& b) { return linear(x34, w45, b); }, uniform({5}));
    push("mean/all", {3, 4}, [](const Tensor& x) { return mean(x); }, uniform({3, 4}));
    push("mean/axis", {3, 4}, [](const Tensor& x) { return mean(x, 0); }, uniform({3, 4}));
    push("sum/all", {3, 4}, [](const Tensor& x) { return sum(x); }, uniform({3, 4}));
    push("sum/axis", {2, 3, 4}, [](const Tensor& x) { return sum(x, 1); }, uniform({2, 3, 4}));
    push("transpose-conv3d/x", {2, 2, 3, 3}, [=](const Tensor& x) { return transpose_conv3d(x, kern, kb, 2); },
         uniform({2, 2, 3, 3}));
    push("transpose-conv3d/weight", {2, 2, 2, 3, 2},
         [=](const Tensor& w) { return transpose_conv3d(vol, w, kb, 2); }, uniform({2, 2, 2, 3, 2}));
    push("transpose-conv3d/bias", {2}, [=](const Tensor& b) { return transpose_conv3d(vol, kern, b, 2); },
         uniform({2}));
    push("embedding-add/x", {3, 4}, [=](const Tensor& x) { return embedding_add(x, table, {4, 0, 4}); },
         uniform({3, 4}));
    push("embedding-add/table", {5, 4}, [=](const Tensor& t) { return embedding_add(x34, t, {4, 0, 4}); },
         uniform({5, 4}));
    push("abs", {3, 4}, [](const Tensor& x) { return vmim::abs(x); }, signed_away({3, 4}));
    push("square", {3, 4}, [](const Tensor& x) { return square(x); }, uniform({3, 4}));
    push("sqrt", {3, 4}, [](const Tensor& x) { return vmim::sqrt(x); }, positive({3, 4}));
    push("exp", {3, 4}, [](const Tensor& x) { return vmim::exp(x); }, uniform({3, 4}));
    push("log", {3, 4}, [](const Tensor& x) { return vmim::log(x); }, positive({3, 4}));
    return cases;
}

}  // namespace vmim::testing
