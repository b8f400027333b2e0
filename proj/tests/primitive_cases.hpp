#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fskws/graph.hpp"
#include "test_support.hpp"

namespace fskws::testing {

// Reduces a node to a scalar through a fixed random projection so every
// output coordinate contributes to the checked gradient.
inline Var project(Graph& g, Var out, const Shape& shape, Rng& rng) {
    return g.sum(g.mul(out, g.constant(random_tensor(shape, rng))));
}

struct Case {
    const char* name;
    std::function<void(Graph&, ParamSet&, Rng&)> build;
};

inline std::vector<Case> primitive_cases() {
    auto p = [](ParamSet& ps, const std::string& id, Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
        ps.add(id, random_tensor(std::move(s), rng, lo, hi), Partition::Classifier);
    };
    std::vector<Case> cases;
    cases.push_back({"affine", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t b = 1 + rng.below(4), in = 1 + rng.below(16), out = 1 + rng.below(16);
                         p(ps, "x", {b, in}, rng);
                         p(ps, "w", {out, in}, rng);
                         p(ps, "b", {out}, rng);
                         project(g, g.affine(g.param("x"), g.param("w"), g.param("b")), {b, out}, rng);
                     }});
    cases.push_back({"matmul", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
                         p(ps, "a", {m, k}, rng);
                         p(ps, "b", {k, n}, rng);
                         project(g, g.matmul(g.param("a"), g.param("b")), {m, n}, rng);
                     }});
    cases.push_back({"add_sub_mul_scale", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t n = 1 + rng.below(16);
                         p(ps, "a", {n}, rng);
                         p(ps, "b", {n}, rng);
                         Var a = g.param("a"), b = g.param("b");
                         Var y = g.add(g.mul(g.sub(a, b), a), g.scale(b, -1.7));
                         project(g, y, {n}, rng);
                     }});
    cases.push_back({"relu", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t n = 1 + rng.below(16);
                         p(ps, "x", {n}, rng);
                         project(g, g.relu(g.param("x")), {n}, rng);
                     }});
    cases.push_back({"sigmoid", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t n = 1 + rng.below(16);
                         p(ps, "x", {n}, rng);
                         project(g, g.sigmoid(g.param("x")), {n}, rng);
                     }});
    cases.push_back({"log", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t n = 1 + rng.below(16);
                         p(ps, "x", {n}, rng, 0.5, 1.5);
                         project(g, g.log(g.param("x")), {n}, rng);
                     }});
    cases.push_back({"mean_axis", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t a = 1 + rng.below(4), b = 1 + rng.below(6), c = 1 + rng.below(4);
                         const std::size_t axis = rng.below(3);
                         p(ps, "x", {a, b, c}, rng);
                         Shape out{a, b, c};
                         out.erase(out.begin() + static_cast<long>(axis));
                         project(g, g.mean_axis(g.param("x"), axis), out, rng);
                     }});
    cases.push_back({"segment_mean", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t segs = 1 + rng.below(4), d = 1 + rng.below(6);
                         std::vector<std::size_t> off{0};
                         for (std::size_t s = 0; s < segs; ++s) off.push_back(off.back() + 1 + rng.below(4));
                         p(ps, "x", {off.back(), d}, rng);
                         project(g, g.segment_mean(g.param("x"), off), {segs, d}, rng);
                     }});
    cases.push_back({"softmax", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(8);
                         p(ps, "x", {r, c}, rng);
                         project(g, g.softmax(g.param("x")), {r, c}, rng);
                     }});
    cases.push_back({"softmax_cross_entropy", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t r = 1 + rng.below(6), c = 2 + rng.below(8);
                         p(ps, "x", {r, c}, rng);
                         std::vector<std::size_t> labels(r);
                         for (auto& l : labels) l = rng.below(c);
                         g.softmax_cross_entropy(g.param("x"), labels,
                                                 rng.below(2) ? Reduction::Sum : Reduction::Mean);
                     }});
    cases.push_back({"nll_prob", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t r = 1 + rng.below(6), c = 2 + rng.below(8);
                         p(ps, "x", {r, c}, rng);
                         std::vector<std::size_t> labels(r);
                         for (auto& l : labels) l = rng.below(c);
                         g.nll_prob(g.softmax(g.param("x")), labels);
                     }});
    cases.push_back({"mean_squared_error", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t n = 1 + rng.below(16);
                         p(ps, "x", {n}, rng);
                         g.mean_squared_error(g.param("x"), random_tensor({n}, rng));
                     }});
    cases.push_back({"pairwise_sq_dist", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t m = 1 + rng.below(6), q = 1 + rng.below(6), d = 1 + rng.below(8);
                         p(ps, "a", {m, d}, rng);
                         p(ps, "b", {q, d}, rng);
                         project(g, g.pairwise_sq_dist(g.param("a"), g.param("b")), {m, q}, rng);
                     }});
    cases.push_back({"batched_sq_dist", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t b = 1 + rng.below(4), m = 1 + rng.below(6), d = 1 + rng.below(8);
                         p(ps, "q", {b, d}, rng);
                         p(ps, "s", {b, m, d}, rng);
                         project(g, g.batched_sq_dist(g.param("q"), g.param("s")), {b, m}, rng);
                     }});
    cases.push_back({"concat", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t r = 1 + rng.below(4), c1 = 1 + rng.below(5), c2 = 1 + rng.below(5);
                         const std::size_t axis = rng.below(2);
                         Shape s1 = axis ? Shape{r, c1} : Shape{c1, r};
                         Shape s2 = axis ? Shape{r, c2} : Shape{c2, r};
                         p(ps, "a", s1, rng);
                         p(ps, "b", s2, rng);
                         Shape out = axis ? Shape{r, c1 + c2} : Shape{c1 + c2, r};
                         project(g, g.concat({g.param("a"), g.param("b"), g.param("a")}, axis),
                                 axis ? Shape{r, 2 * c1 + c2} : Shape{2 * c1 + c2, r}, rng);
                         (void)out;
                     }});
    cases.push_back({"gather_rows_reshape", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t r = 1 + rng.below(5), d = 1 + rng.below(6), k = 1 + rng.below(8);
                         p(ps, "x", {r, d}, rng);
                         std::vector<std::size_t> rows(k);
                         for (auto& i : rows) i = rng.below(r);
                         Var y = g.reshape(g.gather_rows(g.param("x"), rows), {k * d});
                         project(g, y, {k * d}, rng);
                     }});
    cases.push_back({"attention", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t heads = 1 + rng.below(4), hd = 1 + rng.below(4);
                         const std::size_t b = 1 + rng.below(3), tq = 1 + rng.below(5), tk = 1 + rng.below(5);
                         const std::size_t n = heads * hd;
                         p(ps, "q", {b, tq, n}, rng);
                         p(ps, "k", {b, tk, n}, rng);
                         p(ps, "v", {b, tk, n}, rng);
                         project(g, g.attention(g.param("q"), g.param("k"), g.param("v"), heads), {b, tq, n}, rng);
                     }});
    cases.push_back({"layer_sum", [=](Graph& g, ParamSet& ps, Rng& rng) {
                         const std::size_t b = 1 + rng.below(4), l = 1 + rng.below(5), d = 1 + rng.below(6);
                         p(ps, "x", {b, l, d}, rng);
                         p(ps, "logits", {l}, rng);
                         project(g, g.layer_sum(g.param("x"), g.softmax(g.param("logits"))), {b, d}, rng);
                     }});
    return cases;
}

}  // namespace fskws::testing
