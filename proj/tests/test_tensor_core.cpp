#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <numeric>

#include "fskws/error.hpp"
#include "fskws/graph.hpp"
#include "fskws/layers.hpp"
#include "fskws/optim.hpp"
#include "primitive_cases.hpp"
#include "test_support.hpp"

using namespace fskws;
using fskws::testing::check_graph_gradients;
using fskws::testing::primitive_cases;
using fskws::testing::random_tensor;
using fskws::testing::rel_err;

TEST_CASE("forward examples") {
    ParamSet ps;
    ps.add("w", Tensor::matrix(1, 1, {2.0}), Partition::Classifier);
    ps.add("b", Tensor::vector({1.0}), Partition::Classifier);
    {
        Graph g;
        g.affine(g.input("x"), g.param("w"), g.param("b"));
        const Tensor& y = g.forward(ps, {{"x", Tensor::vector({3.0})}});
        CHECK(y.shape() == Shape{1});
        CHECK(y[0] == 7.0);
    }
    {
        Graph g;
        g.relu(g.constant(Tensor::vector({-1.0, 2.0})));
        const Tensor& y = g.forward({});
        CHECK(y[0] == 0.0);
        CHECK(y[1] == 2.0);
    }
    {
        Graph g;
        g.softmax_cross_entropy(g.constant(Tensor::vector({0.0, 0.0})), {0});
        CHECK(g.forward({}).item() == doctest::Approx(0.693147).epsilon(1e-6));
    }
}

TEST_CASE("backward examples") {
    SUBCASE("x squared at 3") {
        ParamSet ps;
        ps.add("x", Tensor::scalar(3.0), Partition::Classifier);
        Graph g;
        Var x = g.param("x");
        g.mul(x, x);
        g.forward(ps);
        CHECK(g.backward().at("x").item() == doctest::Approx(6.0).epsilon(1e-14));
    }
    SUBCASE("uniform softmax cross-entropy") {
        ParamSet ps;
        ps.add("z", Tensor::vector({0.0, 0.0}), Partition::Classifier);
        Graph g;
        g.softmax_cross_entropy(g.param("z"), {0});
        g.forward(ps);
        const Tensor gz = g.backward().at("z");
        CHECK(gz[0] == doctest::Approx(-0.5).epsilon(1e-14));
        CHECK(gz[1] == doctest::Approx(0.5).epsilon(1e-14));
    }
    SUBCASE("random two-layer ReLU net with 8 inputs") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            ParamSet ps;
            const std::size_t widths[] = {8, 16, 4};
            init_mlp(ps, "net", widths, Partition::Classifier, rng);
            for (const auto& id : ps.ids())
                if (id.back() == 'b') ps.mutable_value(id) = random_tensor(ps.value(id).shape(), rng, -0.5, 0.5);
            Graph g;
            Var x = g.constant(random_tensor({3, 8}, rng));
            g.softmax_cross_entropy(build_mlp(g, "net", 2, x), {0, 3, 1});
            const auto res = check_graph_gradients(g, ps);
            INFO("seed " << seed << " worst " << res.worst_id);
            CHECK(res.worst_rel < 1e-4);
        }
    }
    SUBCASE("unreached parameters get zero gradient") {
        ParamSet ps;
        ps.add("used", Tensor::vector({1.0}), Partition::Classifier);
        ps.add("unused", Tensor::vector({5.0, 6.0}), Partition::Encoder);
        Graph g;
        g.sum(g.param("used"));
        g.forward(ps);
        const auto grads = g.backward();
        REQUIRE(grads.count("unused") == 1);
        CHECK(grads.at("unused").identical(Tensor({2}, 0.0)));
    }
}

TEST_CASE("every primitive matches finite differences on 100 seeds") {
    for (const auto& c : primitive_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(seed * 7919 + 13);
            Graph g;
            ParamSet ps;
            c.build(g, ps, rng);
            worst = std::max(worst, check_graph_gradients(g, ps).worst_rel);
        }
        INFO(c.name << " worst relative error " << worst);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("graph errors") {
    SUBCASE("backward before forward") {
        Graph g;
        g.sum(g.constant(Tensor::vector({1.0})));
        CHECK_THROWS_AS(g.backward(), StateError);
    }
    SUBCASE("shape mismatch names the node") {
        Graph g;
        Var a = g.constant(Tensor::vector({1.0, 2.0}));
        Var b = g.constant(Tensor::vector({1.0, 2.0, 3.0}));
        g.add(a, b);
        try {
            g.forward({});
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            CHECK(std::string(e.what()).find("node 2 (add)") != std::string::npos);
        }
    }
    SUBCASE("non-finite value names the node") {
        Graph g;
        Var x = g.constant(Tensor::vector({1e300}));
        g.mul(x, x);
        try {
            g.forward({});
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("node 1") != std::string::npos);
        }
    }
    SUBCASE("unbound input") {
        Graph g;
        g.relu(g.input("x"));
        CHECK_THROWS_AS(g.forward({}), InvalidArgument);
    }
    SUBCASE("non-scalar root") {
        Graph g;
        g.relu(g.constant(Tensor::vector({1.0, 2.0})));
        g.forward({});
        CHECK_THROWS_AS(g.backward(), StateError);
    }
}

TEST_CASE("forward is deterministic and softmax is a distribution") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const std::size_t c = 1 + rng.below(20);
        Tensor logits = random_tensor({3, c}, rng, -50.0, 50.0);
        Graph g;
        g.softmax(g.constant(logits));
        const Tensor first = g.forward({});
        const Tensor second = g.forward({});
        CHECK(first.identical(second));
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += first.at(r, j);
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
        Graph ce;
        ce.softmax_cross_entropy(ce.constant(logits), {0, c - 1, c / 2});
        CHECK(ce.forward({}).item() >= 0.0);
    }
}

TEST_CASE("attention weights sum to one per position") {
    Rng rng(4);
    Graph g;
    Var q = g.constant(random_tensor({2, 5, 8}, rng));
    Var k = g.constant(random_tensor({2, 5, 8}, rng));
    Var att = g.attention(q, k, k, 4);
    g.forward({});
    const Tensor w = g.attention_weights(att);
    CHECK(w.shape() == Shape{2, 4, 5, 5});
    for (std::size_t r = 0; r < w.size() / 5; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) s += w[r * 5 + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("sgd_step") {
    ParamSet ps;
    ps.add("theta", Tensor::scalar(1.0), Partition::Classifier);
    Gradients g{{"theta", Tensor::scalar(2.0)}};
    CHECK(sgd_step(ps, g, 0.05).value("theta").item() == doctest::Approx(0.9).epsilon(1e-15));

    ParamSet zero;
    zero.add("theta", Tensor::scalar(0.0), Partition::Classifier);
    CHECK(kDefaultSgdLr == 5e-2);
    CHECK(sgd_step(zero, {{"theta", Tensor::scalar(1.0)}}).value("theta").item() == -0.05);

    ParamSet p;
    p.add("a", Tensor::vector({0.1, -0.3}), Partition::Classifier);
    const ParamSet after = sgd_step(p, {{"a", Tensor::vector({0.0, 0.0})}}, 0.05);
    CHECK(after.identical(p));

    SUBCASE("mask leaves other partitions bit-identical") {
        Rng rng(1);
        ParamSet q;
        q.add("enc", random_tensor({4}, rng), Partition::Encoder);
        q.add("cls", random_tensor({4}, rng), Partition::Classifier);
        q.add("lw", random_tensor({3}, rng), Partition::LayerWeights);
        Gradients gq{{"enc", random_tensor({4}, rng)}, {"cls", random_tensor({4}, rng)}, {"lw", random_tensor({3}, rng)}};
        const ParamSet out = sgd_step(q, gq, 0.1, {Partition::Classifier});
        CHECK(out.identical_in(q, Partition::Encoder));
        CHECK(out.identical_in(q, Partition::LayerWeights));
        CHECK_FALSE(out.identical_in(q, Partition::Classifier));
    }
    SUBCASE("missing gradient for a masked parameter") {
        CHECK_THROWS_AS(sgd_step(ps, {}, 0.1), InvalidArgument);
        // not masked, so not needed
        CHECK_NOTHROW(sgd_step(ps, {}, 0.1, {Partition::Encoder}));
    }
    CHECK_THROWS_AS(sgd_step(ps, g, 0.0), InvalidArgument);
}

TEST_CASE("adam_step") {
    SUBCASE("first step moves by -lr") {
        ParamSet ps;
        ps.add("theta", Tensor::scalar(0.0), Partition::Classifier);
        AdamState st = AdamState::for_params(ps);
        adam_step(ps, {{"theta", Tensor::scalar(1.0)}}, st, 1e-4);
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        CHECK(ps.value("theta").item() == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-12));
        CHECK(std::abs(ps.value("theta").item() + 1e-4) < 1e-12);
        CHECK(st.t == 1);
    }
    SUBCASE("zero gradients never move parameters") {
        ParamSet ps;
        ps.add("theta", Tensor::vector({0.25, -4.0}), Partition::Classifier);
        const ParamSet before = ps;
        AdamState st = AdamState::for_params(ps);
        for (int i = 0; i < 5; ++i) adam_step(ps, {{"theta", Tensor::vector({0.0, 0.0})}}, st, 1e-4);
        CHECK(ps.identical(before));
        CHECK(st.t == 5);
    }
    SUBCASE("constant gradient: second step no larger than the first") {
        ParamSet ps;
        ps.add("theta", Tensor::scalar(0.0), Partition::Classifier);
        AdamState st = AdamState::for_params(ps);
        adam_step(ps, {{"theta", Tensor::scalar(1.0)}}, st, 1e-4);
        const double d1 = ps.value("theta").item();
        adam_step(ps, {{"theta", Tensor::scalar(1.0)}}, st, 1e-4);
        const double d2 = ps.value("theta").item() - d1;
        CHECK(d1 < 0.0);
        CHECK(d2 < 0.0);
        CHECK(std::abs(d2) <= std::abs(d1) * 1.01);
    }
    SUBCASE("mask leaves other partitions and their moments untouched") {
        Rng rng(2);
        ParamSet ps;
        ps.add("enc", random_tensor({3}, rng), Partition::Encoder);
        ps.add("cls", random_tensor({3}, rng), Partition::Classifier);
        const ParamSet before = ps;
        AdamState st = AdamState::for_params(ps);
        adam_step(ps, {{"enc", random_tensor({3}, rng)}, {"cls", random_tensor({3}, rng)}}, st, 1e-3,
                  PartitionMask::all().without(Partition::Encoder));
        CHECK(ps.identical_in(before, Partition::Encoder));
        CHECK(st.m.at("enc").identical(Tensor({3}, 0.0)));
    }
    SUBCASE("state shape drift") {
        ParamSet ps;
        ps.add("theta", Tensor::vector({0.0, 0.0}), Partition::Classifier);
        AdamState st;
        st.m = {{"theta", Tensor::scalar(0.0)}};
        st.v = {{"theta", Tensor::scalar(0.0)}};
        CHECK_THROWS_AS(adam_step(ps, {{"theta", Tensor::vector({1.0, 1.0})}}, st, 1e-4), ShapeError);
    }
}

TEST_CASE("finite_diff_grad") {
    ParamSet ps;
    ps.add("x", Tensor::scalar(3.0), Partition::Classifier);
    auto sq = [](const ParamSet& p) {
        const double x = p.value("x").item();
        return x * x;
    };
    CHECK(std::abs(finite_diff_grad(sq, ps, 1e-3).at("x").item() - 6.0) < 1e-6);
    CHECK(finite_diff_grad([](const ParamSet&) { return 4.2; }, ps, 1e-3).at("x").item() == 0.0);
    CHECK_THROWS_AS(finite_diff_grad([](const ParamSet&) { return std::nan(""); }, ps, 1e-3), NumericError);
    CHECK_THROWS_AS(finite_diff_grad(sq, ps, 0.0), InvalidArgument);
}

TEST_CASE("ParamSet copies are deep and tags immutable") {
    Rng rng(3);
    ParamSet a;
    a.add("w", random_tensor({2, 2}, rng), Partition::Encoder);
    ParamSet b = a;
    CHECK(b.identical(a));
    b.mutable_value("w")[0] += 1.0;
    CHECK_FALSE(b.identical(a));
    CHECK(b.partition("w") == Partition::Encoder);
    CHECK_THROWS_AS(a.add("w", Tensor::scalar(0.0), Partition::Classifier), InvalidArgument);
}

TEST_CASE("glorot initialisation bounds") {
    Rng rng(5);
    const Tensor w = glorot_uniform(16, 8, rng);
    const double limit = std::sqrt(6.0 / 24.0);
    for (double v : w.values()) CHECK(std::abs(v) <= limit);
}
