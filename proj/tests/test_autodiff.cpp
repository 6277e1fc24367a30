#include <doctest.h>

#include <cmath>
#include <vector>

#include "upo/autodiff.hpp"

using namespace upo;

namespace {

// Hand-built 3-neuron MLP oracle: y = v . relu(W x + b), evaluated with
// plain loops, independent of the graph interpreter.
double tiny_mlp_by_hand(const std::vector<double>& w, const std::vector<double>& x) {
    // layout: W (3x2) at 0, b (3) at 6, v (3) at 9
    double out = 0.0;
    for (int r = 0; r < 3; ++r) {
        double pre = w[6 + r];
        for (int c = 0; c < 2; ++c) pre += w[r * 2 + c] * x[c];
        out += w[9 + r] * std::max(0.0, pre);
    }
    return out;
}

ParamLayout tiny_mlp_layout() {
    return ParamLayout({{"w", 6}, {"b", 3}, {"v", 3}});
}

int tiny_mlp_graph(Graph& g) {
    const int x = g.input(0, 2);
    const int h = g.relu(g.add(g.matvec(g.param("w", 0, 6), x, 3, 2), g.param("b", 0, 3)));
    const int v = g.param("v", 0, 3);
    return g.reduce_sum(g.mul(v, h));
}

}  // namespace

TEST_CASE("forward: sigmoid of zero-weight dot product is 0.5") {
    Graph g;
    const int w = g.param("w", 0, 3);
    const int x = g.input(0, 3);
    const int y = g.sigmoid(g.reduce_sum(g.mul(w, x)));
    ParamVector p = ParamVector::zeros(ParamLayout({{"w", 3}}));
    const std::vector<double> in{1.5, -2.0, 0.7};
    CHECK(forward(g, p, in)[y][0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("forward: rate-0 dropout mask is the identity") {
    Graph g;
    const int x = g.input(0, 4);
    const int d = g.dropout(x, 0);
    ParamVector p = ParamVector::zeros(ParamLayout({{"unused", 1}}));
    const std::vector<double> in{1.0, -2.0, 3.0, 0.25};
    const auto masks = sample_dropout_masks({4}, 0.0, 7, 1);
    const auto with = forward(g, p, in, &masks[0]);
    const auto without = forward(g, p, in);
    for (int i = 0; i < 4; ++i) CHECK(with[d][i] == without[d][i]);
}

TEST_CASE("forward: tiny MLP matches hand evaluation") {
    Graph g;
    const int out = tiny_mlp_graph(g);
    ParamVector p = ParamVector::randn(tiny_mlp_layout(), 0.8, 42);
    const std::vector<double> in{0.3, -1.1};
    CHECK(forward(g, p, in)[out][0] ==
          doctest::Approx(tiny_mlp_by_hand(p.values, in)).epsilon(1e-12));
}

TEST_CASE("forward is a pure function of (params, inputs, masks)") {
    Graph g;
    const int out = tiny_mlp_graph(g);
    ParamVector p = ParamVector::randn(tiny_mlp_layout(), 0.8, 9);
    const std::vector<double> in{0.5, 2.0};
    const auto a = forward(g, p, in);
    const auto b = forward(g, p, in);
    CHECK(a[out][0] == b[out][0]);
}

TEST_CASE("forward: shape mismatch names the node") {
    Graph g;
    g.input(0, 5);
    ParamVector p = ParamVector::zeros(ParamLayout({{"w", 1}}));
    const std::vector<double> in{1.0};
    CHECK_THROWS_WITH_AS(forward(g, p, in), doctest::Contains("node 0"), Error);
}

TEST_CASE("backward: d(w^2)/dw = 2w") {
    Graph g;
    const int w = g.param("w", 0, 1);
    const int loss = g.reduce_sum(g.mul(w, w));
    ParamVector p = ParamVector::zeros(ParamLayout({{"w", 1}}));
    p.values[0] = 3.0;
    const auto v = forward(g, p);
    const auto grad = backward(g, loss, v, p);
    CHECK(grad[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward: sigmoid'(0) = 0.25") {
    Graph g;
    const int w = g.param("w", 0, 1);
    const int loss = g.select(g.sigmoid(w), 0);
    ParamVector p = ParamVector::zeros(ParamLayout({{"w", 1}}));
    const auto v = forward(g, p);
    CHECK(backward(g, loss, v, p)[0] == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("backward rejects non-scalar loss nodes") {
    Graph g;
    const int w = g.param("w", 0, 2);
    ParamVector p = ParamVector::zeros(ParamLayout({{"w", 2}}));
    const auto v = forward(g, p);
    CHECK_THROWS_AS(backward(g, w, v, p), Error);
}

TEST_CASE("backward: random MLP matches central finite differences") {
    Graph g;
    const int out = tiny_mlp_graph(g);
    const int loss = g.reduce_sum(g.mul(out, out));  // scalar squared -> smooth
    ParamVector p = ParamVector::randn(tiny_mlp_layout(), 0.7, 123);
    const std::vector<double> in{0.4, -0.9};
    const auto v = forward(g, p, in);
    const auto grad = backward(g, loss, v, p);
    const double err = grad_check(
        [&](const ParamVector& q) { return forward(g, q, in)[loss][0]; }, grad, p, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("grad_check: quadratic loss is exact to 1e-8") {
    Graph g;
    const int w = g.param("w", 0, 4);
    const int loss = g.reduce_sum(g.mul(w, w));
    ParamVector p = ParamVector::randn(ParamLayout({{"w", 4}}), 1.0, 5);
    const auto v = forward(g, p);
    const auto grad = backward(g, loss, v, p);
    const double err =
        grad_check([&](const ParamVector& q) { return forward(g, q)[loss][0]; }, grad, p, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check validates eps and loss finiteness") {
    Graph g;
    const int w = g.param("w", 0, 1);
    const int loss = g.select(g.log(w), 0);
    ParamVector p = ParamVector::zeros(ParamLayout({{"w", 1}}));
    CHECK_THROWS_AS(grad_check([](const ParamVector&) { return 0.0; }, {0.0}, p, 0.5), Error);
    const auto v0 = forward(g, p);  // log(0) = -inf downstream
    CHECK_THROWS_AS(
        grad_check([&](const ParamVector& q) { return forward(g, q)[loss][0]; }, {1.0}, p, 1e-5),
        Error);
}

TEST_CASE("sample_dropout_masks: rate 0 gives all ones") {
    const auto masks = sample_dropout_masks({64}, 0.0, 1, 3);
    for (const auto& set : masks)
        for (double s : set[0].scale) CHECK(s == 1.0);
}

TEST_CASE("sample_dropout_masks: kept fraction near 1-rate") {
    const auto masks = sample_dropout_masks({100000}, 0.1, 99, 1);
    int kept = 0;
    for (double s : masks[0][0].scale) {
        CHECK((s == 0.0 || s == doctest::Approx(1.0 / 0.9).epsilon(1e-15)));
        if (s != 0.0) ++kept;
    }
    const double frac = kept / 100000.0;
    CHECK(frac > 0.89);
    CHECK(frac < 0.91);
}

TEST_CASE("sample_dropout_masks: deterministic given seed, rejects rate >= 1") {
    const auto a = sample_dropout_masks({32, 16}, 0.25, 1234, 4);
    const auto b = sample_dropout_masks({32, 16}, 0.25, 1234, 4);
    REQUIRE(a.size() == b.size());
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t s = 0; s < a[t].size(); ++s) CHECK(a[t][s].scale == b[t][s].scale);
    CHECK_THROWS_AS(sample_dropout_masks({8}, 1.0, 0, 1), Error);
}

TEST_CASE("dropout is inverted-scale: E[mask * x] = x over draws") {
    const int draws = 10000;
    const auto masks = sample_dropout_masks({8}, 0.3, 2024, draws);
    std::vector<double> x{1.0, -2.0, 0.5, 3.0, -0.25, 1.5, 4.0, -1.0};
    std::vector<double> mean(8, 0.0);
    for (const auto& set : masks)
        for (int i = 0; i < 8; ++i) mean[i] += set[0].scale[i] * x[i] / draws;
    for (int i = 0; i < 8; ++i)
        CHECK(std::abs(mean[i] - x[i]) < 0.02 * std::abs(x[i]) + 1e-12);
}

TEST_CASE("opt_step: zero gradient leaves params unchanged") {
    std::vector<double> p{1.0, -2.0, 3.0};
    OptState s = OptState::make(3, 0.1);
    opt_step(p, {0.0, 0.0, 0.0}, s);
    CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
    CHECK(s.step == 1);
}

TEST_CASE("opt_step: linear warmup schedule") {
    OptState s = OptState::make(1, 1.0, 0.1, 100);
    CHECK(effective_lr(s) == doctest::Approx(0.1));  // step 0 of 10 warmup steps
    s.step = 4;
    CHECK(effective_lr(s) == doctest::Approx(0.5));
    s.step = 9;
    CHECK(effective_lr(s) == doctest::Approx(1.0));
}

TEST_CASE("opt_step: rejects non-finite gradients") {
    std::vector<double> p{0.0};
    OptState s = OptState::make(1, 0.1);
    CHECK_THROWS_AS(opt_step(p, {std::nan("")}, s), Error);
}

TEST_CASE("opt_step: converges on a convex quadratic") {
    // loss = sum (p_i - target_i)^2
    const std::vector<double> target{1.0, -2.0, 0.5, 4.0};
    std::vector<double> p{0.0, 0.0, 0.0, 0.0};
    OptState s = OptState::make(4, 0.05, 0.1, 0);
    for (int step = 0; step < 500; ++step) {
        std::vector<double> g(4);
        for (int i = 0; i < 4; ++i) g[i] = 2.0 * (p[i] - target[i]);
        opt_step(p, g, s);
    }
    double loss = 0.0;
    for (int i = 0; i < 4; ++i) loss += (p[i] - target[i]) * (p[i] - target[i]);
    CHECK(loss < 1e-6);
}

TEST_CASE("ParamLayout: disjoint segments covering the array") {
    ParamLayout l({{"a", 3}, {"b", 5}});
    CHECK(l.total() == 8);
    CHECK(l.at("a").offset == 0);
    CHECK(l.at("b").offset == 3);
    CHECK_THROWS_AS(l.at("c"), Error);
    CHECK_THROWS_AS(ParamLayout({{"a", 2}, {"a", 2}}), Error);
}
