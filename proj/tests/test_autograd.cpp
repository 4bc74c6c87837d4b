#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "saessv/error.hpp"
#include "saessv/graph.hpp"
#include "saessv/ops.hpp"
#include "saessv/serialize.hpp"

using namespace saessv;
using nd::Graph;
using nd::Tensor;
using nd::Var;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t({r, c});
    for (auto& v : t.data()) v = u(rng);
    return t;
}

oracle::Matrix as_rows(const Tensor& t) {
    oracle::Matrix m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
}

// Analytic gradient of `build` w.r.t. its single parameter versus central differences.
double gradient_error(const Tensor& x0, const std::function<Var(Graph&, Var)>& build) {
    Graph g;
    Var x = g.param(x0);
    g.backward(build(g, x));
    const auto& ga = g.grad(x);
    std::vector<double> analytic(ga.data().begin(), ga.data().end());
    auto f = [&](const std::vector<double>& v) {
        Graph h;
        Var p = h.constant(Tensor(x0.shape(), v));
        return build(h, p).value().item();
    };
    const auto numeric = oracle::numeric_gradient(f, std::vector<double>(x0.data().begin(), x0.data().end()));
    return oracle::max_relative_error(analytic, numeric, 1e-3);
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    Graph g;
    auto c = nd::matmul(g.constant(Tensor::matrix({{1, 0}, {0, 1}})), g.constant(Tensor::matrix({{3, 4}, {5, 6}})));
    EXPECT_EQ(c.value(), Tensor::matrix({{3, 4}, {5, 6}}));
}

TEST(Matmul, OneByOne) {
    Graph g;
    auto c = nd::matmul(g.constant(Tensor::matrix({{2}})), g.constant(Tensor::matrix({{3}})));
    EXPECT_EQ(c.value().item(), 6.0);
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
        Graph g;
        const auto c = nd::matmul(g.constant(a), g.constant(b)).value();
        const auto ref = oracle::matmul(as_rows(a), as_rows(b));
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(c.at(i, j), ref[i][j], 1e-12);
    }
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    Graph g;
    EXPECT_THROW(nd::matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3}))), ShapeError);
}

TEST(Matmul, GradientIsOuterProducts) {
    std::mt19937_64 rng(2);
    const auto a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
    Graph g;
    Var va = g.param(a), vb = g.param(b);
    g.backward(nd::sum(nd::matmul(va, vb)));
    // d/da sum(ab) = 1·bᵀ, d/db = aᵀ·1
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(g.grad(va).at(i, p), b.at(p, 0) + b.at(p, 1), 1e-12);
    for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(g.grad(vb).at(p, j), a.at(0, p) + a.at(1, p) + a.at(2, p), 1e-12);
}

TEST(Elementwise, Relu) {
    Graph g;
    EXPECT_EQ(nd::relu(g.constant(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
}

TEST(Elementwise, SoftmaxOfEqualLogitsIsUniform) {
    Graph g;
    const auto s = nd::softmax_rows(g.constant(Tensor::vector({0, 0}))).value();
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Elementwise, ExpLogRoundTrip) {
    std::mt19937_64 rng(3);
    const auto x = random_matrix(5, 7, rng, 0.01, 20.0);
    Graph g;
    const auto y = nd::exp(nd::log(g.constant(x))).value();
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-12 * std::max(1.0, x[i]));
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
    Graph g;
    EXPECT_THROW(nd::log(g.constant(Tensor::vector({1.0, 0.0}))), DomainError);
    EXPECT_THROW(nd::log(g.constant(Tensor::vector({-2.0}))), DomainError);
}

TEST(Elementwise, IncompatibleShapesThrow) {
    Graph g;
    EXPECT_THROW(nd::add(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 2}))), ShapeError);
    EXPECT_THROW(nd::mul(g.constant(Tensor({2, 3})), g.constant(Tensor({2}))), ShapeError);
}

TEST(Elementwise, RowBroadcastAddsToEveryRow) {
    Graph g;
    const auto out = nd::add(g.constant(Tensor::matrix({{1, 2}, {3, 4}})), g.constant(Tensor::vector({10, 20}))).value();
    EXPECT_EQ(out, Tensor::matrix({{11, 22}, {13, 24}}));
}

TEST(Elementwise, SoftmaxRowsSumToOne) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const auto x = random_matrix(6, 9, rng, -30.0, 30.0);
        Graph g;
        const auto s = nd::softmax_rows(g.constant(x)).value();
        for (std::size_t r = 0; r < 6; ++r) {
            double total = 0.0;
            for (double v : s.row(r)) total += v;
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(Elementwise, NonFiniteForwardThrows) {
    Graph g;
    EXPECT_THROW(nd::exp(g.constant(Tensor::vector({1000.0}))), NonFiniteError);
}

TEST(Backward, SumGivesOnes) {
    Graph g;
    Var x = g.param(Tensor::vector({1, 2, 3, 4, 5}));
    g.backward(nd::sum(x));
    EXPECT_EQ(g.grad(x), Tensor::vector({1, 1, 1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
    Graph g;
    Var x = g.param(Tensor::vector({1, 2}));
    g.backward(nd::sum(nd::square(x)));
    EXPECT_EQ(g.grad(x), Tensor::vector({2, 4}));
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    const auto x = random_matrix(4, 3, rng);
    const auto w1 = random_matrix(3, 5, rng), b1 = random_matrix(1, 5, rng), w2 = random_matrix(5, 2, rng);
    auto loss = [&](Graph& g, Var W1, Var B1, Var W2) {
        Var h = nd::relu(nd::add(nd::matmul(g.constant(x), W1), B1));
        return nd::mean(nd::square(nd::matmul(h, W2)));
    };
    Graph g;
    Var W1 = g.param(w1), B1 = g.param(b1), W2 = g.param(w2);
    g.backward(loss(g, W1, B1, W2));
    const Tensor* params[] = {&w1, &b1, &w2};
    const Var vars[] = {W1, B1, W2};
    for (int which = 0; which < 3; ++which) {
        const auto& ga = g.grad(vars[which]);
        auto f = [&](const std::vector<double>& v) {
            Graph h;
            Tensor t(params[which]->shape(), v);
            Var a = h.constant(which == 0 ? t : w1), b = h.constant(which == 1 ? t : b1), c = h.constant(which == 2 ? t : w2);
            return loss(h, a, b, c).value().item();
        };
        const auto numeric = oracle::numeric_gradient(f, params[which]->storage());
        EXPECT_LT(oracle::max_relative_error(ga.storage(), numeric, 1e-8), 1e-5) << "parameter " << which;
    }
}

TEST(Backward, NonScalarLossRejected) {
    Graph g;
    Var x = g.param(Tensor::vector({1, 2}));
    EXPECT_THROW(g.backward(nd::square(x)), GraphError);
}

TEST(Backward, ConsumedGraphRejectedButFreshGraphWorks) {
    Graph g;
    Var x = g.param(Tensor::vector({1, 2}));
    Var l = nd::sum(x);
    g.backward(l);
    EXPECT_THROW(g.backward(l), GraphError);
    Graph fresh;
    Var y = fresh.param(Tensor::vector({1, 2}));
    fresh.backward(nd::sum(nd::square(y)));
    EXPECT_EQ(fresh.grad(y), Tensor::vector({2, 4}));
}

TEST(Backward, ConstantsReceiveNoGradient) {
    Graph g;
    Var c = g.constant(Tensor::vector({1, 2}));
    Var x = g.param(Tensor::vector({3, 4}));
    g.backward(nd::sum(nd::mul(c, x)));
    EXPECT_FALSE(g.requires_grad(c));
    EXPECT_EQ(g.grad(x), Tensor::vector({1, 2}));
}

// Every op in a composed loss, checked against central differences.
TEST(GradientProperty, EveryOpMatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    const std::size_t targets[] = {1, 0, 3, 2};
    const std::size_t ids[] = {2, 0, 2, 1};
    const std::size_t scatter_idx[] = {4, 1, 0};
    using Builder = std::function<Var(Graph&, Var)>;
    const std::vector<std::pair<std::string, Builder>> cases = {
        {"matmul_transpose", [&](Graph&, Var x) { return nd::sum(nd::square(nd::matmul(x, nd::transpose(x)))); }},
        {"add_broadcast", [&](Graph& g, Var x) { return nd::sum(nd::square(nd::add(g.constant(Tensor({4, 4}, 0.3)), nd::slice_cols(x, 0, 4)))); }},
        {"sub_mul", [&](Graph&, Var x) { return nd::sum(nd::mul(nd::sub(x, nd::scale(x, 0.5)), x)); }},
        {"relu", [&](Graph&, Var x) { return nd::sum(nd::square(nd::relu(x))); }},
        {"exp_log", [&](Graph&, Var x) { return nd::sum(nd::log(nd::add(nd::exp(x), nd::exp(nd::neg(x))))); }},
        {"abs", [&](Graph&, Var x) { return nd::sum(nd::abs(nd::scale(x, 3.0))); }},
        {"softmax", [&](Graph&, Var x) { return nd::sum(nd::square(nd::softmax_rows(x))); }},
        {"causal_softmax", [&](Graph&, Var x) { return nd::sum(nd::square(nd::causal_softmax_rows(nd::slice_cols(x, 0, 4)))); }},
        {"layer_norm", [&](Graph& g, Var x) {
             return nd::sum(nd::square(nd::layer_norm_rows(x, g.constant(Tensor::vector({1.5, 0.5, 1, 2, 1})),
                                                           g.constant(Tensor::vector({0.1, 0, 0, -0.2, 0.3})))));
         }},
        {"cross_entropy", [&](Graph&, Var x) { return nd::cross_entropy(x, targets); }},
        {"gather_rows", [&](Graph&, Var x) { return nd::sum(nd::square(nd::gather_rows(x, ids))); }},
        {"concat_cols", [&](Graph&, Var x) { return nd::sum(nd::square(nd::concat_cols({nd::slice_cols(x, 3, 2), x}))); }},
        {"scatter", [&](Graph&, Var x) { return nd::sum(nd::square(nd::scatter(nd::slice_cols(nd::mean_rows(x), 0, 3), scatter_idx, 6))); }},
        {"mean", [&](Graph&, Var x) { return nd::mean(nd::square(x)); }},
    };
    for (const auto& [name, build] : cases) {
        for (int trial = 0; trial < 5; ++trial) {
            auto x0 = random_matrix(4, 5, rng);
            for (auto& v : x0.data()) {
                if (std::fabs(v) < 1e-3) v = 0.1;  // keep away from the kinks of relu and abs
            }
            EXPECT_LT(gradient_error(x0, build), 1e-5) << name;
        }
    }
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
    std::mt19937_64 rng(7);
    const auto a = random_matrix(8, 16, rng), b = random_matrix(16, 8, rng);
    auto run = [&] {
        Graph g;
        return nd::layer_norm_rows(nd::softmax_rows(nd::matmul(g.constant(a), g.constant(b))), g.constant(Tensor({8}, 1.0)),
                                   g.constant(Tensor({8}, 0.0)))
            .value();
    };
    EXPECT_EQ(run(), run());
}

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    const Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Serialization, TensorRoundTripAndSidecar) {
    const auto dir = std::filesystem::temp_directory_path() / "saessv_test_serialize";
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(8);
    const auto t = random_matrix(3, 5, rng);
    nd::save_tensor(t, "weights", dir / "w");
    std::string name;
    EXPECT_EQ(nd::load_tensor(dir / "w", &name), t);
    EXPECT_EQ(name, "weights");
    std::ifstream side(dir / "w.json");
    const auto j = nlohmann::json::parse(side);
    EXPECT_EQ(j.at("shape"), nlohmann::json::array({3, 5}));
    EXPECT_EQ(j.at("name"), "weights");
    EXPECT_EQ(std::filesystem::file_size(dir / "w.bin"), 15u * 8u);
    std::ifstream raw(dir / "w.bin", std::ios::binary);
    unsigned char bytes[8];
    raw.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | bytes[i];  // little-endian
    double first;
    std::memcpy(&first, &bits, 8);
    EXPECT_EQ(first, t[0]);
    std::filesystem::remove_all(dir);
}
