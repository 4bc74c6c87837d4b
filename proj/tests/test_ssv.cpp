#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "saessv/error.hpp"
#include "saessv/ssv.hpp"

using namespace saessv;
using nd::Tensor;

namespace {

struct Fixture {
    lm::LmParams lm;
    sae::SaeParams sae;
    corpus::Corpus texts;
    ssv::ClassCentroids cen;
    probe::Subspace sub;
};

// Small trained LM with a random SAE over its activations.
const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture x;
        lm::LmConfig c;
        c.d_model = 16;
        c.n_layers = 2;
        c.n_heads = 2;
        c.d_ff = 32;
        c.hook_layer = 1;
        x.texts = corpus::generate_corpus(1, 60, corpus::Style::A, 0.8);
        lm::TrainOptions opt;
        opt.epochs = 1;
        x.lm = lm::train_lm(x.texts, c, opt);
        const auto acts = lm::dump_activations(x.lm, x.texts, 1);
        x.sae = sae::init_params(16, 40, acts.rows, 2);
        const auto codes = sae::encode_rows(x.sae, acts.rows);
        x.cen = ssv::centroids(codes, acts.labels);
        x.sub = probe::select_subspace(probe::f_scores(codes, acts.labels), codes, 20);
        return x;
    }();
    return f;
}

ssv::SteeringVector init(std::size_t d_steer = 6) {
    const auto& f = fixture();
    auto v = ssv::init_vector(f.cen, f.sub, d_steer);
    v.lm_hash = f.lm.hash();
    v.sae_hash = f.sae.hash();
    return v;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> b(n);
    std::iota(b.begin(), b.end(), 0);
    return b;
}

}  // namespace

TEST(Centroids, ClassMeans) {
    Tensor z = Tensor::matrix({{1, 2}, {3, 4}, {5, 0}, {7, 2}});
    const auto c = ssv::centroids(z, std::vector<int>{1, 1, 0, 0});
    EXPECT_EQ(c.mu_pos, (std::vector<double>{2, 3}));
    EXPECT_EQ(c.mu_neg, (std::vector<double>{6, 1}));
    EXPECT_THROW(ssv::centroids(z, std::vector<int>{1, 1, 1, 1}), PreconditionError);
}

TEST(InitVector, NormalizesTopDifference) {
    ssv::ClassCentroids c;
    c.mu_pos = {3, 0, 0, 0, 9};
    c.mu_neg = {0, 0, 4, 0, 0};
    probe::Subspace sub;
    sub.indices = {0, 1, 2, 3};
    sub.mean.assign(4, 0.0);
    sub.std.assign(4, 1.0);
    const auto v = ssv::init_vector(c, sub, 2);
    EXPECT_EQ(v.support, (std::vector<std::size_t>{0, 2}));
    EXPECT_NEAR(v.values[0], 0.6, 1e-15);
    EXPECT_NEAR(v.values[1], -0.8, 1e-15);
    EXPECT_NEAR(v.norm(), 1.0, 1e-12);
    EXPECT_EQ(v.d_sae, 5u);
    const auto dense = v.dense();
    EXPECT_EQ(dense[4], 0.0);  // outside I even though its gap is largest
    EXPECT_EQ(v.i_hash, sub.hash());
}

TEST(InitVector, Errors) {
    ssv::ClassCentroids c;
    c.mu_pos = {1, 2, 3};
    c.mu_neg = {1, 2, 3};
    probe::Subspace sub;
    sub.indices = {0, 1};
    sub.mean.assign(2, 0.0);
    sub.std.assign(2, 1.0);
    EXPECT_THROW(ssv::init_vector(c, sub, 1), DegenerateError);
    c.mu_pos = {2, 2, 3};
    EXPECT_THROW(ssv::init_vector(c, sub, 3), PreconditionError);
    EXPECT_THROW(ssv::init_vector(c, sub, 0), PreconditionError);
}

TEST(InitVector, TiesGoToLowerIndex) {
    ssv::ClassCentroids c;
    c.mu_pos = {1, 1, 1};
    c.mu_neg = {0, 0, 0};
    probe::Subspace sub;
    sub.indices = {0, 1, 2};
    sub.mean.assign(3, 0.0);
    sub.std.assign(3, 1.0);
    EXPECT_EQ(ssv::init_vector(c, sub, 2).support, (std::vector<std::size_t>{0, 1}));
}

TEST(TwinPairs, PairsNegativeWithItsTwin) {
    const auto c = corpus::generate_corpus(3, 20, corpus::Style::A, 0.8);
    const auto pairs = ssv::twin_pairs(c);
    ASSERT_EQ(pairs.size(), 10u);
    const auto& w = corpus::World::standard();
    for (const auto& p : pairs) {
        ASSERT_EQ(p.positive.size(), p.negative.size());
        for (std::size_t i = 0; i < p.positive.size(); ++i) {
            const bool marker = w.is_positive_marker(p.positive[i]) || w.is_negative_marker(p.positive[i]);
            if (!marker) EXPECT_EQ(p.positive[i], p.negative[i]);
        }
    }
}

TEST(SteerObjective, DistanceGradientIsCentroidGap) {
    const auto& f = fixture();
    auto v = init();
    ssv::SsvTrainConfig cfg;
    cfg.lambda_lm = 0.0;
    cfg.lambda_reg = 0.0;
    const auto pairs = ssv::twin_pairs(f.texts);
    ssv::SteerObjective obj(f.lm, f.sae, f.cen, {pairs[0]}, v.support, cfg);
    std::vector<double> grad;
    const std::vector<std::size_t> batch{0};
    obj.evaluate(v.values, batch, &grad);
    for (std::size_t i = 0; i < v.support.size(); ++i) {
        const auto j = v.support[i];
        EXPECT_NEAR(grad[i], 2.0 * (f.cen.mu_neg[j] - f.cen.mu_pos[j]), 1e-10);
    }
}

TEST(SteerObjective, TotalIsWeightedSum) {
    const auto& f = fixture();
    auto v = init();
    ssv::SsvTrainConfig cfg;
    cfg.lambda_dist = 0.7;
    cfg.lambda_lm = 0.3;
    cfg.lambda_reg = 0.2;
    ssv::SteerObjective obj(f.lm, f.sae, f.cen, ssv::twin_pairs(f.texts), v.support, cfg);
    const auto l = obj.evaluate(v.values, all_indices(obj.num_pairs()));
    EXPECT_NEAR(l.total, 0.7 * (l.dist_pos - l.dist_neg) + 0.3 * l.lm + 0.2 * l.l1, 1e-9);
    double l1 = 0;
    for (double x : v.values) l1 += std::abs(x);
    EXPECT_NEAR(l.l1, l1, 1e-12);
}

TEST(SteerObjective, GradientMatchesFiniteDifferences) {
    const auto& f = fixture();
    auto v = init();
    for (double& x : v.values) x *= 1.3;
    for (bool per_token : {false, true}) {
        for (bool ec : {true, false}) {
            ssv::SsvTrainConfig cfg;
            cfg.per_token_distance = per_token;
            cfg.error_corrected = ec;
            const auto pairs = ssv::twin_pairs(f.texts);
            ssv::SteerObjective obj(f.lm, f.sae, f.cen, {pairs.begin(), pairs.begin() + 4}, v.support, cfg);
            const auto batch = all_indices(4);
            std::vector<double> grad;
            obj.evaluate(v.values, batch, &grad);
            double worst = 0;
            for (std::size_t i = 0; i < v.values.size(); ++i) {
                auto up = v.values, down = v.values;
                up[i] += 1e-5;
                down[i] -= 1e-5;
                const double numeric = (obj.evaluate(up, batch).total - obj.evaluate(down, batch).total) / 2e-5;
                worst = std::max(worst, std::abs(numeric - grad[i]) / std::max(1e-6, std::abs(numeric)));
            }
            EXPECT_LT(worst, 1e-4) << "per_token=" << per_token << " ec=" << ec;
        }
    }
}

TEST(Optimize, ZeroLearningRateIsNoOp) {
    const auto& f = fixture();
    const auto v = init();
    ssv::SsvTrainConfig cfg;
    cfg.lr = 0.0;
    cfg.iterations = 100;
    cfg.batch_size = 8;
    const auto r = ssv::optimize(v, ssv::twin_pairs(f.texts), f.lm, f.sae, f.cen, cfg);
    EXPECT_EQ(r.vector.values, v.values);
    EXPECT_EQ(r.vector.support, v.support);
    ASSERT_EQ(r.history.size(), 101u);
    for (const auto& h : r.history) EXPECT_EQ(h.total, r.history.front().total);
}

TEST(Optimize, DecreasesLossAndKeepsSupport) {
    const auto& f = fixture();
    const auto v = init();
    ssv::SsvTrainConfig cfg;
    cfg.iterations = 20;
    cfg.batch_size = 8;
    const auto r = ssv::optimize(v, ssv::twin_pairs(f.texts), f.lm, f.sae, f.cen, cfg);
    EXPECT_LT(r.history.back().total, r.history.front().total);
    EXPECT_EQ(r.vector.support, v.support);
    const auto dense = r.vector.dense();
    for (std::size_t j = 0; j < dense.size(); ++j) {
        if (!std::binary_search(v.support.begin(), v.support.end(), j)) EXPECT_EQ(dense[j], 0.0);
    }
    EXPECT_EQ(r.vector.lm_hash, v.lm_hash);

    const auto again = ssv::optimize(v, ssv::twin_pairs(f.texts), f.lm, f.sae, f.cen, cfg);
    EXPECT_EQ(again.vector.values, r.vector.values);
}

TEST(Optimize, Errors) {
    const auto& f = fixture();
    auto v = init();
    EXPECT_THROW(ssv::optimize(v, {}, f.lm, f.sae, f.cen, {}), PreconditionError);
    ssv::SsvTrainConfig bad;
    bad.lambda_lm = -1.0;
    EXPECT_THROW(ssv::optimize(v, ssv::twin_pairs(f.texts), f.lm, f.sae, f.cen, bad), PreconditionError);
    auto empty = v;
    empty.support.clear();
    empty.values.clear();
    EXPECT_THROW(ssv::optimize(empty, ssv::twin_pairs(f.texts), f.lm, f.sae, f.cen, {}), PreconditionError);
}

TEST(SteerGenerate, ZeroLambdaErrorCorrectedIsIdentity) {
    const auto& f = fixture();
    const auto v = init();
    lm::GenerateOptions gen;
    gen.max_new = 20;
    ssv::SteerConfig sc;
    sc.lambda_scale = 0.0;
    for (const auto& t : f.texts) {
        const std::span<const corpus::TokenId> prompt(t.token_ids.data(), 8);
        EXPECT_EQ(ssv::steer_generate(f.lm, f.sae, v, prompt, sc, gen), lm::generate(f.lm, prompt, gen));
    }
}

TEST(SteerGenerate, ResidualShiftIsDecoderCombination) {
    const auto& f = fixture();
    const auto v = init();
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    for (double lambda : {0.5, 2.0, 4.0}) {
        std::vector<double> h(16);
        for (auto& x : h) x = g(rng);
        const auto out = sae::reinsert(f.sae, h, v.scaled(lambda), true);
        for (std::size_t i = 0; i < 16; ++i) {
            double want = 0;
            for (std::size_t k = 0; k < v.support.size(); ++k) want += lambda * v.values[k] * f.sae.w_dec.at(v.support[k], i);
            EXPECT_NEAR(out[i] - h[i], want, 1e-10);
        }
    }
}

TEST(SteerGenerate, LineageAndLambdaRange) {
    const auto& f = fixture();
    auto v = init();
    v.lm_hash = "0000000000000000";
    const std::vector<corpus::TokenId> prompt{1, 40, 41};
    EXPECT_THROW(ssv::steer_generate(f.lm, f.sae, v, prompt, {}, {}), ArtifactError);
    v = init();
    ssv::SteerConfig sc;
    sc.lambda_scale = 11.0;
    EXPECT_THROW(ssv::steer_generate(f.lm, f.sae, v, prompt, sc, {}), PreconditionError);
}

TEST(Trace, DirectionsAreWellFormed) {
    const auto v = init();
    const auto d = ssv::trace_directions(v, 7);
    double dot = 0, n_orth = 0, n_rand = 0, n_ssv = 0;
    const auto dense = v.dense();
    for (std::size_t j = 0; j < d.ssv.size(); ++j) {
        dot += d.orthogonal[j] * d.ssv[j];
        n_orth += d.orthogonal[j] * d.orthogonal[j];
        n_rand += d.random[j] * d.random[j];
        n_ssv += d.ssv[j] * d.ssv[j];
        if (dense[j] == 0.0) EXPECT_EQ(d.orthogonal[j], 0.0);
    }
    EXPECT_NEAR(dot, 0.0, 1e-10);
    EXPECT_NEAR(n_orth, 1.0, 1e-12);
    EXPECT_NEAR(n_rand, 1.0, 1e-12);
    EXPECT_NEAR(n_ssv, 1.0, 1e-12);
    EXPECT_THROW(ssv::trace_directions(init(1), 7), PreconditionError);
}

TEST(Trace, UnsteeredIsDeterministic) {
    const auto& f = fixture();
    const auto v = init();
    const auto dirs = ssv::trace_directions(v, 1);
    const std::vector<corpus::TokenId> prompt(f.texts[0].token_ids.begin(), f.texts[0].token_ids.begin() + 8);
    const auto a = ssv::projection_trace(f.lm, f.sae, v, dirs, ssv::TraceDirection::none, prompt, {}, 10);
    const auto b = ssv::projection_trace(f.lm, f.sae, v, dirs, ssv::TraceDirection::none, prompt, {}, 10);
    EXPECT_EQ(a.size(), 10u);
    EXPECT_EQ(a, b);
    const auto s = ssv::projection_trace(f.lm, f.sae, v, dirs, ssv::TraceDirection::ssv, prompt, {}, 10);
    // The first generated position sees the same h in both runs, so the shift there is exactly λ‖v‖.
    EXPECT_NEAR(s[0] - a[0], 4.0 * v.norm(), 1e-9);
}

TEST(SteeringVectorIo, JsonRoundTrip) {
    auto v = init();
    v.i_hash = "abc";
    const auto j = ssv::to_json(v);
    for (const char* key : {"support", "values", "d_steer", "I_hash", "lm_hash", "sae_hash"}) EXPECT_TRUE(j.contains(key)) << key;
    const auto back = ssv::vector_from_json(j);
    EXPECT_EQ(back.support, v.support);
    EXPECT_EQ(back.values, v.values);
    EXPECT_EQ(back.lm_hash, v.lm_hash);
    auto bad = j;
    bad["d_steer"] = 99;
    EXPECT_THROW(ssv::vector_from_json(bad), ArtifactError);
}

TEST(History, CsvHasHeaderAndRows) {
    std::vector<ssv::LossBreakdown> h(3);
    h[1].total = 2.5;
    const auto path = (std::filesystem::temp_directory_path() / "saessv_hist.csv").string();
    ssv::write_history_csv(h, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "iteration,dist_pos,dist_neg,lm,l1,total");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 3u);
    std::filesystem::remove(path);
}
