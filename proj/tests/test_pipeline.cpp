#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "pipeline_common.hpp"

using namespace saessv;

namespace {

struct Loaded {
    app::Context ctx = pipeline::context();
    app::Artifacts a = app::load_core(ctx);
    lm::ActivationBatch train = lm::load_activations(ctx.layout.acts("train", corpus::Style::A));
    lm::ActivationBatch test = lm::load_activations(ctx.layout.acts("test", corpus::Style::A));
    nlohmann::json probe = pipeline::read(ctx.layout.probe());
};

const Loaded& loaded() {
    static const Loaded l;
    return l;
}

double mean_dim_variance(const nd::Tensor& x) {
    double total = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
        double m = 0.0, s = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) m += x.at(r, c);
        m /= static_cast<double>(x.rows());
        for (std::size_t r = 0; r < x.rows(); ++r) s += (x.at(r, c) - m) * (x.at(r, c) - m);
        total += s / static_cast<double>(x.rows());
    }
    return total / static_cast<double>(x.cols());
}

// |mean1 - mean0| / pooled std of the first heatmap row.
double top_gap(const std::string& file) {
    std::ifstream in(pipeline::root() / file);
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    std::stringstream s(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(s, cell, ',')) v.push_back(std::stod(cell));
    return std::abs(v.at(2) - v.at(1)) / v.at(3);
}

}  // namespace

TEST(PipelineLm, BeatsUnigram) {
    nlohmann::json meta;
    lm::load_params(loaded().ctx.layout.lm(), &meta);
    EXPECT_LT(meta.at("test_ce").get<double>(), meta.at("unigram_ce").get<double>());
}

TEST(PipelineSae, ReconstructsAndIsSparse) {
    const auto& l = loaded();
    const double mse = sae::reconstruction_mse(l.a.sae, l.test.rows);
    EXPECT_LT(mse, 0.15 * mean_dim_variance(l.test.rows));
    EXPECT_LT(sae::mean_l0(l.a.sae, l.test.rows), 102.0);
}

TEST(PipelineProbe, EnsembleIsAccurate) {
    double acc = 0.0;
    const auto& accs = loaded().probe.at("probe_accuracy");
    for (double a : accs) acc += a;
    EXPECT_EQ(accs.size(), 50u);
    EXPECT_GE(acc / static_cast<double>(accs.size()), 0.9);
}

TEST(PipelineProbe, CurveMatchesBruteForce) {
    const auto& l = loaded();
    const auto art = probe::from_artifact(l.probe);
    const auto x = probe::standardize(art.subspace, sae::encode_rows(l.a.sae, l.test.rows));
    const auto& v = art.direction.v_avg;
    for (std::size_t d : {std::size_t{1}, std::size_t{8}, art.direction.d_steer, v.size()}) {
        // keep the d largest |v| entries by sorting indices, then score sign of the projection
        std::vector<std::size_t> idx(v.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::abs(v[a]) > std::abs(v[b]); });
        std::vector<double> vd(v.size(), 0.0);
        for (std::size_t i = 0; i < d; ++i) vd[idx[i]] = v[idx[i]];
        double pos = 0, neg = 0, np = 0, nn = 0;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < vd.size(); ++j) dot += x.at(r, j) * vd[j];
            const double c = dot > 0 ? 1.0 : (dot < 0 ? -1.0 : 0.0);
            (l.test.labels[r] ? pos : neg) += c;
            (l.test.labels[r] ? np : nn) += 1;
        }
        EXPECT_NEAR(art.direction.curve.at(d - 1).second, pos / np - neg / nn, 1e-9) << "d=" << d;
    }
}

TEST(PipelineSsv, InitVectorOnSubspaceWithUnitNorm) {
    const auto& l = loaded();
    const auto init = app::load_vector(l.ctx, l.a, "init");
    const auto art = probe::from_artifact(l.probe);
    const std::set<std::size_t> I(art.subspace.indices.begin(), art.subspace.indices.end());
    for (auto s : init.support) EXPECT_TRUE(I.count(s));
    EXPECT_EQ(init.d_steer(), art.direction.d_steer);
    EXPECT_NEAR(init.norm(), 1.0, 1e-12);

    const auto c = ssv::centroids(sae::encode_rows(l.a.sae, l.train.rows), l.train.labels);
    double n = 0.0;
    for (auto s : init.support) n += (c.mu_pos[s] - c.mu_neg[s]) * (c.mu_pos[s] - c.mu_neg[s]);
    for (std::size_t i = 0; i < init.d_steer(); ++i) {
        const auto s = init.support[i];
        EXPECT_NEAR(init.values[i], (c.mu_pos[s] - c.mu_neg[s]) / std::sqrt(n), 1e-12);
    }
}

TEST(PipelineSsv, TrainedVectorKeepsSupportAndLowersLoss) {
    const auto& l = loaded();
    const auto init = app::load_vector(l.ctx, l.a, "init");
    const auto trained = app::load_vector(l.ctx, l.a, "ssv");
    EXPECT_EQ(trained.support, init.support);
    std::ifstream in(l.ctx.layout.history("ssv"));
    std::string line, first, last;
    std::getline(in, line);
    std::getline(in, first);
    while (std::getline(in, line)) last = line;
    const auto total = [](const std::string& row) { return std::stod(row.substr(row.rfind(',') + 1)); };
    EXPECT_LT(total(last), total(first));
}

TEST(PipelineSteering, SsvAndCaaBeatZeroLambda) {
    const auto ssv4 = pipeline::report("ssv_A_l4"), ssv0 = pipeline::report("ssv_A_l0");
    const auto caa4 = pipeline::report("CAA_A_l4"), caa0 = pipeline::report("CAA_A_l0");
    EXPECT_GT(ssv4.at("sr_pct").get<double>(), ssv0.at("sr_pct").get<double>());
    EXPECT_GT(caa4.at("sr_pct").get<double>(), caa0.at("sr_pct").get<double>());
    EXPECT_EQ(ssv4.at("n_prompts"), 200);
}

TEST(PipelineSteering, UnsteeredContinuationsMostlyRetained) {
    const auto base = pipeline::report("ssv_A_l0");
    EXPECT_GT(base.at("base_retained_pct").get<double>(), 50.0);
    EXPECT_TRUE(base.at("identical_to_base").get<bool>());
}

TEST(PipelineHeatmap, SaeGapExceedsResidualGap) {
    EXPECT_GT(top_gap("heatmap_sae.csv"), top_gap("heatmap_residual.csv"));
}

TEST(PipelineBaselines, DirectionsAreUnitAndSignFixed) {
    const auto& l = loaded();
    const auto caa = baselines::caa(l.train);
    for (auto m : {baselines::Method::caa, baselines::Method::repe, baselines::Method::top_pc, baselines::Method::iti_lite}) {
        const auto d = baselines::direction_from_json(pipeline::read(l.ctx.layout.direction(m)));
        double n = 0.0, dot = 0.0;
        for (std::size_t i = 0; i < d.vec.size(); ++i) {
            n += d.vec[i] * d.vec[i];
            dot += d.vec[i] * caa.vec[i];
        }
        EXPECT_NEAR(n, 1.0, 1e-10);
        EXPECT_GE(dot, 0.0) << baselines::method_name(m);
        RecordProperty(baselines::method_name(m) + "_cos_caa", std::to_string(dot));
    }
}
