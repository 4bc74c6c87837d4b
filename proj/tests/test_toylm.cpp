#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "saessv/error.hpp"
#include "saessv/hash.hpp"
#include "saessv/toylm.hpp"

using namespace saessv;

namespace {

lm::LmConfig tiny_config() {
    lm::LmConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.hook_layer = 1;
    c.seed = 3;
    return c;
}

const lm::LmParams& small_trained() {
    static const lm::LmParams p = [] {
        auto c = tiny_config();
        c.d_model = 32;
        c.d_ff = 64;
        lm::TrainOptions opt;
        opt.epochs = 2;
        return lm::train_lm(corpus::generate_corpus(1, 200, corpus::Style::A, 0.8), c, opt);
    }();
    return p;
}

corpus::Tokens prompt() { return {corpus::kBos, 40, 41, 42, 43}; }

bool bit_equal(const nd::Tensor& a, const nd::Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (std::memcmp(a.data().data() + i, b.data().data() + i, sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace

TEST(LmConfig, Validation) {
    auto c = tiny_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), PreconditionError);
    c = tiny_config();
    c.hook_layer = 2;
    EXPECT_THROW(c.validate(), PreconditionError);
    nlohmann::json j = tiny_config();
    EXPECT_EQ(j.get<lm::LmConfig>().d_model, 16u);
}

TEST(TrainLm, MemorizesRepeatedToken) {
    corpus::LabeledText t;
    t.token_ids.assign(16, 50);
    t.token_ids[0] = corpus::kBos;
    const corpus::Corpus c{t};
    lm::TrainOptions opt;
    opt.epochs = 50;
    opt.lr = 1e-2;
    const auto p = lm::train_lm(c, tiny_config(), opt);
    EXPECT_LT(lm::cross_entropy(p, c), 0.1);
}

TEST(TrainLm, ZeroEpochsIsNearUniform) {
    lm::TrainOptions opt;
    opt.epochs = 0;
    const auto c = corpus::generate_corpus(2, 20, corpus::Style::A, 0.8);
    const auto p = lm::train_lm(c, lm::LmConfig{}, opt);
    EXPECT_NEAR(lm::cross_entropy(p, c), std::log(256.0), 0.05 * std::log(256.0));
}

TEST(TrainLm, BeatsUnigramBaseline) {
    const auto s = corpus::split(corpus::generate_corpus(1, 400, corpus::Style::A, 0.8), 0.8, 1);
    lm::TrainOptions opt;
    opt.epochs = 2;
    const auto p = lm::train_lm(s.train, lm::LmConfig{}, opt);
    EXPECT_LT(lm::cross_entropy(p, s.test), lm::unigram_cross_entropy(s.train, s.test, 256));
}

TEST(TrainLm, Deterministic) {
    const auto c = corpus::generate_corpus(1, 20, corpus::Style::A, 0.8);
    lm::TrainOptions opt;
    opt.epochs = 1;
    EXPECT_EQ(lm::train_lm(c, tiny_config(), opt).hash(), lm::train_lm(c, tiny_config(), opt).hash());
}

TEST(TrainLm, Preconditions) {
    EXPECT_THROW(lm::train_lm({}, tiny_config(), {}), PreconditionError);
    auto c = tiny_config();
    c.context_len = 8;
    EXPECT_THROW(lm::train_lm(corpus::generate_corpus(1, 2, corpus::Style::A, 0.8), c, {}), PreconditionError);
}

TEST(TrainLm, DivergenceIsReported) {
    lm::TrainOptions opt;
    opt.epochs = 3;
    opt.lr = 1e300;
    opt.clip_norm = 0.0;
    EXPECT_THROW(lm::train_lm(corpus::generate_corpus(1, 20, corpus::Style::A, 0.8), tiny_config(), opt),
                 NonFiniteError);
}

TEST(Hooks, ReadModeIsPassive) {
    const auto& p = small_trained();
    const auto ids = prompt();
    const auto plain = lm::forward_with_hook(p, ids);
    lm::ResidualHook read{1, lm::HookMode::read, {}};
    const auto hooked = lm::forward_with_hook(p, ids, &read);
    EXPECT_TRUE(bit_equal(plain.logits, hooked.logits));
    EXPECT_EQ(hooked.captured.rows(), ids.size());
    EXPECT_EQ(hooked.captured.cols(), p.config.d_model);
}

TEST(Hooks, IdentityReplaceIsPassive) {
    const auto& p = small_trained();
    lm::ResidualHook id{1, lm::HookMode::replace, [](std::size_t, std::span<double>) {}};
    EXPECT_TRUE(bit_equal(lm::forward_with_hook(p, prompt()).logits, lm::forward_with_hook(p, prompt(), &id).logits));
}

TEST(Hooks, UnitShiftChangesLogits) {
    const auto& p = small_trained();
    lm::ResidualHook shift{1, lm::HookMode::replace, [](std::size_t, std::span<double> row) { row[0] += 1.0; }};
    EXPECT_FALSE(bit_equal(lm::forward_with_hook(p, prompt()).logits, lm::forward_with_hook(p, prompt(), &shift).logits));
}

TEST(Hooks, LayerOutOfRange) {
    lm::ResidualHook bad{5, lm::HookMode::read, {}};
    EXPECT_THROW(lm::forward_with_hook(small_trained(), prompt(), &bad), PreconditionError);
}

TEST(Hooks, SessionMatchesFullForward) {
    const auto& p = small_trained();
    const corpus::Tokens ids{1, 60, 61, 62, 63, 64, 65};
    const auto full = lm::forward_with_hook(p, ids);
    lm::Session s(p);
    s.feed(std::span<const corpus::TokenId>(ids).first(3));
    std::vector<double> last;
    for (std::size_t t = 3; t < ids.size(); ++t) {
        const auto logits = s.feed(std::span<const corpus::TokenId>(ids).subspan(t, 1));
        for (std::size_t v = 0; v < logits.cols(); ++v) EXPECT_NEAR(logits.at(0, v), full.logits.at(t, v), 1e-10);
    }
}

TEST(Generate, GreedyDeterministic) {
    lm::GenerateOptions opt;
    opt.max_new = 20;
    const auto a = lm::generate(small_trained(), prompt(), opt);
    EXPECT_EQ(a, lm::generate(small_trained(), prompt(), opt));
    ASSERT_EQ(a.size(), prompt().size() + 20);
    const auto head = prompt();
    EXPECT_TRUE(std::equal(head.begin(), head.end(), a.begin()));
}

TEST(Generate, ZeroNewTokens) {
    lm::GenerateOptions opt;
    opt.max_new = 0;
    EXPECT_EQ(lm::generate(small_trained(), prompt(), opt), prompt());
}

TEST(Generate, IdentityHook) {
    lm::GenerateOptions opt;
    opt.max_new = 20;
    lm::ResidualHook id{1, lm::HookMode::replace, [](std::size_t, std::span<double>) {}};
    EXPECT_EQ(lm::generate(small_trained(), prompt(), opt, &id), lm::generate(small_trained(), prompt(), opt));
}

TEST(Generate, HookSeesOnlyGeneratedPositionsByDefault) {
    lm::GenerateOptions opt;
    opt.max_new = 6;
    std::vector<std::size_t> seen;
    lm::ResidualHook rec{1, lm::HookMode::replace, [&](std::size_t pos, std::span<double>) { seen.push_back(pos); }};
    lm::generate(small_trained(), prompt(), opt, &rec);
    ASSERT_FALSE(seen.empty());
    for (auto pos : seen) EXPECT_GE(pos, prompt().size() - 1);

    seen.clear();
    opt.steer_prompt = true;
    lm::generate(small_trained(), prompt(), opt, &rec);
    EXPECT_EQ(seen.front(), 0u);
}

TEST(Generate, SampledIsSeeded) {
    lm::GenerateOptions opt;
    opt.max_new = 20;
    opt.temperature = 1.0;
    opt.seed = 4;
    EXPECT_EQ(lm::generate(small_trained(), prompt(), opt), lm::generate(small_trained(), prompt(), opt));
}

TEST(Generate, Errors) {
    lm::GenerateOptions opt;
    EXPECT_THROW(lm::generate(small_trained(), {}, opt), PreconditionError);
    opt.temperature = -1.0;
    EXPECT_THROW(lm::generate(small_trained(), prompt(), opt), DomainError);
    opt.temperature = 0.0;
    opt.max_new = 64;
    EXPECT_THROW(lm::generate(small_trained(), prompt(), opt), PreconditionError);
}

TEST(Activations, ShapeAndLabels) {
    const auto c = corpus::generate_corpus(3, 2, corpus::Style::A, 0.8);
    const auto b = lm::dump_activations(small_trained(), c, 1);
    EXPECT_EQ(b.rows.rows(), 2u);
    EXPECT_EQ(b.rows.cols(), small_trained().config.d_model);
    EXPECT_EQ(b.labels[0], c[0].label);
    EXPECT_EQ(b.labels[1], c[1].label);
    EXPECT_EQ(b.lm_hash, small_trained().hash());
}

TEST(Activations, MeanOfCapturedRows) {
    const auto c = corpus::generate_corpus(3, 4, corpus::Style::B, 0.8);
    const auto b = lm::dump_activations(small_trained(), c, 1);
    lm::ResidualHook read{1, lm::HookMode::read, {}};
    for (std::size_t i = 0; i < c.size(); ++i) {
        const auto cap = lm::forward_with_hook(small_trained(), c[i].token_ids, &read).captured;
        for (std::size_t j = 0; j < cap.cols(); ++j) {
            long double s = 0;
            for (std::size_t t = 0; t < cap.rows(); ++t) s += cap.at(t, j);
            EXPECT_NEAR(b.rows.at(i, j), static_cast<double>(s / cap.rows()), 1e-12);
        }
    }
}

TEST(Activations, FileIsDeterministic) {
    const auto dir = std::filesystem::temp_directory_path() / "saessv_act";
    std::filesystem::create_directories(dir);
    const auto c = corpus::generate_corpus(3, 10, corpus::Style::A, 0.8);
    lm::save_activations(lm::dump_activations(small_trained(), c, 1), dir / "a");
    lm::save_activations(lm::dump_activations(small_trained(), c, 1), dir / "b");
    EXPECT_EQ(file_hash(dir / "a.bin"), file_hash(dir / "b.bin"));
    EXPECT_EQ(file_hash(dir / "a.json"), file_hash(dir / "b.json"));
    const auto back = lm::load_activations(dir / "a");
    EXPECT_EQ(back.labels, lm::dump_activations(small_trained(), c, 1).labels);
    EXPECT_EQ(back.rows.storage(), lm::dump_activations(small_trained(), c, 1).rows.storage());
    std::filesystem::remove_all(dir);
}

TEST(Activations, UntrainedRejected) {
    const auto p = lm::LmParams::init(tiny_config());
    EXPECT_THROW(lm::dump_activations(p, corpus::generate_corpus(3, 2, corpus::Style::A, 0.8), 1), PreconditionError);
}

TEST(LmParamsIo, RoundTripAndTamper) {
    const auto dir = std::filesystem::temp_directory_path() / "saessv_lmio";
    std::filesystem::create_directories(dir);
    lm::save_params(small_trained(), dir / "lm");
    const auto back = lm::load_params(dir / "lm");
    EXPECT_EQ(back.hash(), small_trained().hash());
    EXPECT_TRUE(back.trained);
    {
        std::fstream f(dir / "lm.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const double junk = 123.0;
        f.write(reinterpret_cast<const char*>(&junk), sizeof junk);
    }
    EXPECT_THROW(lm::load_params(dir / "lm"), ArtifactError);
    std::filesystem::remove_all(dir);
}

TEST(LmGradient, MatchesFiniteDifferences) {
    auto params = lm::LmParams::init(tiny_config());
    const corpus::Tokens ids{1, 70, 71, 72, 70, 73};
    nd::Graph g;
    auto vars = lm::bind(g, params, true);
    g.backward(lm::sequence_loss(vars, params.config, ids));
    const auto all = vars.all();
    std::vector<nd::Tensor> grads;
    for (auto v : all) grads.push_back(g.grad(v));

    auto loss_at = [&](const lm::LmParams& p) {
        nd::Graph h;
        auto vs = lm::bind(h, p, false);
        return lm::sequence_loss(vs, p.config, ids).value().item();
    };
    std::vector<nd::Tensor*> slots;
    params.for_each([&](const std::string&, nd::Tensor& t) { slots.push_back(&t); });
    std::mt19937_64 rng(5);
    double worst = 0.0;
    for (std::size_t k = 0; k < slots.size(); ++k) {
        std::uniform_int_distribution<std::size_t> pick(0, slots[k]->numel() - 1);
        for (int trial = 0; trial < 3; ++trial) {
            const auto i = pick(rng);
            const double orig = (*slots[k])[i];
            const double h = 1e-5;
            (*slots[k])[i] = orig + h;
            const double up = loss_at(params);
            (*slots[k])[i] = orig - h;
            const double down = loss_at(params);
            (*slots[k])[i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double analytic = grads[k][i];
            worst = std::max(worst, std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic)));
        }
    }
    EXPECT_LT(worst, 1e-4);
}
