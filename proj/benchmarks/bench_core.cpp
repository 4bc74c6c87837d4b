#include <benchmark/benchmark.h>

#include <random>

#include "saessv/corpus.hpp"
#include "saessv/ops.hpp"
#include "saessv/sae.hpp"
#include "saessv/toylm.hpp"

using namespace saessv;

namespace {

nd::Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist;
    nd::Tensor t({r, c});
    for (auto& x : t.data()) x = dist(rng);
    return t;
}

const lm::LmParams& model() {
    static const auto p = [] {
        auto params = lm::LmParams::init(lm::LmConfig{});
        params.trained = true;
        return params;
    }();
    return p;
}

corpus::Tokens prompt(std::size_t n) {
    corpus::Tokens t{corpus::kBos};
    for (std::size_t i = 1; i < n; ++i) t.push_back(34 + (i * 37) % 200);
    return t;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    nd::Tensor out({n, n});
    for (auto _ : state) {
        nd::kernel::matmul(a, b, out);
        benchmark::DoNotOptimize(out.data().data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_LmForward(benchmark::State& state) {
    const auto ids = prompt(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(lm::forward_with_hook(model(), ids));
}
BENCHMARK(BM_LmForward)->Arg(16)->Arg(64);

static void BM_LmTrainStep(benchmark::State& state) {
    const auto ids = prompt(48);
    for (auto _ : state) {
        nd::Graph g;
        const auto vars = lm::bind(g, model(), true);
        auto loss = lm::sequence_loss(vars, model().config, ids);
        g.backward(loss);
        benchmark::DoNotOptimize(g.grad(vars.tok_emb).data().data());
    }
}
BENCHMARK(BM_LmTrainStep);

static void BM_Generate(benchmark::State& state) {
    const auto p = prompt(12);
    lm::GenerateOptions opts;
    opts.max_new = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(lm::generate(model(), p, opts));
}
BENCHMARK(BM_Generate)->Arg(48);

static void BM_SaeEncodeRows(benchmark::State& state) {
    const auto data = random_matrix(256, 128, 3);
    const auto s = sae::init_params(128, 1024, data, 4);
    for (auto _ : state) benchmark::DoNotOptimize(sae::encode_rows(s, data));
    state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_SaeEncodeRows);

BENCHMARK_MAIN();
