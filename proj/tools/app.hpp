#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/baselines.hpp"
#include "saessv/corpus.hpp"
#include "saessv/eval.hpp"
#include "saessv/probe.hpp"
#include "saessv/sae.hpp"
#include "saessv/ssv.hpp"
#include "saessv/toylm.hpp"

namespace saessv::app {

namespace fs = std::filesystem;

struct CorpusSection {
    std::size_t n_texts = 2000;  // per style
    double strength = 0.8;
    double train_fraction = 0.8;
    std::size_t prompt_len = 12;
    std::size_t n_prompts = 200;
    corpus::GenOptions gen;
};

struct RunConfig {
    std::uint64_t seed = 42;
    CorpusSection corpus;
    lm::LmConfig lm;
    lm::TrainOptions lm_train;
    sae::SaeTrainConfig sae;
    probe::ProbeConfig probe;
    std::size_t k = 128;
    ssv::SsvTrainConfig ssv;
    ssv::SteerConfig steer;
    eval::EvalOptions eval;
    std::vector<double> lambdas{0.0, 1.0, 2.0, 4.0};

    // Module seeds are offsets; the global seed shifts every stage.
    std::uint64_t stage_seed(std::uint64_t stage, std::uint64_t local) const;
    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// Unknown fields and bad values raise ConfigError naming the field path.
RunConfig config_from_json(const nlohmann::json& j);
// Applies "section.field=value" assignments; the value is read as JSON when
// it parses, as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);
RunConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides);

// Artifact locations under the output directory.
struct Layout {
    fs::path root;

    fs::path corpus(const std::string& part, corpus::Style style) const;  // part = train | test
    fs::path vocab() const { return root / "corpus" / "vocab.json"; }
    fs::path corpus_manifest() const { return root / "corpus" / "manifest.json"; }
    fs::path judge() const { return root / "judge.json"; }
    fs::path lm() const { return root / "lm"; }
    fs::path acts(const std::string& part, corpus::Style style) const;
    fs::path sae() const { return root / "sae"; }
    fs::path probe() const { return root / "probe.json"; }
    fs::path vector(const std::string& variant) const;  // ssv | init | no-lm
    fs::path history(const std::string& variant) const;
    fs::path direction(baselines::Method m) const;
    fs::path generations(const std::string& tag) const;
    fs::path report(const std::string& tag) const;
    fs::path compare() const { return root / "compare.csv"; }
};

struct Context {
    RunConfig config;
    Layout layout;
    bool verbose = true;
};

void gen_corpus(const Context& ctx);
void train_lm(const Context& ctx);
void dump_activations(const Context& ctx);
void train_sae(const Context& ctx);
void select_dims(const Context& ctx);
void learn_ssv(const Context& ctx);

struct SteerRequest {
    std::string method = "ssv";  // ssv | init | no-lm | none | caa | repe | top_pc | iti_lite
    double lambda_scale = 4.0;
    bool error_corrected = true;
    corpus::Style style = corpus::Style::A;
};

// Writes one JSON line per prompt with the full generated sequence.
fs::path steer(const Context& ctx, const SteerRequest& request);
eval::EvalReport evaluate(const Context& ctx, const SteerRequest& request);
baselines::ResidualDirection build_baseline(const Context& ctx, baselines::Method method);

enum class AblateVariant { no_train, no_lm_loss, lambda_sweep, plain_reinsert };
AblateVariant parse_variant(const std::string& name);
std::vector<eval::EvalReport> ablate(const Context& ctx, AblateVariant variant);
std::vector<eval::EvalReport> compare(const Context& ctx);

// Loaded, hash-checked artifacts for in-process use.
struct Artifacts {
    corpus::Split style_a, style_b;
    eval::JudgeOracle judge;
    lm::LmParams lm;
    sae::SaeParams sae;
};

Artifacts load_core(const Context& ctx);
std::vector<corpus::Tokens> prompts(const Context& ctx, const Artifacts& a, corpus::Style style);
ssv::SteeringVector load_vector(const Context& ctx, const Artifacts& a, const std::string& variant);

}  // namespace saessv::app
