#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/baselines.hpp"
#include "saessv/corpus.hpp"
#include "saessv/sae.hpp"
#include "saessv/ssv.hpp"
#include "saessv/tensor.hpp"
#include "saessv/toylm.hpp"

namespace saessv::eval {

using corpus::TokenId;
using corpus::Tokens;

inline constexpr double kMtldThreshold = 0.72;
inline constexpr double kRepetitionLimit = 0.5;
inline constexpr double kEntropyFloor = 1.0;
inline constexpr double kJudgeMinAccuracy = 0.95;

// Bag-of-tokens logistic classifier over standardized token frequencies.
struct JudgeOracle {
    std::vector<double> weights;  // per token
    double bias = 0.0;
    std::vector<double> mean, std;
    double threshold = 0.5;
    double heldout_accuracy = 0.0;
    std::string trained_on;  // corpus hash

    std::size_t vocab_size() const noexcept { return weights.size(); }
    // Probability that `tokens` belong to label 1.
    double prob_positive(std::span<const TokenId> tokens) const;
    std::string hash() const;
};

JudgeOracle train_judge(const corpus::Corpus& train, const corpus::Corpus& heldout, std::size_t vocab_size);
// Throws PreconditionError when the held-out accuracy is below the floor.
void require_reliable(const JudgeOracle& oracle);

nlohmann::json to_json(const JudgeOracle& j);
JudgeOracle judge_from_json(const nlohmann::json& j);

enum class Category { success, retained, disorder };
std::string category_name(Category c);

struct GenerationVerdict {
    Category category = Category::retained;
    double judge_prob = 0.0;  // probability of the target class
    double repetition_ratio = 0.0;
    double entropy_bits = 0.0;
};

// Fraction of 4-grams that repeat an earlier 4-gram (0 below four tokens).
double repetition_ratio(std::span<const TokenId> tokens);
double entropy_bits(std::span<const TokenId> tokens);
// Forward/backward mean MTLD. A text whose running TTR never drops has no
// factors at all; its MTLD is its length.
double mtld(std::span<const TokenId> tokens);

GenerationVerdict judge(const JudgeOracle& oracle, std::span<const TokenId> tokens, int target_label = 1);

// How a method perturbs generation. Exactly one of vector / direction is set,
// or neither for the unsteered model.
struct Intervention {
    std::string method = "none";
    const sae::SaeParams* sae = nullptr;
    const ssv::SteeringVector* vector = nullptr;
    const baselines::ResidualDirection* direction = nullptr;
    bool error_corrected = true;
    bool steer_prompt = false;

    Tokens generate(const lm::LmParams& lm, std::span<const TokenId> prompt, double lambda_scale, const lm::GenerateOptions& gen) const;
    std::string artifact_hash() const;
};

struct EvalOptions {
    std::size_t max_new = 48;
    int target_label = 1;
    std::size_t min_prompts = 50;
    std::uint64_t seed = 0;
};

struct GenerationRecord {
    Tokens prompt;
    Tokens base;     // continuation only
    Tokens steered;  // continuation only
    GenerationVerdict base_verdict;
    GenerationVerdict steered_verdict;
};

struct EvalReport {
    std::string method;
    double lambda_scale = 0.0;
    std::size_t n_prompts = 0;
    double sr_pct = 0.0, retained_pct = 0.0, disorder_pct = 0.0;
    double base_sr_pct = 0.0, base_retained_pct = 0.0, base_disorder_pct = 0.0;
    double mtld_steered = 0.0, mtld_base = 0.0, delta_mtld = 0.0;
    double entropy_steered = 0.0, entropy_base = 0.0, delta_entropy = 0.0;
    std::size_t mtld_degenerate = 0;  // steered continuations with no MTLD factor
    bool identical_to_base = false;
    std::string lm_hash, artifact_hash, judge_hash;
};

EvalReport evaluate(const lm::LmParams& lm, const Intervention& intervention, const std::vector<Tokens>& prompts,
                    double lambda_scale, const JudgeOracle& oracle, const EvalOptions& options = {},
                    std::vector<GenerationRecord>* records = nullptr);

nlohmann::json to_json(const EvalReport& r);
std::string csv_header();
std::string csv_row(const EvalReport& r);

struct HeatmapRow {
    std::size_t dim = 0;
    double mean_class0 = 0.0;
    double mean_class1 = 0.0;
    double pooled_std = 0.0;  // within-class
};

// Top-n columns by |class-mean difference|, largest first, lower index on ties.
std::vector<HeatmapRow> heatmap_export(const nd::Tensor& rows, std::span<const int> labels, std::size_t top_n);
void write_heatmap_csv(const std::vector<HeatmapRow>& rows, const std::string& path);

}  // namespace saessv::eval
