#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/corpus.hpp"
#include "saessv/probe.hpp"
#include "saessv/sae.hpp"
#include "saessv/tensor.hpp"
#include "saessv/toylm.hpp"

namespace saessv::ssv {

using corpus::TokenId;
using corpus::Tokens;

struct ClassCentroids {
    std::vector<double> mu_pos;
    std::vector<double> mu_neg;
};

// Class means of N×d_sae training codes.
ClassCentroids centroids(const nd::Tensor& codes, std::span<const int> labels);

struct SteeringVector {
    std::vector<std::size_t> support;  // sorted
    std::vector<double> values;        // aligned with support
    std::size_t d_sae = 0;
    std::string i_hash, lm_hash, sae_hash;

    std::size_t d_steer() const noexcept { return support.size(); }
    std::vector<double> dense() const;
    double norm() const;
    sae::SparseVector scaled(double lambda) const;
};

SteeringVector init_vector(const ClassCentroids& centroids, const probe::Subspace& subspace, std::size_t d_steer);

struct SsvTrainConfig {
    double lambda_dist = 1.0;
    double lambda_lm = 0.5;
    double lambda_reg = 0.01;
    std::size_t iterations = 100;
    double lr = 0.05;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    bool error_corrected = true;
    // Distance terms on per-position codes instead of the pooled code.
    bool per_token_distance = false;

    void validate() const;
};

void to_json(nlohmann::json& j, const SsvTrainConfig& c);
void from_json(const nlohmann::json& j, SsvTrainConfig& c);

struct LossBreakdown {
    double dist_pos = 0.0;
    double dist_neg = 0.0;
    double lm = 0.0;
    double l1 = 0.0;
    double total = 0.0;
};

struct SteerPair {
    Tokens positive;
    Tokens negative;
};

// Pairs each negative text with its twin (same "pair" id) of the opposite label.
std::vector<SteerPair> twin_pairs(const corpus::Corpus& corpus);

// L_steer over a fixed set of pairs with frozen LM and SAE. Residual rows of
// every x⁻ at the hook layer are computed once; each evaluation only runs
// the blocks above the hook and the head.
class SteerObjective {
public:
    SteerObjective(const lm::LmParams& lm, const sae::SaeParams& sae, const ClassCentroids& centroids,
                   std::vector<SteerPair> pairs, std::vector<std::size_t> support, const SsvTrainConfig& config);

    std::size_t num_pairs() const noexcept { return pairs_.size(); }

    // Mean over the selected pairs; fills `grad` (one entry per support index) when non-null.
    LossBreakdown evaluate(std::span<const double> values, std::span<const std::size_t> batch,
                           std::vector<double>* grad = nullptr) const;

private:
    struct Prepared {
        nd::Tensor base_rows;     // T × m rows that the steering shift is added to
        nd::Tensor codes;         // T × d_sae per-position codes (per-token distance only)
        std::vector<double> pooled_code;
        Tokens targets;           // x⁺ tokens 1..T
    };

    const lm::LmParams& lm_;
    const sae::SaeParams& sae_;
    ClassCentroids centroids_;
    std::vector<SteerPair> pairs_;
    std::vector<std::size_t> support_;
    SsvTrainConfig config_;
    nd::Tensor decoder_rows_;  // d_steer × m
    std::vector<Prepared> prepared_;
};

struct OptimizeResult {
    SteeringVector vector;
    std::vector<LossBreakdown> history;  // monitor-batch loss before each step, plus the final value
};

// Plain gradient descent on the support values. Gradient batches are drawn
// per iteration; the history is measured on a fixed monitor batch.
OptimizeResult optimize(const SteeringVector& init, const std::vector<SteerPair>& pairs, const lm::LmParams& lm,
                        const sae::SaeParams& sae, const ClassCentroids& centroids, const SsvTrainConfig& config);

void write_history_csv(const std::vector<LossBreakdown>& history, const std::string& path);

struct SteerConfig {
    double lambda_scale = 4.0;
    bool error_corrected = true;
    bool steer_prompt = false;

    void validate() const;
};

// Throws ArtifactError when the vector was derived from different artifacts.
void check_lineage(const SteeringVector& v, const lm::LmParams& lm, const sae::SaeParams& sae);

Tokens steer_generate(const lm::LmParams& lm, const sae::SaeParams& sae, const SteeringVector& v, std::span<const TokenId> prompt,
                      const SteerConfig& steer, const lm::GenerateOptions& gen);

enum class TraceDirection { none, ssv, orthogonal, random };

struct TraceDirections {
    std::vector<double> ssv;         // v / ‖v‖
    std::vector<double> orthogonal;  // on the support, orthogonal to v
    std::vector<double> random;      // over all latents
};

TraceDirections trace_directions(const SteeringVector& v, std::uint64_t seed);

// Greedy generation steered along `which` with magnitude λ·‖v‖; records the
// projection of the injected code z′_t = f_enc(h_t) + λ‖v‖·dir onto v̂ at every
// generated position.
std::vector<double> projection_trace(const lm::LmParams& lm, const sae::SaeParams& sae, const SteeringVector& v,
                                     const TraceDirections& dirs, TraceDirection which, std::span<const TokenId> prompt,
                                     const SteerConfig& steer, std::size_t max_new);

nlohmann::json to_json(const SteeringVector& v);
SteeringVector vector_from_json(const nlohmann::json& j);

}  // namespace saessv::ssv
