#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/tensor.hpp"

namespace saessv::probe {

// Score assigned when a dimension has zero within-class variance but
// distinct class means.
inline constexpr double kSeparatedScore = 1e12;

struct DimScores {
    std::vector<double> scores;
    std::vector<std::size_t> ranking;  // descending score, lower index first on ties
};

struct Subspace {
    std::vector<std::size_t> indices;  // sorted ascending
    std::vector<double> mean;          // aligned with indices
    std::vector<double> std;
    std::size_t k() const noexcept { return indices.size(); }
    std::string hash() const;
};

struct ProbeConfig {
    std::size_t M = 50;
    double subset_fraction = 0.7;
    double l2 = 1e-3;
    double lr = 0.5;
    std::size_t iterations = 300;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct LinearProbe {
    std::vector<double> w0, w1;  // class weight vectors, length k
    double b0 = 0.0, b1 = 0.0;
    std::uint64_t subset_seed = 0;
    double heldout_accuracy = 0.0;
};

struct ProbeEnsemble {
    std::vector<LinearProbe> probes;
    std::size_t M() const noexcept { return probes.size(); }
    double mean_accuracy() const;
};

struct ConceptDirection {
    std::vector<double> v_avg;
    std::vector<std::pair<std::size_t, double>> curve;  // (d, s_d) for d = 1..k
    std::size_t d_steer = 0;
    double cbar_pos = 0.0;
    double cbar_neg = 0.0;
};

// One-way ANOVA F per column of an N×d matrix.
DimScores f_scores(const nd::Tensor& codes, std::span<const int> labels);

Subspace select_subspace(const DimScores& scores, const nd::Tensor& codes, std::size_t k);

// Restrict codes to the subspace and standardize: N×d → N×k.
nd::Tensor standardize(const Subspace& subspace, const nd::Tensor& codes);

// Fits one 2-class softmax probe by full-batch gradient descent on
// cross-entropy plus l2·(‖w0‖² + ‖w1‖²).
LinearProbe fit_probe(const nd::Tensor& x, std::span<const int> labels, const ProbeConfig& config);
double probe_accuracy(const LinearProbe& probe, const nd::Tensor& x, std::span<const int> labels);

// x holds standardized k-dim training codes.
ProbeEnsemble train_probe_ensemble(const nd::Tensor& x, std::span<const int> labels, const ProbeConfig& config);

// v with all but the top-d entries by |value| zeroed (lower index wins ties).
std::vector<double> truncate_top(std::span<const double> v, std::size_t d);
double cosine(std::span<const double> a, std::span<const double> b);

// test_x holds standardized k-dim held-out codes. Each code is projected onto
// v^(d) and the cosine of that projection with v^(d) is averaged per class.
ConceptDirection concept_direction(const ProbeEnsemble& ensemble, const nd::Tensor& test_x, std::span<const int> test_labels);

// Mean |w1 − w0| per subspace coordinate; diagnostic ranking only.
std::vector<double> weight_gap_importance(const ProbeEnsemble& ensemble);

nlohmann::json to_artifact(const Subspace& subspace, const ProbeEnsemble& ensemble, const ConceptDirection& direction);
struct ProbeArtifact {
    Subspace subspace;
    std::size_t M = 0;
    ConceptDirection direction;
};
ProbeArtifact from_artifact(const nlohmann::json& j);

}  // namespace saessv::probe
