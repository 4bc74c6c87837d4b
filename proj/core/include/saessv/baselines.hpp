#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/corpus.hpp"
#include "saessv/tensor.hpp"
#include "saessv/toylm.hpp"

namespace saessv::baselines {

enum class Method { caa, repe, top_pc, iti_lite };

std::string method_name(Method m);
Method parse_method(const std::string& name);

struct ResidualDirection {
    Method method = Method::caa;
    std::vector<double> vec;  // unit length, positive along μ⁺ − μ⁻
    std::string lm_hash;
};

// Flips v so that ⟨v, reference⟩ ≥ 0; on an exact tie the first nonzero
// entry is made positive.
void fix_sign(std::vector<double>& v, std::span<const double> reference);

struct PowerIterationOptions {
    std::size_t max_iterations = 10000;
    double tolerance = 1e-14;
    std::uint64_t seed = 0;
};

// Leading eigenvector of a symmetric positive semidefinite matrix.
std::vector<double> top_eigenvector(const nd::Tensor& sym, const PowerIterationOptions& options = {});

ResidualDirection caa(const lm::ActivationBatch& batch);
// Leading eigenvector of the second-moment matrix of the differences h⁺ − h⁻.
ResidualDirection repe(const nd::Tensor& h_pos, const nd::Tensor& h_neg);
// Leading eigenvector of the covariance of every row, labels ignored
// except for the sign.
ResidualDirection top_pc(const lm::ActivationBatch& batch);
// Normalized (w₁ − w₀) of one L2-regularized linear probe on the rows.
ResidualDirection iti_lite(const lm::ActivationBatch& batch);

// Rows of twin pairs (positive row, negative row) matched by pair id.
std::pair<nd::Tensor, nd::Tensor> paired_rows(const lm::ActivationBatch& batch);

corpus::Tokens apply_residual(const lm::LmParams& lm, const ResidualDirection& direction, double lambda_scale,
                              std::span<const corpus::TokenId> prompt, const lm::GenerateOptions& gen);

nlohmann::json to_json(const ResidualDirection& d);
ResidualDirection direction_from_json(const nlohmann::json& j);

}  // namespace saessv::baselines
