#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/graph.hpp"
#include "saessv/tensor.hpp"

namespace saessv::sae {

// z = relu(hᵀ·w_enc + b_enc), ĥ = zᵀ·w_dec + b_dec. Row j of w_dec is the
// dictionary direction of latent j and is kept at unit L2 norm.
struct SaeParams {
    nd::Tensor w_enc;  // m × d_sae
    nd::Tensor b_enc;  // d_sae
    nd::Tensor w_dec;  // d_sae × m
    nd::Tensor b_dec;  // m

    std::size_t m() const noexcept { return w_enc.rows(); }
    std::size_t d_sae() const noexcept { return w_enc.cols(); }
    std::string hash() const;
};

struct SaeTrainConfig {
    std::size_t d_sae = 1024;
    double beta = 0.3;
    double lr = 0.006;
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double holdout_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const SaeTrainConfig& c);
void from_json(const nlohmann::json& j, SaeTrainConfig& c);

struct SparseCode {
    std::vector<double> z;
    std::vector<std::size_t> active_set;
};

struct SparseVector {
    std::vector<std::size_t> indices;
    std::vector<double> values;
};

SparseCode encode(const SaeParams& params, std::span<const double> h);
std::vector<double> decode(const SaeParams& params, std::span<const double> z);
// Row-wise encode/decode of N×m activations / N×d_sae codes.
nd::Tensor encode_rows(const SaeParams& params, const nd::Tensor& h);
nd::Tensor decode_rows(const SaeParams& params, const nd::Tensor& z);

// Plain mode: f_dec(f_enc(h) + δ). Error-corrected mode adds back the
// reconstruction residual h − f_dec(f_enc(h)), computed as
// h + (f_dec(f_enc(h) + δ) − f_dec(f_enc(h))) so that δ = 0 returns h bitwise.
std::vector<double> reinsert(const SaeParams& params, std::span<const double> h, const SparseVector& delta_z,
                             bool error_corrected);

// Mean over rows of ‖h − ĥ‖² + β‖z‖₁.
double loss(const SaeParams& params, const nd::Tensor& h, double beta);
// Mean over rows and dimensions of (h − ĥ)².
double reconstruction_mse(const SaeParams& params, const nd::Tensor& h);
double mean_l0(const SaeParams& params, const nd::Tensor& h);

struct SaeVars {
    nd::Var w_enc, b_enc, w_dec, b_dec;
};
SaeVars bind(nd::Graph& graph, const SaeParams& params, bool trainable);
nd::Var loss_graph(const SaeVars& vars, nd::Var h, double beta);

struct SaeTrainReport {
    double initial_mse = 0.0;  // held-out, before the first step
    double final_mse = 0.0;    // held-out, after training
    double final_l0 = 0.0;     // held-out mean count of active latents
    double input_variance = 0.0;  // mean per-dimension variance of the held-out rows
    std::vector<double> epoch_loss;
};

SaeParams init_params(std::size_t m, std::size_t d_sae, const nd::Tensor& data, std::uint64_t seed);
// Plain minibatch SGD; decoder rows renormalized after every step.
SaeParams train_sae(const nd::Tensor& activations, const SaeTrainConfig& config, SaeTrainReport* report = nullptr);

void save_params(const SaeParams& params, const std::filesystem::path& base, const nlohmann::json& meta);
SaeParams load_params(const std::filesystem::path& base, nlohmann::json* meta = nullptr);

}  // namespace saessv::sae
