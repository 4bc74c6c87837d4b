#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saessv/corpus.hpp"
#include "saessv/graph.hpp"
#include "saessv/tensor.hpp"

namespace saessv::lm {

using corpus::TokenId;
using corpus::Tokens;

struct LmConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 128;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t context_len = 64;
    std::size_t hook_layer = 2;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
};

void to_json(nlohmann::json& j, const LmConfig& c);
void from_json(const nlohmann::json& j, LmConfig& c);

struct BlockParams {
    nd::Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
    nd::Tensor ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

// Pre-norm decoder-only transformer with learned positional embeddings.
struct LmParams {
    LmConfig config;
    nd::Tensor tok_emb, pos_emb;
    std::vector<BlockParams> blocks;
    nd::Tensor lnf_g, lnf_b, w_out, b_out;
    bool trained = false;

    static LmParams init(const LmConfig& config);

    // Visits every parameter tensor in a fixed order with a stable name.
    void for_each(const std::function<void(const std::string&, nd::Tensor&)>& f);
    void for_each(const std::function<void(const std::string&, const nd::Tensor&)>& f) const;
    std::size_t num_params() const;
    std::string hash() const;
};

void save_params(const LmParams& params, const std::filesystem::path& base, const nlohmann::json& extra_meta = {});
LmParams load_params(const std::filesystem::path& base, nlohmann::json* meta = nullptr);

// ---------------------------------------------------------------- hooks

enum class HookMode { read, replace };

// Rewrites one residual row in place; `position` is the absolute token index.
using RowTransform = std::function<void(std::size_t position, std::span<double> row)>;

// Reads (and in replace mode rewrites) the residual stream leaving block
// `layer`, i.e. the rows that block layer+1 consumes.
struct ResidualHook {
    std::size_t layer = 2;
    HookMode mode = HookMode::read;
    RowTransform transform;
};

struct ForwardResult {
    nd::Tensor logits;    // T × vocab
    nd::Tensor captured;  // T × d_model residual rows at the hook layer, before any transform
};

ForwardResult forward_with_hook(const LmParams& params, std::span<const TokenId> ids,
                                const ResidualHook* hook = nullptr);

// Incremental decoder with a key/value cache. Each feed() computes only the
// new positions; the hook transform is applied to those rows when
// `transform_rows` is set.
class Session {
public:
    explicit Session(const LmParams& params, const ResidualHook* hook = nullptr);

    // Returns logits for the fed positions (n × vocab).
    nd::Tensor feed(std::span<const TokenId> ids, bool transform_rows = true);

    std::size_t position() const noexcept { return pos_; }
    // Pre-transform residual rows at the hook layer, one per fed position.
    const std::vector<std::vector<double>>& captured() const noexcept { return captured_; }

private:
    const LmParams& params_;
    const ResidualHook* hook_;
    std::size_t pos_ = 0;
    std::vector<nd::Tensor> keys_, values_;
    std::vector<std::vector<double>> captured_;
};

struct GenerateOptions {
    std::size_t max_new = 32;
    double temperature = 0.0;  // 0 = greedy argmax
    std::uint64_t seed = 0;
    // Also transform the prompt positions (default: generated positions only).
    bool steer_prompt = false;
};

// Returns prompt ++ generated tokens.
Tokens generate(const LmParams& params, std::span<const TokenId> prompt, const GenerateOptions& options,
                const ResidualHook* hook = nullptr);

// ------------------------------------------------------------- training

// Parameters bound as graph leaves.
struct LmVars {
    struct Block {
        nd::Var ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };
    nd::Var tok_emb, pos_emb;
    std::vector<Block> blocks;
    nd::Var lnf_g, lnf_b, w_out, b_out;

    // Same order as LmParams::for_each.
    std::vector<nd::Var> all() const;
};

LmVars bind(nd::Graph& graph, const LmParams& params, bool trainable);
nd::Var embed(const LmVars& vars, std::span<const TokenId> ids);
nd::Var block_forward(const LmVars& vars, const LmConfig& config, std::size_t layer, nd::Var x);
nd::Var lm_head(const LmVars& vars, nd::Var x);
// Embedding, every block and the head.
nd::Var forward_graph(const LmVars& vars, const LmConfig& config, std::span<const TokenId> ids);
// Mean next-token cross-entropy of one sequence.
nd::Var sequence_loss(const LmVars& vars, const LmConfig& config, std::span<const TokenId> ids);

struct TrainOptions {
    std::size_t epochs = 4;
    double lr = 3e-3;
    std::size_t batch_size = 16;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
};

struct TrainProgress {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;
};

// Adam on token-weighted next-token cross-entropy; deterministic under
// options.seed and config.seed. Throws NonFiniteError on divergence.
LmParams train_lm(const corpus::Corpus& corpus, const LmConfig& config, const TrainOptions& options,
                  const std::function<void(const TrainProgress&)>& progress = {});

// Token-weighted mean next-token cross-entropy (nats).
double cross_entropy(const LmParams& params, const corpus::Corpus& corpus);
// Cross-entropy of `eval` under the add-one smoothed unigram distribution of `train`.
double unigram_cross_entropy(const corpus::Corpus& train, const corpus::Corpus& eval, std::size_t vocab_size);

// ---------------------------------------------------------- activations

// One pooled residual row per text at a fixed layer, with its label.
struct ActivationBatch {
    nd::Tensor rows;  // N × d_model
    std::vector<int> labels;
    std::vector<std::int64_t> pairs;
    std::size_t layer = 0;
    std::string lm_hash;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return rows.cols(); }
};

// Mean over the text's positions of the hooked layer's residual.
ActivationBatch dump_activations(const LmParams& params, const corpus::Corpus& corpus, std::size_t layer);

// Binary little-endian float64 N×m matrix in `<base>.bin`, sidecar `<base>.json`
// {"n", "dim", "layer", "labels", "lm_hash"}.
void save_activations(const ActivationBatch& batch, const std::filesystem::path& base);
ActivationBatch load_activations(const std::filesystem::path& base);

}  // namespace saessv::lm
