#include "saessv/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "saessv/error.hpp"
#include "saessv/hash.hpp"
#include "saessv/ops.hpp"
#include "saessv/serialize.hpp"

namespace saessv::lm {

using nd::Tensor;
using nd::Var;

void LmConfig::validate() const {
    if (vocab_size < 2 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || context_len == 0) {
        throw PreconditionError("LM dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw PreconditionError("d_model must be divisible by n_heads");
    if (hook_layer >= n_layers) throw PreconditionError("hook layer must lie in [0, n_layers)");
}

void to_json(nlohmann::json& j, const LmConfig& c) {
    j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
         {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"context_len", c.context_len},
         {"hook_layer", c.hook_layer}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, LmConfig& c) {
    LmConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.d_model = j.value("d_model", d.d_model);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.context_len = j.value("context_len", d.context_len);
    c.hook_layer = j.value("hook_layer", d.hook_layer);
    c.seed = j.value("seed", d.seed);
}

LmParams LmParams::init(const LmConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    auto normal = [&](nd::Shape shape, double stddev) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.data()) v = dist(rng);
        return t;
    };
    const auto d = config.d_model;
    const double base = 0.02;
    const double resid = base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    LmParams p;
    p.config = config;
    p.tok_emb = normal({config.vocab_size, d}, base);
    p.pos_emb = normal({config.context_len, d}, base);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        BlockParams b;
        b.ln1_g = Tensor({d}, 1.0);
        b.ln1_b = Tensor({d}, 0.0);
        b.w_qkv = normal({d, 3 * d}, base);
        b.b_qkv = Tensor({3 * d}, 0.0);
        b.w_o = normal({d, d}, resid);
        b.b_o = Tensor({d}, 0.0);
        b.ln2_g = Tensor({d}, 1.0);
        b.ln2_b = Tensor({d}, 0.0);
        b.w_fc = normal({d, config.d_ff}, base);
        b.b_fc = Tensor({config.d_ff}, 0.0);
        b.w_proj = normal({config.d_ff, d}, resid);
        b.b_proj = Tensor({d}, 0.0);
        p.blocks.push_back(std::move(b));
    }
    p.lnf_g = Tensor({d}, 1.0);
    p.lnf_b = Tensor({d}, 0.0);
    p.w_out = normal({d, config.vocab_size}, base);
    p.b_out = Tensor({config.vocab_size}, 0.0);
    return p;
}

namespace {

template <typename Params, typename F>
void visit(Params& p, F&& f) {
    f("tok_emb", p.tok_emb);
    f("pos_emb", p.pos_emb);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& b = p.blocks[l];
        const std::string pre = "block" + std::to_string(l) + ".";
        f(pre + "ln1_g", b.ln1_g);
        f(pre + "ln1_b", b.ln1_b);
        f(pre + "w_qkv", b.w_qkv);
        f(pre + "b_qkv", b.b_qkv);
        f(pre + "w_o", b.w_o);
        f(pre + "b_o", b.b_o);
        f(pre + "ln2_g", b.ln2_g);
        f(pre + "ln2_b", b.ln2_b);
        f(pre + "w_fc", b.w_fc);
        f(pre + "b_fc", b.b_fc);
        f(pre + "w_proj", b.w_proj);
        f(pre + "b_proj", b.b_proj);
    }
    f("lnf_g", p.lnf_g);
    f("lnf_b", p.lnf_b);
    f("w_out", p.w_out);
    f("b_out", p.b_out);
}

}  // namespace

void LmParams::for_each(const std::function<void(const std::string&, Tensor&)>& f) { visit(*this, f); }

void LmParams::for_each(const std::function<void(const std::string&, const Tensor&)>& f) const { visit(*this, f); }

std::size_t LmParams::num_params() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

std::string LmParams::hash() const {
    std::vector<double> all;
    all.reserve(num_params());
    for_each([&](const std::string&, const Tensor& t) { all.insert(all.end(), t.data().begin(), t.data().end()); });
    return content_hash(nlohmann::json(config).dump() + content_hash(all));
}

void save_params(const LmParams& params, const std::filesystem::path& base, const nlohmann::json& extra_meta) {
    nd::TensorBundle bundle;
    params.for_each([&](const std::string& name, const Tensor& t) { bundle.tensors.emplace_back(name, t); });
    bundle.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
    bundle.meta["config"] = params.config;
    bundle.meta["trained"] = params.trained;
    bundle.meta["lm_hash"] = params.hash();
    nd::save_bundle(bundle, base);
}

LmParams load_params(const std::filesystem::path& base, nlohmann::json* meta) {
    auto bundle = nd::load_bundle(base);
    LmParams p = LmParams::init(bundle.meta.at("config").get<LmConfig>());
    p.for_each([&](const std::string& name, Tensor& t) {
        const Tensor& src = bundle.get(name);
        if (src.shape() != t.shape()) throw ArtifactError("parameter " + name + " has shape " + nd::shape_str(src.shape()));
        t = src;
    });
    p.trained = bundle.meta.value("trained", false);
    if (bundle.meta.contains("lm_hash") && bundle.meta["lm_hash"] != p.hash()) {
        throw ArtifactError("LM parameter blob does not match its recorded hash");
    }
    if (meta) *meta = bundle.meta;
    return p;
}

// ------------------------------------------------------------ inference

namespace {

void layer_norm(const Tensor& x, const Tensor& g, const Tensor& b, Tensor& out) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    if (out.numel() != x.numel()) out = Tensor(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.data().data() + r * cols;
        double* dst = out.data().data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += src[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (src[c] - mu) * (src[c] - mu);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t c = 0; c < cols; ++c) dst[c] = (src[c] - mu) * inv * g[c] + b[c];
    }
}

void add_bias(Tensor& x, const Tensor& b) {
    const auto cols = x.cols();
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] += b[i % cols];
}

}  // namespace

Session::Session(const LmParams& params, const ResidualHook* hook) : params_(params), hook_(hook) {
    params.config.validate();
    if (hook && hook->layer >= params.config.n_layers) throw PreconditionError("hook layer out of range");
    const auto& c = params.config;
    keys_.assign(c.n_layers, Tensor({c.context_len, c.d_model}, 0.0));
    values_.assign(c.n_layers, Tensor({c.context_len, c.d_model}, 0.0));
}

Tensor Session::feed(std::span<const TokenId> ids, bool transform_rows) {
    const auto& c = params_.config;
    const auto n = ids.size();
    if (n == 0) throw PreconditionError("feed() needs at least one token");
    if (pos_ + n > c.context_len) throw PreconditionError("context overflow: " + std::to_string(pos_ + n) + " > " + std::to_string(c.context_len));
    const auto d = c.d_model;
    const auto dh = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor x({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        if (ids[i] >= c.vocab_size) throw PreconditionError("token id out of range");
        auto dst = x.row(i);
        auto te = params_.tok_emb.row(ids[i]);
        auto pe = params_.pos_emb.row(pos_ + i);
        for (std::size_t j = 0; j < d; ++j) dst[j] = te[j] + pe[j];
    }

    Tensor a, qkv, attn({n, d}), proj, hidden, out;
    std::vector<double> scores(pos_ + n);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& b = params_.blocks[l];
        layer_norm(x, b.ln1_g, b.ln1_b, a);
        nd::kernel::matmul(a, b.w_qkv, qkv);
        add_bias(qkv, b.b_qkv);
        auto& K = keys_[l];
        auto& V = values_[l];
        for (std::size_t i = 0; i < n; ++i) {
            auto row = qkv.row(i);
            std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(d), d, K.row(pos_ + i).begin());
            std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(2 * d), d, V.row(pos_ + i).begin());
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t visible = pos_ + i + 1;
            const double* q_row = qkv.row(i).data();
            double* dst = attn.row(i).data();
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const std::size_t off = h * dh;
                for (std::size_t j = 0; j < visible; ++j) {
                    const double* k_row = K.row(j).data() + off;
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += q_row[off + e] * k_row[e];
                    scores[j] = s * scale;
                }
                nd::kernel::softmax_inplace(std::span<double>(scores.data(), visible));
                std::fill_n(dst + off, dh, 0.0);
                for (std::size_t j = 0; j < visible; ++j) {
                    const double* v_row = V.row(j).data() + off;
                    for (std::size_t e = 0; e < dh; ++e) dst[off + e] += scores[j] * v_row[e];
                }
            }
        }
        nd::kernel::matmul(attn, b.w_o, proj);
        add_bias(proj, b.b_o);
        for (std::size_t i = 0; i < x.numel(); ++i) x[i] += proj[i];

        layer_norm(x, b.ln2_g, b.ln2_b, a);
        nd::kernel::matmul(a, b.w_fc, hidden);
        add_bias(hidden, b.b_fc);
        for (auto& v : hidden.data()) v = v > 0.0 ? v : 0.0;
        nd::kernel::matmul(hidden, b.w_proj, proj);
        add_bias(proj, b.b_proj);
        for (std::size_t i = 0; i < x.numel(); ++i) x[i] += proj[i];

        if (hook_ && hook_->layer == l) {
            for (std::size_t i = 0; i < n; ++i) {
                auto row = x.row(i);
                captured_.emplace_back(row.begin(), row.end());
                if (hook_->mode == HookMode::replace && transform_rows && hook_->transform) {
                    hook_->transform(pos_ + i, row);
                    for (double v : row) {
                        if (!std::isfinite(v)) throw NonFiniteError("residual transform produced a non-finite value");
                    }
                }
            }
        }
    }
    layer_norm(x, params_.lnf_g, params_.lnf_b, a);
    nd::kernel::matmul(a, params_.w_out, out);
    add_bias(out, params_.b_out);
    pos_ += n;
    return out;
}

ForwardResult forward_with_hook(const LmParams& params, std::span<const TokenId> ids, const ResidualHook* hook) {
    ResidualHook reader;
    if (!hook) {
        reader.layer = params.config.hook_layer;
        hook = &reader;
    }
    Session session(params, hook);
    ForwardResult result;
    result.logits = session.feed(ids, true);
    const auto& rows = session.captured();
    result.captured = Tensor({rows.size(), params.config.d_model});
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), result.captured.row(i).begin());
    return result;
}

namespace {

TokenId pick_token(std::span<const double> logits, double temperature, std::mt19937_64& rng) {
    if (temperature <= 0.0) {
        return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    std::vector<double> probs(logits.begin(), logits.end());
    for (auto& p : probs) p /= temperature;
    nd::kernel::softmax_inplace(probs);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double u = unit(rng);
    for (std::size_t i = 0; i < probs.size(); ++i) {
        u -= probs[i];
        if (u <= 0.0) return i;
    }
    return probs.size() - 1;
}

}  // namespace

Tokens generate(const LmParams& params, std::span<const TokenId> prompt, const GenerateOptions& options,
                const ResidualHook* hook) {
    if (prompt.empty()) throw PreconditionError("prompt must be non-empty");
    if (options.temperature < 0.0) throw DomainError("temperature must be >= 0");
    if (prompt.size() + options.max_new > params.config.context_len) {
        throw PreconditionError("context overflow: prompt + max_new exceeds context_len");
    }
    Tokens out(prompt.begin(), prompt.end());
    if (options.max_new == 0) return out;
    std::mt19937_64 rng(options.seed);
    Session session(params, hook);
    Tensor logits = session.feed(prompt, options.steer_prompt);
    for (std::size_t step = 0; step < options.max_new; ++step) {
        const TokenId next = pick_token(logits.row(logits.rows() - 1), options.temperature, rng);
        out.push_back(next);
        if (step + 1 == options.max_new) break;
        const TokenId fed[1] = {next};
        logits = session.feed(fed, true);
    }
    return out;
}

// --------------------------------------------------------------- graph

std::vector<Var> LmVars::all() const {
    std::vector<Var> v{tok_emb, pos_emb};
    for (const auto& b : blocks) {
        v.insert(v.end(), {b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln2_g, b.ln2_b, b.w_fc, b.b_fc, b.w_proj, b.b_proj});
    }
    v.insert(v.end(), {lnf_g, lnf_b, w_out, b_out});
    return v;
}

LmVars bind(nd::Graph& graph, const LmParams& params, bool trainable) {
    auto leaf = [&](const Tensor& t) { return trainable ? graph.param(t) : graph.constant(t); };
    LmVars v;
    v.tok_emb = leaf(params.tok_emb);
    v.pos_emb = leaf(params.pos_emb);
    for (const auto& b : params.blocks) {
        v.blocks.push_back({leaf(b.ln1_g), leaf(b.ln1_b), leaf(b.w_qkv), leaf(b.b_qkv), leaf(b.w_o), leaf(b.b_o),
                            leaf(b.ln2_g), leaf(b.ln2_b), leaf(b.w_fc), leaf(b.b_fc), leaf(b.w_proj), leaf(b.b_proj)});
    }
    v.lnf_g = leaf(params.lnf_g);
    v.lnf_b = leaf(params.lnf_b);
    v.w_out = leaf(params.w_out);
    v.b_out = leaf(params.b_out);
    return v;
}

Var embed(const LmVars& vars, std::span<const TokenId> ids) {
    std::vector<std::size_t> positions(ids.size());
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    return nd::add(nd::gather_rows(vars.tok_emb, ids), nd::gather_rows(vars.pos_emb, positions));
}

Var block_forward(const LmVars& vars, const LmConfig& config, std::size_t layer, Var x) {
    const auto& b = vars.blocks.at(layer);
    const auto d = config.d_model;
    const auto dh = config.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Var a = nd::layer_norm_rows(x, b.ln1_g, b.ln1_b);
    Var qkv = nd::add(nd::matmul(a, b.w_qkv), b.b_qkv);
    std::vector<Var> heads;
    for (std::size_t h = 0; h < config.n_heads; ++h) {
        Var q = nd::slice_cols(qkv, h * dh, dh);
        Var k = nd::slice_cols(qkv, d + h * dh, dh);
        Var v = nd::slice_cols(qkv, 2 * d + h * dh, dh);
        Var p = nd::causal_softmax_rows(nd::scale(nd::matmul(q, nd::transpose(k)), scale));
        heads.push_back(nd::matmul(p, v));
    }
    x = nd::add(x, nd::add(nd::matmul(nd::concat_cols(heads), b.w_o), b.b_o));
    Var m = nd::layer_norm_rows(x, b.ln2_g, b.ln2_b);
    m = nd::relu(nd::add(nd::matmul(m, b.w_fc), b.b_fc));
    return nd::add(x, nd::add(nd::matmul(m, b.w_proj), b.b_proj));
}

Var lm_head(const LmVars& vars, Var x) {
    return nd::add(nd::matmul(nd::layer_norm_rows(x, vars.lnf_g, vars.lnf_b), vars.w_out), vars.b_out);
}

Var forward_graph(const LmVars& vars, const LmConfig& config, std::span<const TokenId> ids) {
    if (ids.size() > config.context_len) throw PreconditionError("sequence longer than context_len");
    Var x = embed(vars, ids);
    for (std::size_t l = 0; l < config.n_layers; ++l) x = block_forward(vars, config, l, x);
    return lm_head(vars, x);
}

Var sequence_loss(const LmVars& vars, const LmConfig& config, std::span<const TokenId> ids) {
    if (ids.size() < 2) throw PreconditionError("sequence_loss needs at least two tokens");
    Var logits = forward_graph(vars, config, ids.first(ids.size() - 1));
    return nd::cross_entropy(logits, ids.subspan(1));
}

LmParams train_lm(const corpus::Corpus& corpus, const LmConfig& config, const TrainOptions& options,
                  const std::function<void(const TrainProgress&)>& progress) {
    if (corpus.empty()) throw PreconditionError("training corpus is empty");
    for (const auto& text : corpus) {
        if (text.token_ids.size() > config.context_len) throw PreconditionError("text longer than context_len");
    }
    LmParams params = LmParams::init(config);
    params.trained = true;
    if (options.epochs == 0) return params;
    if (options.batch_size == 0) throw PreconditionError("batch_size must be positive");

    std::vector<Tensor*> slots;
    params.for_each([&](const std::string&, Tensor& t) { slots.push_back(&t); });
    std::vector<Tensor> m1, m2;
    for (auto* t : slots) {
        m1.emplace_back(t->shape(), 0.0);
        m2.emplace_back(t->shape(), 0.0);
    }
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.99;
    constexpr double eps = 1e-8;

    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(options.seed);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const auto end = std::min(order.size(), start + options.batch_size);
            std::size_t tokens = 0;
            for (auto i = start; i < end; ++i) tokens += corpus[order[i]].token_ids.size() - 1;
            nd::Graph graph;
            LmVars vars = bind(graph, params, true);
            std::vector<Var> losses;
            double batch_loss = 0.0;
            try {
                for (auto i = start; i < end; ++i) {
                    const auto& ids = corpus[order[i]].token_ids;
                    const double w = static_cast<double>(ids.size() - 1) / static_cast<double>(tokens);
                    losses.push_back(nd::scale(sequence_loss(vars, config, ids), w));
                }
                Var total = losses.front();
                for (std::size_t k = 1; k < losses.size(); ++k) total = nd::add(total, losses[k]);
                batch_loss = total.value().item();
                graph.backward(total);
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("LM training diverged at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(step) + ": " + e.what());
            }
            const auto vars_all = vars.all();
            double norm_sq = 0.0;
            for (auto v : vars_all) {
                for (double g : graph.grad(v).data()) norm_sq += g * g;
            }
            const double clip = options.clip_norm > 0.0 && std::sqrt(norm_sq) > options.clip_norm
                                    ? options.clip_norm / std::sqrt(norm_sq)
                                    : 1.0;
            ++step;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            for (std::size_t k = 0; k < slots.size(); ++k) {
                const auto& g = graph.grad(vars_all[k]);
                auto& p = *slots[k];
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    const double gi = g[i] * clip;
                    m1[k][i] = beta1 * m1[k][i] + (1.0 - beta1) * gi;
                    m2[k][i] = beta2 * m2[k][i] + (1.0 - beta2) * gi * gi;
                    p[i] -= options.lr * (m1[k][i] / bc1) / (std::sqrt(m2[k][i] / bc2) + eps);
                }
            }
            if (!std::isfinite(batch_loss)) throw NonFiniteError("LM training loss is non-finite");
            if (progress) progress({epoch, step, batch_loss});
        }
    }
    return params;
}

double cross_entropy(const LmParams& params, const corpus::Corpus& corpus) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& text : corpus) {
        const auto& ids = text.token_ids;
        if (ids.size() < 2) continue;
        Session session(params);
        Tensor logits = session.feed(std::span<const TokenId>(ids).first(ids.size() - 1), false);
        for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
            auto row = logits.row(t);
            const double mx = *std::max_element(row.begin(), row.end());
            double s = 0.0;
            for (double v : row) s += std::exp(v - mx);
            total += std::log(s) + mx - row[ids[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw PreconditionError("no next-token targets in corpus");
    return total / static_cast<double>(count);
}

double unigram_cross_entropy(const corpus::Corpus& train, const corpus::Corpus& eval, std::size_t vocab_size) {
    std::vector<double> counts(vocab_size, 1.0);
    double total = static_cast<double>(vocab_size);
    for (const auto& text : train) {
        for (std::size_t t = 1; t < text.token_ids.size(); ++t) {
            counts[text.token_ids[t]] += 1.0;
            total += 1.0;
        }
    }
    double ce = 0.0;
    std::size_t n = 0;
    for (const auto& text : eval) {
        for (std::size_t t = 1; t < text.token_ids.size(); ++t) {
            ce -= std::log(counts[text.token_ids[t]] / total);
            ++n;
        }
    }
    if (n == 0) throw PreconditionError("no targets in evaluation corpus");
    return ce / static_cast<double>(n);
}

// ---------------------------------------------------------- activations

ActivationBatch dump_activations(const LmParams& params, const corpus::Corpus& corpus, std::size_t layer) {
    if (!params.trained) throw PreconditionError("dump_activations requires trained LM parameters");
    if (layer >= params.config.n_layers) throw PreconditionError("layer out of range");
    if (corpus.empty()) throw PreconditionError("corpus is empty");
    const auto d = params.config.d_model;
    ActivationBatch batch;
    batch.layer = layer;
    batch.lm_hash = params.hash();
    batch.rows = Tensor({corpus.size(), d}, 0.0);
    ResidualHook hook{layer, HookMode::read, {}};
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& ids = corpus[i].token_ids;
        auto result = forward_with_hook(params, ids, &hook);
        auto dst = batch.rows.row(i);
        for (std::size_t t = 0; t < ids.size(); ++t) {
            if (ids[t] == corpus::kPad) continue;
            auto src = result.captured.row(t);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        const auto n = static_cast<double>(std::count_if(ids.begin(), ids.end(), [](TokenId t) { return t != corpus::kPad; }));
        for (auto& v : dst) v /= n;
        batch.labels.push_back(corpus[i].label);
        batch.pairs.push_back(corpus[i].pair);
    }
    return batch;
}

void save_activations(const ActivationBatch& batch, const std::filesystem::path& base) {
    nd::write_f64(nd::with_suffix(base, ".bin"), batch.rows.data());
    nlohmann::json meta = {{"n", batch.size()},          {"dim", batch.dim()},   {"layer", batch.layer},
                           {"labels", batch.labels},     {"pairs", batch.pairs}, {"lm_hash", batch.lm_hash}};
    std::ofstream out(nd::with_suffix(base, ".json"), std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + base.string() + ".json");
    out << meta.dump(2) << '\n';
}

ActivationBatch load_activations(const std::filesystem::path& base) {
    std::ifstream in(nd::with_suffix(base, ".json"));
    if (!in) throw ArtifactError("cannot read " + base.string() + ".json");
    const auto meta = nlohmann::json::parse(in);
    ActivationBatch batch;
    const auto n = meta.at("n").get<std::size_t>();
    const auto dim = meta.at("dim").get<std::size_t>();
    batch.rows = Tensor({n, dim}, nd::read_f64(nd::with_suffix(base, ".bin")));
    batch.labels = meta.at("labels").get<std::vector<int>>();
    batch.pairs = meta.value("pairs", std::vector<std::int64_t>(n, -1));
    batch.layer = meta.at("layer").get<std::size_t>();
    batch.lm_hash = meta.at("lm_hash").get<std::string>();
    if (batch.labels.size() != n) throw ArtifactError("activation sidecar label count does not match n");
    return batch;
}

}  // namespace saessv::lm
