#include "saessv/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "saessv/error.hpp"
#include "saessv/hash.hpp"
#include "saessv/ops.hpp"
#include "saessv/serialize.hpp"

namespace saessv::sae {

using nd::Tensor;
using nd::Var;

std::string SaeParams::hash() const {
    std::vector<double> all;
    for (const Tensor* t : {&w_enc, &b_enc, &w_dec, &b_dec}) all.insert(all.end(), t->data().begin(), t->data().end());
    return content_hash(all);
}

void SaeTrainConfig::validate() const {
    if (!(beta > 0.0)) throw PreconditionError("SAE beta must be > 0");
    if (!(lr >= 0.0)) throw PreconditionError("SAE lr must be >= 0");
    if (batch_size == 0 || d_sae == 0) throw PreconditionError("SAE batch_size and d_sae must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw PreconditionError("holdout_fraction must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const SaeTrainConfig& c) {
    j = {{"d_sae", c.d_sae},           {"beta", c.beta}, {"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
         {"holdout_fraction", c.holdout_fraction}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SaeTrainConfig& c) {
    SaeTrainConfig d;
    c.d_sae = j.value("d_sae", d.d_sae);
    c.beta = j.value("beta", d.beta);
    c.lr = j.value("lr", d.lr);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
    c.seed = j.value("seed", d.seed);
}

SparseCode encode(const SaeParams& params, std::span<const double> h) {
    if (h.size() != params.m()) throw ShapeError("encode: expected a row of width " + std::to_string(params.m()));
    const auto n = params.d_sae();
    SparseCode code;
    code.z.assign(params.b_enc.data().begin(), params.b_enc.data().end());
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double hi = h[i];
        const double* w = params.w_enc.data().data() + i * n;
        for (std::size_t j = 0; j < n; ++j) code.z[j] += hi * w[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
        if (code.z[j] > 0.0) {
            code.active_set.push_back(j);
        } else {
            code.z[j] = 0.0;
        }
    }
    return code;
}

std::vector<double> decode(const SaeParams& params, std::span<const double> z) {
    if (z.size() != params.d_sae()) throw ShapeError("decode: expected a code of width " + std::to_string(params.d_sae()));
    const auto m = params.m();
    std::vector<double> out(params.b_dec.data().begin(), params.b_dec.data().end());
    for (std::size_t j = 0; j < z.size(); ++j) {
        if (z[j] == 0.0) continue;
        const double* w = params.w_dec.data().data() + j * m;
        for (std::size_t i = 0; i < m; ++i) out[i] += z[j] * w[i];
    }
    return out;
}

Tensor encode_rows(const SaeParams& params, const Tensor& h) {
    if (h.cols() != params.m()) throw ShapeError("encode_rows: width mismatch");
    Tensor z;
    nd::kernel::matmul(h, params.w_enc, z);
    const auto n = params.d_sae();
    for (std::size_t i = 0; i < z.numel(); ++i) {
        const double v = z[i] + params.b_enc[i % n];
        z[i] = v > 0.0 ? v : 0.0;
    }
    return z;
}

Tensor decode_rows(const SaeParams& params, const Tensor& z) {
    if (z.cols() != params.d_sae()) throw ShapeError("decode_rows: width mismatch");
    Tensor h;
    nd::kernel::matmul(z, params.w_dec, h);
    const auto m = params.m();
    for (std::size_t i = 0; i < h.numel(); ++i) h[i] += params.b_dec[i % m];
    return h;
}

std::vector<double> reinsert(const SaeParams& params, std::span<const double> h, const SparseVector& delta_z,
                             bool error_corrected) {
    if (delta_z.indices.size() != delta_z.values.size()) throw ShapeError("reinsert: malformed sparse delta");
    const auto code = encode(params, h);
    auto shifted = code.z;
    for (std::size_t k = 0; k < delta_z.indices.size(); ++k) {
        if (delta_z.indices[k] >= shifted.size()) throw ShapeError("reinsert: delta index out of range");
        shifted[delta_z.indices[k]] += delta_z.values[k];
    }
    auto steered = decode(params, shifted);
    if (!error_corrected) return steered;
    const auto recon = decode(params, code.z);
    std::vector<double> out(h.begin(), h.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += steered[i] - recon[i];
    return out;
}

double loss(const SaeParams& params, const Tensor& h, double beta) {
    const Tensor z = encode_rows(params, h);
    const Tensor rec = decode_rows(params, z);
    double sq = 0.0;
    for (std::size_t i = 0; i < h.numel(); ++i) sq += (h[i] - rec[i]) * (h[i] - rec[i]);
    double l1 = 0.0;
    for (double v : z.data()) l1 += std::fabs(v);
    const auto n = static_cast<double>(h.rows());
    return sq / n + beta * l1 / n;
}

double reconstruction_mse(const SaeParams& params, const Tensor& h) {
    const Tensor rec = decode_rows(params, encode_rows(params, h));
    double sq = 0.0;
    for (std::size_t i = 0; i < h.numel(); ++i) sq += (h[i] - rec[i]) * (h[i] - rec[i]);
    return sq / static_cast<double>(h.numel());
}

double mean_l0(const SaeParams& params, const Tensor& h) {
    const Tensor z = encode_rows(params, h);
    const auto active = std::count_if(z.data().begin(), z.data().end(), [](double v) { return v > 0.0; });
    return static_cast<double>(active) / static_cast<double>(h.rows());
}

SaeVars bind(nd::Graph& graph, const SaeParams& params, bool trainable) {
    auto leaf = [&](const Tensor& t) { return trainable ? graph.param(t) : graph.constant(t); };
    return {leaf(params.w_enc), leaf(params.b_enc), leaf(params.w_dec), leaf(params.b_dec)};
}

Var loss_graph(const SaeVars& vars, Var h, double beta) {
    Var z = nd::relu(nd::add(nd::matmul(h, vars.w_enc), vars.b_enc));
    Var rec = nd::add(nd::matmul(z, vars.w_dec), vars.b_dec);
    const double n = static_cast<double>(h.value().rows());
    Var sq = nd::scale(nd::sum(nd::square(nd::sub(h, rec))), 1.0 / n);
    Var l1 = nd::scale(nd::sum(nd::abs(z)), beta / n);
    return nd::add(sq, l1);
}

namespace {

void normalize_decoder_rows(Tensor& w_dec) {
    const auto m = w_dec.cols();
    for (std::size_t j = 0; j < w_dec.rows(); ++j) {
        auto row = w_dec.row(j);
        double norm = 0.0;
        for (double v : row) norm += v * v;
        norm = std::sqrt(norm);
        if (norm > 0.0) {
            for (auto& v : row) v /= norm;
        }
    }
    (void)m;
}

Tensor take_rows(const Tensor& data, std::span<const std::size_t> idx) {
    Tensor out({idx.size(), data.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = data.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace

SaeParams init_params(std::size_t m, std::size_t d_sae, const Tensor& data, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    SaeParams p;
    p.w_dec = Tensor({d_sae, m});
    for (auto& v : p.w_dec.data()) v = normal(rng);
    normalize_decoder_rows(p.w_dec);
    p.w_enc = Tensor({m, d_sae});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d_sae; ++j) p.w_enc.at(i, j) = p.w_dec.at(j, i);
    }
    p.b_enc = Tensor({d_sae}, 0.0);
    p.b_dec = Tensor({m}, 0.0);
    if (data.rows() > 0) {
        for (std::size_t r = 0; r < data.rows(); ++r) {
            for (std::size_t i = 0; i < m; ++i) p.b_dec[i] += data.at(r, i);
        }
        for (auto& v : p.b_dec.data()) v /= static_cast<double>(data.rows());
    }
    // encoder starts centred on the data mean
    for (std::size_t j = 0; j < d_sae; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += p.w_enc.at(i, j) * p.b_dec[i];
        p.b_enc[j] = -acc;
    }
    return p;
}

SaeParams train_sae(const Tensor& activations, const SaeTrainConfig& config, SaeTrainReport* report) {
    config.validate();
    const auto n = activations.rows();
    const auto m = activations.cols();
    if (config.d_sae <= m) throw PreconditionError("d_sae must exceed the activation width");
    if (n < config.batch_size) throw PreconditionError("need at least batch_size activation rows");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed);
    std::shuffle(order.begin(), order.end(), rng);
    auto n_hold = static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(n)));
    if (n - n_hold < config.batch_size) n_hold = n - config.batch_size;
    std::vector<std::size_t> hold_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
    const Tensor train = take_rows(activations, train_idx);
    const Tensor hold = n_hold > 0 ? take_rows(activations, hold_idx) : train;

    SaeParams params = init_params(m, config.d_sae, train, config.seed + 1);
    SaeTrainReport rep;
    rep.initial_mse = reconstruction_mse(params, hold);
    {
        double var = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            double mu = 0.0;
            for (std::size_t r = 0; r < hold.rows(); ++r) mu += hold.at(r, i);
            mu /= static_cast<double>(hold.rows());
            double s = 0.0;
            for (std::size_t r = 0; r < hold.rows(); ++r) s += (hold.at(r, i) - mu) * (hold.at(r, i) - mu);
            var += s / static_cast<double>(hold.rows());
        }
        rep.input_variance = var / static_cast<double>(m);
    }

    std::vector<std::size_t> batch_order(train.rows());
    std::iota(batch_order.begin(), batch_order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(batch_order.begin(), batch_order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start + config.batch_size <= batch_order.size(); start += config.batch_size) {
            const Tensor hb = take_rows(train, std::span<const std::size_t>(batch_order).subspan(start, config.batch_size));
            nd::Graph graph;
            auto vars = bind(graph, params, true);
            Var l;
            try {
                l = loss_graph(vars, graph.constant(hb), config.beta);
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("SAE training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            graph.backward(l);
            epoch_loss += l.value().item();
            ++batches;
            const std::pair<Tensor*, Var> slots[] = {
                {&params.w_enc, vars.w_enc}, {&params.b_enc, vars.b_enc}, {&params.w_dec, vars.w_dec}, {&params.b_dec, vars.b_dec}};
            for (const auto& [p, v] : slots) {
                const auto& g = graph.grad(v);
                for (std::size_t i = 0; i < p->numel(); ++i) (*p)[i] -= config.lr * g[i];
                if (!p->all_finite()) throw NonFiniteError("SAE training diverged at epoch " + std::to_string(epoch));
            }
            normalize_decoder_rows(params.w_dec);
        }
        rep.epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    }
    rep.final_mse = reconstruction_mse(params, hold);
    rep.final_l0 = mean_l0(params, hold);
    if (report) *report = std::move(rep);
    return params;
}

void save_params(const SaeParams& params, const std::filesystem::path& base, const nlohmann::json& meta) {
    nd::TensorBundle bundle;
    bundle.tensors = {{"w_enc", params.w_enc}, {"b_enc", params.b_enc}, {"w_dec", params.w_dec}, {"b_dec", params.b_dec}};
    bundle.meta = meta.is_object() ? meta : nlohmann::json::object();
    bundle.meta["d_sae"] = params.d_sae();
    bundle.meta["m"] = params.m();
    bundle.meta["sae_hash"] = params.hash();
    nd::save_bundle(bundle, base);
}

SaeParams load_params(const std::filesystem::path& base, nlohmann::json* meta) {
    const auto bundle = nd::load_bundle(base);
    SaeParams p{bundle.get("w_enc"), bundle.get("b_enc"), bundle.get("w_dec"), bundle.get("b_dec")};
    if (p.w_dec.rows() != p.d_sae() || p.w_dec.cols() != p.m() || p.b_enc.numel() != p.d_sae() || p.b_dec.numel() != p.m()) {
        throw ArtifactError("SAE tensors have inconsistent shapes");
    }
    if (bundle.meta.contains("sae_hash") && bundle.meta["sae_hash"] != p.hash()) {
        throw ArtifactError("SAE parameter blob does not match its recorded hash");
    }
    if (meta) *meta = bundle.meta;
    return p;
}

}  // namespace saessv::sae
