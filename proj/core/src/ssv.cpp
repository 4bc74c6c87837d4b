#include "saessv/ssv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "saessv/error.hpp"
#include "saessv/hash.hpp"
#include "saessv/ops.hpp"

namespace saessv::ssv {

using nd::Tensor;
using nd::Var;

ClassCentroids centroids(const Tensor& codes, std::span<const int> labels) {
    if (labels.size() != codes.rows()) throw ShapeError("centroids: label count does not match row count");
    const auto d = codes.cols();
    ClassCentroids c{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    std::size_t np = 0, nn = 0;
    for (std::size_t r = 0; r < codes.rows(); ++r) {
        auto& target = labels[r] == 1 ? c.mu_pos : c.mu_neg;
        (labels[r] == 1 ? np : nn)++;
        auto row = codes.row(r);
        for (std::size_t j = 0; j < d; ++j) target[j] += row[j];
    }
    if (np == 0 || nn == 0) throw PreconditionError("centroids need both classes");
    for (auto& v : c.mu_pos) v /= static_cast<double>(np);
    for (auto& v : c.mu_neg) v /= static_cast<double>(nn);
    return c;
}

std::vector<double> SteeringVector::dense() const {
    std::vector<double> out(d_sae, 0.0);
    for (std::size_t i = 0; i < support.size(); ++i) out[support[i]] = values[i];
    return out;
}

double SteeringVector::norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
}

sae::SparseVector SteeringVector::scaled(double lambda) const {
    sae::SparseVector out{support, values};
    for (auto& v : out.values) v *= lambda;
    return out;
}

SteeringVector init_vector(const ClassCentroids& centroids, const probe::Subspace& subspace, std::size_t d_steer) {
    const auto d = centroids.mu_pos.size();
    if (centroids.mu_neg.size() != d) throw ShapeError("centroid widths differ");
    if (d_steer == 0 || d_steer > subspace.k()) throw PreconditionError("d_steer must lie in [1, |I|]");
    std::vector<double> diff(subspace.k());
    for (std::size_t j = 0; j < subspace.k(); ++j) {
        const auto t = subspace.indices[j];
        if (t >= d) throw ShapeError("subspace index outside centroid width");
        diff[j] = centroids.mu_pos[t] - centroids.mu_neg[t];
    }
    if (std::all_of(diff.begin(), diff.end(), [](double v) { return v == 0.0; })) {
        throw DegenerateError("class centroids coincide on the subspace; cannot initialize a steering vector");
    }
    // subspace indices are sorted, so lower position means lower latent index
    std::vector<std::size_t> order(diff.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::fabs(diff[a]) > std::fabs(diff[b]); });
    order.resize(d_steer);
    std::sort(order.begin(), order.end());

    SteeringVector v;
    v.d_sae = d;
    v.i_hash = subspace.hash();
    for (auto j : order) {
        v.support.push_back(subspace.indices[j]);
        v.values.push_back(diff[j]);
    }
    const double n = v.norm();
    if (n == 0.0) throw DegenerateError("retained centroid difference is zero");
    for (auto& x : v.values) x /= n;
    return v;
}

void SsvTrainConfig::validate() const {
    if (!(lambda_dist >= 0.0 && lambda_lm >= 0.0 && lambda_reg >= 0.0)) throw PreconditionError("SSV loss coefficients must be >= 0");
    if (!(lr >= 0.0)) throw PreconditionError("SSV lr must be >= 0");
    if (batch_size == 0) throw PreconditionError("SSV batch_size must be positive");
}

void to_json(nlohmann::json& j, const SsvTrainConfig& c) {
    j = {{"lambda_dist", c.lambda_dist},   {"lambda_lm", c.lambda_lm},       {"lambda_reg", c.lambda_reg},
         {"iterations", c.iterations},     {"lr", c.lr},                     {"batch_size", c.batch_size},
         {"seed", c.seed},                 {"error_corrected", c.error_corrected},
         {"per_token_distance", c.per_token_distance}};
}

void from_json(const nlohmann::json& j, SsvTrainConfig& c) {
    SsvTrainConfig d;
    c.lambda_dist = j.value("lambda_dist", d.lambda_dist);
    c.lambda_lm = j.value("lambda_lm", d.lambda_lm);
    c.lambda_reg = j.value("lambda_reg", d.lambda_reg);
    c.iterations = j.value("iterations", d.iterations);
    c.lr = j.value("lr", d.lr);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seed = j.value("seed", d.seed);
    c.error_corrected = j.value("error_corrected", d.error_corrected);
    c.per_token_distance = j.value("per_token_distance", d.per_token_distance);
}

std::vector<SteerPair> twin_pairs(const corpus::Corpus& corpus) {
    std::map<std::int64_t, std::pair<const corpus::LabeledText*, const corpus::LabeledText*>> by_pair;
    for (const auto& t : corpus) {
        if (t.pair < 0) continue;
        auto& slot = by_pair[t.pair];
        (t.label == 1 ? slot.first : slot.second) = &t;
    }
    std::vector<SteerPair> out;
    for (const auto& [id, p] : by_pair) {
        if (p.first && p.second) out.push_back({p.first->token_ids, p.second->token_ids});
    }
    return out;
}

SteerObjective::SteerObjective(const lm::LmParams& lm, const sae::SaeParams& sae, const ClassCentroids& centroids,
                               std::vector<SteerPair> pairs, std::vector<std::size_t> support, const SsvTrainConfig& config)
    : lm_(lm), sae_(sae), centroids_(centroids), pairs_(std::move(pairs)), support_(std::move(support)), config_(config) {
    config_.validate();
    if (pairs_.empty()) throw PreconditionError("SSV optimization needs at least one training pair");
    if (support_.empty()) throw PreconditionError("steering vector support is empty");
    if (sae_.m() != lm_.config.d_model) throw ShapeError("SAE width does not match the LM residual width");
    if (centroids_.mu_pos.size() != sae_.d_sae()) throw ShapeError("centroid width does not match the SAE");
    const auto m = sae_.m();
    decoder_rows_ = Tensor({support_.size(), m});
    for (std::size_t i = 0; i < support_.size(); ++i) {
        if (support_[i] >= sae_.d_sae()) throw ShapeError("support index outside the SAE width");
        auto src = sae_.w_dec.row(support_[i]);
        std::copy(src.begin(), src.end(), decoder_rows_.row(i).begin());
    }
    lm::ResidualHook read{lm_.config.hook_layer, lm::HookMode::read, {}};
    for (const auto& p : pairs_) {
        const auto n = std::min(p.positive.size(), p.negative.size());
        if (n < 2) throw PreconditionError("training pair too short for teacher forcing");
        Prepared prep;
        const auto fwd = lm::forward_with_hook(lm_, p.negative, &read);
        const auto& h = fwd.captured;
        // pooled code over the full x⁻, per the activation convention
        std::vector<double> pooled(m, 0.0);
        for (std::size_t t = 0; t < h.rows(); ++t) {
            for (std::size_t i = 0; i < m; ++i) pooled[i] += h.at(t, i);
        }
        for (auto& v : pooled) v /= static_cast<double>(h.rows());
        prep.pooled_code = sae::encode(sae_, pooled).z;

        const auto rows = n - 1;
        Tensor hr({rows, m});
        for (std::size_t t = 0; t < rows; ++t) std::copy(h.row(t).begin(), h.row(t).end(), hr.row(t).begin());
        prep.codes = sae::encode_rows(sae_, hr);
        // plain mode starts from the reconstruction instead of h
        prep.base_rows = config_.error_corrected ? hr : sae::decode_rows(sae_, prep.codes);
        if (!config_.per_token_distance) prep.codes = Tensor();
        prep.targets.assign(p.positive.begin() + 1, p.positive.begin() + static_cast<std::ptrdiff_t>(n));
        prepared_.push_back(std::move(prep));
    }
}

namespace {

// ‖a + v − μ‖² split into a constant part off the support and a graph part on it.
struct DistanceTerm {
    double constant = 0.0;
    Tensor on_support;  // 1 × d_steer of (a − μ) restricted to the support
};

DistanceTerm distance_term(std::span<const double> a, std::span<const double> mu, std::span<const std::size_t> support) {
    DistanceTerm out;
    out.on_support = Tensor({1, support.size()});
    std::vector<char> on(a.size(), 0);
    for (std::size_t i = 0; i < support.size(); ++i) {
        on[support[i]] = 1;
        out.on_support[i] = a[support[i]] - mu[support[i]];
    }
    for (std::size_t j = 0; j < a.size(); ++j) {
        if (!on[j]) out.constant += (a[j] - mu[j]) * (a[j] - mu[j]);
    }
    return out;
}

}  // namespace

LossBreakdown SteerObjective::evaluate(std::span<const double> values, std::span<const std::size_t> batch,
                                       std::vector<double>* grad) const {
    if (values.size() != support_.size()) throw ShapeError("value count does not match the support");
    if (batch.empty()) throw PreconditionError("empty SSV batch");
    nd::Graph g;
    Tensor vt({1, values.size()}, std::vector<double>(values.begin(), values.end()));
    Var v = grad ? g.param(vt) : g.constant(vt);
    Var shift = nd::matmul(v, g.constant(decoder_rows_));  // 1 × m, equals W_decᵀv
    const auto vars = lm::bind(g, lm_, false);
    const auto& cfg = lm_.config;

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    Var dist_pos, dist_neg, lm_loss;
    double const_pos = 0.0, const_neg = 0.0;
    bool first = true;
    auto accumulate = [&](Var& acc, Var term) { acc = first ? term : nd::add(acc, term); };
    for (auto idx : batch) {
        if (idx >= prepared_.size()) throw ShapeError("SSV batch index out of range");
        const auto& prep = prepared_[idx];
        Var dp, dn;
        if (config_.per_token_distance) {
            const auto rows = prep.codes.rows();
            Var sp, sn;
            for (std::size_t t = 0; t < rows; ++t) {
                auto tp = distance_term(prep.codes.row(t), centroids_.mu_pos, support_);
                auto tn = distance_term(prep.codes.row(t), centroids_.mu_neg, support_);
                const_pos += tp.constant * inv_b / static_cast<double>(rows);
                const_neg += tn.constant * inv_b / static_cast<double>(rows);
                Var a = nd::sum(nd::square(nd::add(g.constant(tp.on_support), v)));
                Var b = nd::sum(nd::square(nd::add(g.constant(tn.on_support), v)));
                sp = t == 0 ? a : nd::add(sp, a);
                sn = t == 0 ? b : nd::add(sn, b);
            }
            dp = nd::scale(sp, 1.0 / static_cast<double>(rows));
            dn = nd::scale(sn, 1.0 / static_cast<double>(rows));
        } else {
            auto tp = distance_term(prep.pooled_code, centroids_.mu_pos, support_);
            auto tn = distance_term(prep.pooled_code, centroids_.mu_neg, support_);
            const_pos += tp.constant * inv_b;
            const_neg += tn.constant * inv_b;
            dp = nd::sum(nd::square(nd::add(g.constant(tp.on_support), v)));
            dn = nd::sum(nd::square(nd::add(g.constant(tn.on_support), v)));
        }

        Var x = nd::add(g.constant(prep.base_rows), shift);
        for (std::size_t layer = cfg.hook_layer + 1; layer < cfg.n_layers; ++layer) x = lm::block_forward(vars, cfg, layer, x);
        // summed over the sequence, like the distance terms
        Var ce = nd::scale(nd::cross_entropy(lm::lm_head(vars, x), prep.targets), static_cast<double>(prep.targets.size()));

        accumulate(dist_pos, dp);
        accumulate(dist_neg, dn);
        accumulate(lm_loss, ce);
        first = false;
    }
    dist_pos = nd::scale(dist_pos, inv_b);
    dist_neg = nd::scale(dist_neg, inv_b);
    lm_loss = nd::scale(lm_loss, inv_b);
    Var l1 = nd::sum(nd::abs(v));
    Var total = nd::add(nd::add(nd::scale(nd::sub(dist_pos, dist_neg), config_.lambda_dist), nd::scale(lm_loss, config_.lambda_lm)),
                        nd::scale(l1, config_.lambda_reg));

    LossBreakdown out;
    out.dist_pos = dist_pos.value().item() + const_pos;
    out.dist_neg = dist_neg.value().item() + const_neg;
    out.lm = lm_loss.value().item();
    out.l1 = l1.value().item();
    out.total = config_.lambda_dist * (out.dist_pos - out.dist_neg) + config_.lambda_lm * out.lm + config_.lambda_reg * out.l1;
    if (!std::isfinite(out.total)) throw NonFiniteError("steering loss is not finite");
    if (grad) {
        g.backward(total);
        const auto& gv = g.grad(v);
        grad->assign(gv.data().begin(), gv.data().end());
    }
    return out;
}

OptimizeResult optimize(const SteeringVector& init, const std::vector<SteerPair>& pairs, const lm::LmParams& lm,
                        const sae::SaeParams& sae, const ClassCentroids& centroids, const SsvTrainConfig& config) {
    SteerObjective objective(lm, sae, centroids, pairs, init.support, config);
    const auto n = objective.num_pairs();
    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto b = std::min(config.batch_size, n);
    const std::vector<std::size_t> monitor(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(b));

    OptimizeResult result{init, {}};
    result.vector.lm_hash = lm.hash();
    result.vector.sae_hash = sae.hash();
    auto& values = result.vector.values;
    std::vector<double> grad;
    std::size_t cursor = n;  // forces a reshuffle on the first draw
    for (std::size_t it = 0; it < config.iterations; ++it) {
        std::vector<std::size_t> batch;
        while (batch.size() < b) {
            if (cursor == n) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        try {
            if (batch == monitor) {
                result.history.push_back(objective.evaluate(values, batch, &grad));
            } else {
                result.history.push_back(objective.evaluate(values, monitor));
                objective.evaluate(values, batch, &grad);
            }
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("SSV optimization diverged at iteration " + std::to_string(it) + ": " + e.what());
        }
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= config.lr * grad[i];
    }
    result.history.push_back(objective.evaluate(values, monitor));
    return result;
}

void write_history_csv(const std::vector<LossBreakdown>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path);
    out << std::setprecision(17) << "iteration,dist_pos,dist_neg,lm,l1,total\n";
    for (std::size_t i = 0; i < history.size(); ++i) {
        const auto& h = history[i];
        out << i << ',' << h.dist_pos << ',' << h.dist_neg << ',' << h.lm << ',' << h.l1 << ',' << h.total << '\n';
    }
}

void SteerConfig::validate() const {
    if (!(lambda_scale >= 0.0 && lambda_scale <= 10.0)) throw PreconditionError("lambda_scale must lie in [0, 10]");
}

void check_lineage(const SteeringVector& v, const lm::LmParams& lm, const sae::SaeParams& sae) {
    if (!v.lm_hash.empty() && v.lm_hash != lm.hash()) throw ArtifactError("steering vector was learned against a different LM");
    if (!v.sae_hash.empty() && v.sae_hash != sae.hash()) throw ArtifactError("steering vector was learned against a different SAE");
    if (v.d_sae != sae.d_sae()) throw ShapeError("steering vector width does not match the SAE");
}

Tokens steer_generate(const lm::LmParams& lm, const sae::SaeParams& sae, const SteeringVector& v, std::span<const TokenId> prompt,
                      const SteerConfig& steer, const lm::GenerateOptions& gen) {
    steer.validate();
    check_lineage(v, lm, sae);
    const auto delta = v.scaled(steer.lambda_scale);
    lm::ResidualHook hook{lm.config.hook_layer, lm::HookMode::replace, [&](std::size_t, std::span<double> row) {
                              const auto out = sae::reinsert(sae, row, delta, steer.error_corrected);
                              std::copy(out.begin(), out.end(), row.begin());
                          }};
    auto options = gen;
    options.steer_prompt = steer.steer_prompt;
    return lm::generate(lm, prompt, options, &hook);
}

TraceDirections trace_directions(const SteeringVector& v, std::uint64_t seed) {
    if (v.d_steer() < 2) throw PreconditionError("orthogonal direction needs d_steer >= 2");
    const double n = v.norm();
    if (n == 0.0) throw DegenerateError("steering vector is zero");
    TraceDirections d;
    d.ssv = v.dense();
    for (auto& x : d.ssv) x /= n;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> r(v.d_steer());
    for (auto& x : r) x = normal(rng);
    double dot = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) dot += r[i] * v.values[i] / n;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= dot * v.values[i] / n;
    double rn = 0.0;
    for (double x : r) rn += x * x;
    rn = std::sqrt(rn);
    d.orthogonal.assign(v.d_sae, 0.0);
    for (std::size_t i = 0; i < r.size(); ++i) d.orthogonal[v.support[i]] = r[i] / rn;

    d.random.resize(v.d_sae);
    double qn = 0.0;
    for (auto& x : d.random) {
        x = normal(rng);
        qn += x * x;
    }
    qn = std::sqrt(qn);
    for (auto& x : d.random) x /= qn;
    return d;
}

std::vector<double> projection_trace(const lm::LmParams& lm, const sae::SaeParams& sae, const SteeringVector& v,
                                     const TraceDirections& dirs, TraceDirection which, std::span<const TokenId> prompt,
                                     const SteerConfig& steer, std::size_t max_new) {
    steer.validate();
    check_lineage(v, lm, sae);
    if (prompt.empty()) throw PreconditionError("prompt must be non-empty");
    if (prompt.size() + max_new > lm.config.context_len) throw PreconditionError("context overflow");
    const std::vector<double>* dir = nullptr;
    switch (which) {
        case TraceDirection::ssv: dir = &dirs.ssv; break;
        case TraceDirection::orthogonal: dir = &dirs.orthogonal; break;
        case TraceDirection::random: dir = &dirs.random; break;
        case TraceDirection::none: break;
    }
    sae::SparseVector delta;
    if (dir) {
        const double magnitude = steer.lambda_scale * v.norm();
        for (std::size_t j = 0; j < dir->size(); ++j) {
            if ((*dir)[j] != 0.0) {
                delta.indices.push_back(j);
                delta.values.push_back(magnitude * (*dir)[j]);
            }
        }
    }
    std::vector<double> trace;
    bool record = false;
    lm::ResidualHook hook{lm.config.hook_layer, lm::HookMode::replace, [&](std::size_t, std::span<double> row) {
                              auto z = sae::encode(sae, row).z;
                              for (std::size_t k = 0; k < delta.indices.size(); ++k) z[delta.indices[k]] += delta.values[k];
                              if (record) {
                                  double p = 0.0;
                                  for (std::size_t j = 0; j < z.size(); ++j) p += z[j] * dirs.ssv[j];
                                  trace.push_back(p);
                              }
                              if (dir) {
                                  const auto out = sae::reinsert(sae, row, delta, steer.error_corrected);
                                  std::copy(out.begin(), out.end(), row.begin());
                              }
                          }};
    lm::Session session(lm, &hook);
    Tensor logits = session.feed(prompt, steer.steer_prompt);
    record = true;
    for (std::size_t step = 0; step < max_new; ++step) {
        auto last = logits.row(logits.rows() - 1);
        const auto next = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
        const TokenId fed[1] = {next};
        logits = session.feed(fed, true);
    }
    return trace;
}

nlohmann::json to_json(const SteeringVector& v) {
    return {{"support", v.support}, {"values", v.values}, {"d_steer", v.d_steer()}, {"d_sae", v.d_sae},
            {"I_hash", v.i_hash},   {"lm_hash", v.lm_hash}, {"sae_hash", v.sae_hash}};
}

SteeringVector vector_from_json(const nlohmann::json& j) {
    try {
        SteeringVector v;
        v.support = j.at("support").get<std::vector<std::size_t>>();
        v.values = j.at("values").get<std::vector<double>>();
        v.d_sae = j.at("d_sae").get<std::size_t>();
        v.i_hash = j.value("I_hash", "");
        v.lm_hash = j.value("lm_hash", "");
        v.sae_hash = j.value("sae_hash", "");
        if (v.support.size() != v.values.size() || j.at("d_steer").get<std::size_t>() != v.support.size()) {
            throw ArtifactError("steering vector support and values disagree");
        }
        if (!std::is_sorted(v.support.begin(), v.support.end())) throw ArtifactError("steering vector support is not sorted");
        for (auto s : v.support) {
            if (s >= v.d_sae) throw ArtifactError("steering vector support index outside d_sae");
        }
        return v;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("malformed steering vector: ") + e.what());
    }
}

}  // namespace saessv::ssv
