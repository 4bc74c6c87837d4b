#include "saessv/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "saessv/error.hpp"
#include "saessv/probe.hpp"

namespace saessv::baselines {

using nd::Tensor;

std::string method_name(Method m) {
    switch (m) {
        case Method::caa: return "CAA";
        case Method::repe: return "RePe";
        case Method::top_pc: return "TopPC";
        case Method::iti_lite: return "ITI-lite";
    }
    return "?";
}

Method parse_method(const std::string& name) {
    std::string s;
    for (char c : name) {
        if (c != '-' && c != '_') s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (s == "caa") return Method::caa;
    if (s == "repe") return Method::repe;
    if (s == "toppc") return Method::top_pc;
    if (s == "itilite" || s == "iti") return Method::iti_lite;
    throw ConfigError("unknown baseline method '" + name + "'");
}

void fix_sign(std::vector<double>& v, std::span<const double> reference) {
    if (reference.size() != v.size()) throw ShapeError("fix_sign: length mismatch");
    double dot = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * reference[i];
    bool flip = dot < 0.0;
    if (dot == 0.0) {
        auto it = std::find_if(v.begin(), v.end(), [](double x) { return x != 0.0; });
        flip = it != v.end() && *it < 0.0;
    }
    if (flip) {
        for (auto& x : v) x = -x;
    }
}

namespace {

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

void normalize(std::vector<double>& v) {
    const double n = norm(v);
    for (auto& x : v) x /= n;
}

struct ClassMeans {
    std::vector<double> pos, neg;
};

ClassMeans class_means(const lm::ActivationBatch& batch) {
    const auto m = batch.dim();
    if (batch.labels.size() != batch.rows.rows()) throw ShapeError("activation labels do not match rows");
    ClassMeans c{std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
    std::size_t np = 0, nn = 0;
    for (std::size_t r = 0; r < batch.rows.rows(); ++r) {
        auto& dst = batch.labels[r] == 1 ? c.pos : c.neg;
        (batch.labels[r] == 1 ? np : nn)++;
        auto row = batch.rows.row(r);
        for (std::size_t i = 0; i < m; ++i) dst[i] += row[i];
    }
    if (np == 0 || nn == 0) throw PreconditionError("both classes must be present");
    for (auto& x : c.pos) x /= static_cast<double>(np);
    for (auto& x : c.neg) x /= static_cast<double>(nn);
    return c;
}

std::vector<double> mean_gap(const lm::ActivationBatch& batch) {
    const auto c = class_means(batch);
    std::vector<double> d(c.pos.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = c.pos[i] - c.neg[i];
    return d;
}

// X^T X / n, optionally after removing the column means.
Tensor second_moment(const Tensor& x, bool centre) {
    const auto n = x.rows();
    const auto m = x.cols();
    std::vector<double> mu(m, 0.0);
    if (centre) {
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t i = 0; i < m; ++i) mu[i] += x.at(r, i);
        }
        for (auto& v : mu) v /= static_cast<double>(n);
    }
    Tensor c({m, m}, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        auto row = x.row(r);
        for (std::size_t i = 0; i < m; ++i) {
            const double a = row[i] - mu[i];
            if (a == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) c.at(i, j) += a * (row[j] - mu[j]);
        }
    }
    for (auto& v : c.data()) v /= static_cast<double>(n);
    return c;
}

bool all_zero(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
}

}  // namespace

std::vector<double> top_eigenvector(const Tensor& sym, const PowerIterationOptions& options) {
    const auto m = sym.rows();
    if (sym.cols() != m) throw ShapeError("top_eigenvector needs a square matrix");
    if (all_zero(sym)) throw DegenerateError("matrix is zero; no leading direction");
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(m), next(m);
    for (auto& x : v) x = normal(rng);
    normalize(v);
    for (std::size_t it = 0; it < options.max_iterations; ++it) {
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += sym.at(i, j) * v[j];
            next[i] = s;
        }
        const double n = norm(next);
        if (n == 0.0) throw DegenerateError("power iteration collapsed to zero");
        double change = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            next[i] /= n;
            // eigenvector sign may alternate only for negative eigenvalues, which PSD input excludes
            change = std::max(change, std::fabs(next[i] - v[i]));
        }
        v.swap(next);
        if (change < options.tolerance) break;
    }
    return v;
}

ResidualDirection caa(const lm::ActivationBatch& batch) {
    ResidualDirection d;
    d.method = Method::caa;
    d.vec = mean_gap(batch);
    if (norm(d.vec) == 0.0) throw DegenerateError("class means are identical");
    normalize(d.vec);
    d.lm_hash = batch.lm_hash;
    return d;
}

ResidualDirection repe(const Tensor& h_pos, const Tensor& h_neg) {
    if (h_pos.shape() != h_neg.shape()) throw ShapeError("repe: paired matrices differ in shape");
    if (h_pos.rows() < 2) throw PreconditionError("repe needs at least 2 pairs");
    Tensor diff = h_pos;
    for (std::size_t i = 0; i < diff.numel(); ++i) diff[i] -= h_neg[i];
    if (all_zero(diff)) throw DegenerateError("paired differences are all zero");
    ResidualDirection d;
    d.method = Method::repe;
    d.vec = top_eigenvector(second_moment(diff, false));
    std::vector<double> mean_diff(diff.cols(), 0.0);
    for (std::size_t r = 0; r < diff.rows(); ++r) {
        for (std::size_t i = 0; i < diff.cols(); ++i) mean_diff[i] += diff.at(r, i);
    }
    fix_sign(d.vec, mean_diff);
    return d;
}

ResidualDirection top_pc(const lm::ActivationBatch& batch) {
    if (batch.rows.rows() < 2) throw PreconditionError("top_pc needs at least 2 samples");
    const Tensor cov = second_moment(batch.rows, true);
    if (all_zero(cov)) throw DegenerateError("activations have zero variance");
    ResidualDirection d;
    d.method = Method::top_pc;
    d.vec = top_eigenvector(cov);
    fix_sign(d.vec, mean_gap(batch));
    d.lm_hash = batch.lm_hash;
    return d;
}

ResidualDirection iti_lite(const lm::ActivationBatch& batch) {
    const auto gap = mean_gap(batch);
    const auto n = batch.rows.rows();
    const auto m = batch.dim();
    // centring and one global scale keep the weight direction in residual coordinates
    std::vector<double> mu(m, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < m; ++i) mu[i] += batch.rows.at(r, i);
    }
    for (auto& v : mu) v /= static_cast<double>(n);
    Tensor x = batch.rows;
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < m; ++i) {
            x.at(r, i) -= mu[i];
            ss += x.at(r, i) * x.at(r, i);
        }
    }
    const double scale = std::sqrt(ss / static_cast<double>(n));
    if (scale > 0.0) {
        for (auto& v : x.data()) v /= scale;
    }
    probe::ProbeConfig cfg;
    cfg.iterations = 500;
    const auto p = probe::fit_probe(x, batch.labels, cfg);
    ResidualDirection d;
    d.method = Method::iti_lite;
    d.vec.resize(m);
    for (std::size_t i = 0; i < m; ++i) d.vec[i] = p.w1[i] - p.w0[i];
    if (norm(d.vec) < 1e-6) throw DegenerateError("ITI-lite probe weights vanish; no direction");
    normalize(d.vec);
    fix_sign(d.vec, gap);
    d.lm_hash = batch.lm_hash;
    return d;
}

std::pair<Tensor, Tensor> paired_rows(const lm::ActivationBatch& batch) {
    if (batch.pairs.size() != batch.rows.rows()) throw PreconditionError("activation batch carries no pair ids");
    std::map<std::int64_t, std::pair<long, long>> slots;
    for (std::size_t r = 0; r < batch.pairs.size(); ++r) {
        if (batch.pairs[r] < 0) continue;
        auto [it, fresh] = slots.try_emplace(batch.pairs[r], -1, -1);
        (batch.labels[r] == 1 ? it->second.first : it->second.second) = static_cast<long>(r);
    }
    std::vector<std::pair<std::size_t, std::size_t>> matched;
    for (const auto& [id, s] : slots) {
        if (s.first >= 0 && s.second >= 0) matched.emplace_back(s.first, s.second);
    }
    const auto m = batch.dim();
    Tensor pos({std::max<std::size_t>(matched.size(), 1), m}), neg({std::max<std::size_t>(matched.size(), 1), m});
    if (matched.empty()) throw PreconditionError("no twin pairs found in the activation batch");
    for (std::size_t i = 0; i < matched.size(); ++i) {
        auto a = batch.rows.row(matched[i].first);
        auto b = batch.rows.row(matched[i].second);
        std::copy(a.begin(), a.end(), pos.row(i).begin());
        std::copy(b.begin(), b.end(), neg.row(i).begin());
    }
    return {pos, neg};
}

corpus::Tokens apply_residual(const lm::LmParams& lm, const ResidualDirection& direction, double lambda_scale,
                              std::span<const corpus::TokenId> prompt, const lm::GenerateOptions& gen) {
    if (direction.vec.size() != lm.config.d_model) throw ShapeError("direction width does not match d_model");
    if (!direction.lm_hash.empty() && direction.lm_hash != lm.hash()) throw ArtifactError("direction was computed from a different LM");
    lm::ResidualHook hook{lm.config.hook_layer, lm::HookMode::replace, [&](std::size_t, std::span<double> row) {
                              for (std::size_t i = 0; i < row.size(); ++i) row[i] += lambda_scale * direction.vec[i];
                          }};
    return lm::generate(lm, prompt, gen, &hook);
}

nlohmann::json to_json(const ResidualDirection& d) {
    return {{"method", method_name(d.method)}, {"vec", d.vec}, {"lm_hash", d.lm_hash}};
}

ResidualDirection direction_from_json(const nlohmann::json& j) {
    try {
        ResidualDirection d;
        d.method = parse_method(j.at("method").get<std::string>());
        d.vec = j.at("vec").get<std::vector<double>>();
        d.lm_hash = j.value("lm_hash", "");
        return d;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("malformed direction artifact: ") + e.what());
    }
}

}  // namespace saessv::baselines
