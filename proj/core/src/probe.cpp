#include "saessv/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "saessv/error.hpp"
#include "saessv/hash.hpp"

namespace saessv::probe {

using nd::Tensor;

std::string Subspace::hash() const {
    std::string text;
    for (auto i : indices) text += std::to_string(i) + ",";
    return content_hash(text);
}

void ProbeConfig::validate() const {
    if (M == 0) throw PreconditionError("probe ensemble size M must be positive");
    if (!(subset_fraction > 0.0 && subset_fraction < 1.0)) throw PreconditionError("subset_fraction must lie in (0, 1)");
    if (!(l2 >= 0.0) || !(lr > 0.0)) throw PreconditionError("probe l2 must be >= 0 and lr > 0");
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
    j = {{"M", c.M}, {"subset_fraction", c.subset_fraction}, {"l2", c.l2}, {"lr", c.lr}, {"iterations", c.iterations}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
    ProbeConfig d;
    c.M = j.value("M", d.M);
    c.subset_fraction = j.value("subset_fraction", d.subset_fraction);
    c.l2 = j.value("l2", d.l2);
    c.lr = j.value("lr", d.lr);
    c.iterations = j.value("iterations", d.iterations);
    c.seed = j.value("seed", d.seed);
}

double ProbeEnsemble::mean_accuracy() const {
    if (probes.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& p : probes) acc += p.heldout_accuracy;
    return acc / static_cast<double>(probes.size());
}

namespace {

void check_labels(const Tensor& x, std::span<const int> labels) {
    if (labels.size() != x.rows()) throw ShapeError("label count does not match row count");
    for (int y : labels) {
        if (y != 0 && y != 1) throw DomainError("labels must be 0 or 1");
    }
}

bool both_classes(std::span<const int> labels) {
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    return pos > 0 && pos < static_cast<std::ptrdiff_t>(labels.size());
}

}  // namespace

DimScores f_scores(const Tensor& codes, std::span<const int> labels) {
    check_labels(codes, labels);
    const auto n = codes.rows();
    const auto d = codes.cols();
    if (n < 4) throw PreconditionError("f_scores needs at least 4 samples");
    if (!both_classes(labels)) throw PreconditionError("f_scores needs both classes present");

    std::vector<double> sum0(d, 0.0), sum1(d, 0.0);
    std::size_t n1 = 0;
    for (std::size_t r = 0; r < n; ++r) {
        auto row = codes.row(r);
        auto& s = labels[r] ? sum1 : sum0;
        n1 += labels[r] ? 1 : 0;
        for (std::size_t t = 0; t < d; ++t) s[t] += row[t];
    }
    const double c1 = static_cast<double>(n1);
    const double c0 = static_cast<double>(n - n1);
    std::vector<double> mu0(d), mu1(d), within(d, 0.0);
    for (std::size_t t = 0; t < d; ++t) {
        mu0[t] = sum0[t] / c0;
        mu1[t] = sum1[t] / c1;
    }
    for (std::size_t r = 0; r < n; ++r) {
        auto row = codes.row(r);
        const auto& mu = labels[r] ? mu1 : mu0;
        for (std::size_t t = 0; t < d; ++t) within[t] += (row[t] - mu[t]) * (row[t] - mu[t]);
    }
    DimScores out;
    out.scores.resize(d);
    for (std::size_t t = 0; t < d; ++t) {
        const double mu = (sum0[t] + sum1[t]) / static_cast<double>(n);
        // C − 1 = 1
        const double between = c0 * (mu0[t] - mu) * (mu0[t] - mu) + c1 * (mu1[t] - mu) * (mu1[t] - mu);
        const double w = within[t] / static_cast<double>(n - 2);
        if (w > 0.0) {
            out.scores[t] = between / w;
        } else {
            out.scores[t] = between > 0.0 ? kSeparatedScore : 0.0;
        }
    }
    out.ranking.resize(d);
    std::iota(out.ranking.begin(), out.ranking.end(), std::size_t{0});
    std::stable_sort(out.ranking.begin(), out.ranking.end(),
                     [&](std::size_t a, std::size_t b) { return out.scores[a] > out.scores[b]; });
    return out;
}

Subspace select_subspace(const DimScores& scores, const Tensor& codes, std::size_t k) {
    const auto d = scores.scores.size();
    if (k == 0 || k > d) throw PreconditionError("k must lie in [1, " + std::to_string(d) + "]");
    if (codes.cols() != d) throw ShapeError("select_subspace: code width does not match score count");
    if (codes.rows() == 0) throw PreconditionError("select_subspace needs training codes");
    Subspace s;
    s.indices.assign(scores.ranking.begin(), scores.ranking.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(s.indices.begin(), s.indices.end());
    const double n = static_cast<double>(codes.rows());
    for (auto t : s.indices) {
        double mu = 0.0;
        for (std::size_t r = 0; r < codes.rows(); ++r) mu += codes.at(r, t);
        mu /= n;
        double var = 0.0;
        for (std::size_t r = 0; r < codes.rows(); ++r) var += (codes.at(r, t) - mu) * (codes.at(r, t) - mu);
        const double sd = std::sqrt(var / n);
        s.mean.push_back(mu);
        s.std.push_back(sd > 0.0 ? sd : 1.0);
    }
    return s;
}

Tensor standardize(const Subspace& subspace, const Tensor& codes) {
    Tensor out({codes.rows(), subspace.k()});
    for (std::size_t r = 0; r < codes.rows(); ++r) {
        auto row = codes.row(r);
        for (std::size_t j = 0; j < subspace.k(); ++j) {
            if (subspace.indices[j] >= row.size()) throw ShapeError("standardize: subspace index outside code width");
            out.at(r, j) = (row[subspace.indices[j]] - subspace.mean[j]) / subspace.std[j];
        }
    }
    return out;
}

LinearProbe fit_probe(const Tensor& x, std::span<const int> labels, const ProbeConfig& config) {
    check_labels(x, labels);
    const auto n = x.rows();
    const auto k = x.cols();
    LinearProbe p;
    p.w0.assign(k, 0.0);
    p.w1.assign(k, 0.0);
    std::vector<double> g0(k), g1(k);
    for (std::size_t it = 0; it < config.iterations; ++it) {
        std::fill(g0.begin(), g0.end(), 0.0);
        std::fill(g1.begin(), g1.end(), 0.0);
        double gb0 = 0.0, gb1 = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            auto row = x.row(r);
            double l0 = p.b0, l1 = p.b1;
            for (std::size_t j = 0; j < k; ++j) {
                l0 += p.w0[j] * row[j];
                l1 += p.w1[j] * row[j];
            }
            // softmax over two logits
            const double p1 = 1.0 / (1.0 + std::exp(l0 - l1));
            const double e1 = p1 - (labels[r] == 1 ? 1.0 : 0.0);
            const double e0 = -e1;
            for (std::size_t j = 0; j < k; ++j) {
                g0[j] += e0 * row[j];
                g1[j] += e1 * row[j];
            }
            gb0 += e0;
            gb1 += e1;
        }
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t j = 0; j < k; ++j) {
            p.w0[j] -= config.lr * (g0[j] * inv + 2.0 * config.l2 * p.w0[j]);
            p.w1[j] -= config.lr * (g1[j] * inv + 2.0 * config.l2 * p.w1[j]);
        }
        p.b0 -= config.lr * gb0 * inv;
        p.b1 -= config.lr * gb1 * inv;
    }
    for (double v : p.w1) {
        if (!std::isfinite(v)) throw NonFiniteError("probe training produced non-finite weights");
    }
    return p;
}

double probe_accuracy(const LinearProbe& probe, const Tensor& x, std::span<const int> labels) {
    check_labels(x, labels);
    if (x.rows() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        double l0 = probe.b0, l1 = probe.b1;
        for (std::size_t j = 0; j < row.size(); ++j) {
            l0 += probe.w0[j] * row[j];
            l1 += probe.w1[j] * row[j];
        }
        const int pred = l1 > l0 ? 1 : 0;
        correct += pred == labels[r] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(x.rows());
}

ProbeEnsemble train_probe_ensemble(const Tensor& x, std::span<const int> labels, const ProbeConfig& config) {
    config.validate();
    check_labels(x, labels);
    const auto n = x.rows();
    const auto n_sub = static_cast<std::size_t>(std::round(config.subset_fraction * static_cast<double>(n)));
    if (n_sub < 2 || n_sub >= n) throw PreconditionError("too few samples for probe subsets");

    std::mt19937_64 master(config.seed);
    ProbeEnsemble ensemble;
    for (std::size_t j = 0; j < config.M; ++j) {
        const std::uint64_t subset_seed = master();
        std::vector<std::size_t> order(n);
        std::vector<int> sub_labels;
        bool ok = false;
        for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::mt19937_64 rng(subset_seed + static_cast<std::uint64_t>(attempt));
            std::shuffle(order.begin(), order.end(), rng);
            sub_labels.clear();
            for (std::size_t i = 0; i < n_sub; ++i) sub_labels.push_back(labels[order[i]]);
            ok = both_classes(sub_labels);
        }
        if (!ok) throw DegenerateError("probe subset " + std::to_string(j) + " contains a single class after resampling");

        Tensor sub({n_sub, x.cols()});
        Tensor rest({n - n_sub, x.cols()});
        std::vector<int> rest_labels;
        for (std::size_t i = 0; i < n; ++i) {
            auto src = x.row(order[i]);
            if (i < n_sub) {
                std::copy(src.begin(), src.end(), sub.row(i).begin());
            } else {
                std::copy(src.begin(), src.end(), rest.row(i - n_sub).begin());
                rest_labels.push_back(labels[order[i]]);
            }
        }
        auto probe = fit_probe(sub, sub_labels, config);
        probe.subset_seed = subset_seed;
        probe.heldout_accuracy = probe_accuracy(probe, rest, rest_labels);
        ensemble.probes.push_back(std::move(probe));
    }
    return ensemble;
}

std::vector<double> truncate_top(std::span<const double> v, std::size_t d) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::fabs(v[a]) > std::fabs(v[b]); });
    std::vector<double> out(v.size(), 0.0);
    for (std::size_t i = 0; i < std::min(d, v.size()); ++i) out[order[i]] = v[order[i]];
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

ConceptDirection concept_direction(const ProbeEnsemble& ensemble, const Tensor& test_x, std::span<const int> test_labels) {
    if (ensemble.probes.empty()) throw PreconditionError("concept_direction needs a non-empty ensemble");
    check_labels(test_x, test_labels);
    if (!both_classes(test_labels)) throw PreconditionError("concept_direction needs both classes in the test codes");
    const auto k = ensemble.probes.front().w1.size();
    if (test_x.cols() != k) throw ShapeError("concept_direction: test code width does not match probe width");

    ConceptDirection out;
    out.v_avg.assign(k, 0.0);
    for (const auto& p : ensemble.probes) {
        for (std::size_t j = 0; j < k; ++j) out.v_avg[j] += p.w1[j];
    }
    for (auto& v : out.v_avg) v /= static_cast<double>(ensemble.M());
    if (std::all_of(out.v_avg.begin(), out.v_avg.end(), [](double v) { return v == 0.0; })) {
        throw DegenerateError("averaged concept direction is identically zero");
    }

    std::vector<double> best_pos, best_neg;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t d = 1; d <= k; ++d) {
        const auto vd = truncate_top(out.v_avg, d);
        double pos = 0.0, neg = 0.0;
        std::size_t np = 0, nn = 0;
        double vv = 0.0;
        for (double x : vd) vv += x * x;
        std::vector<double> projected(k);
        for (std::size_t r = 0; r < test_x.rows(); ++r) {
            // cosine between the projection of the code onto v^(d) and v^(d)
            auto row = test_x.row(r);
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j) dot += row[j] * vd[j];
            for (std::size_t j = 0; j < k; ++j) projected[j] = dot / vv * vd[j];
            const double c = cosine(projected, vd);
            if (test_labels[r] == 1) {
                pos += c;
                ++np;
            } else {
                neg += c;
                ++nn;
            }
        }
        pos /= static_cast<double>(np);
        neg /= static_cast<double>(nn);
        const double s = pos - neg;
        out.curve.emplace_back(d, s);
        if (s > best + 1e-12) {
            best = s;
            out.d_steer = d;
            out.cbar_pos = pos;
            out.cbar_neg = neg;
        }
    }
    return out;
}

std::vector<double> weight_gap_importance(const ProbeEnsemble& ensemble) {
    if (ensemble.probes.empty()) throw PreconditionError("empty ensemble");
    const auto k = ensemble.probes.front().w1.size();
    std::vector<double> out(k, 0.0);
    for (const auto& p : ensemble.probes) {
        for (std::size_t j = 0; j < k; ++j) out[j] += std::fabs(p.w1[j] - p.w0[j]);
    }
    for (auto& v : out) v /= static_cast<double>(ensemble.M());
    return out;
}

nlohmann::json to_artifact(const Subspace& subspace, const ProbeEnsemble& ensemble, const ConceptDirection& direction) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [d, s] : direction.curve) curve.push_back({d, s});
    std::vector<double> accuracies;
    for (const auto& p : ensemble.probes) accuracies.push_back(p.heldout_accuracy);
    return {{"I", subspace.indices},
            {"k", subspace.k()},
            {"mean", subspace.mean},
            {"std", subspace.std},
            {"M", ensemble.M()},
            {"v_avg", direction.v_avg},
            {"curve", curve},
            {"d_steer", direction.d_steer},
            {"cbar_pos", direction.cbar_pos},
            {"cbar_neg", direction.cbar_neg},
            {"probe_accuracy", accuracies},
            {"I_hash", subspace.hash()}};
}

ProbeArtifact from_artifact(const nlohmann::json& j) {
    try {
        ProbeArtifact a;
        a.subspace.indices = j.at("I").get<std::vector<std::size_t>>();
        a.subspace.mean = j.at("mean").get<std::vector<double>>();
        a.subspace.std = j.at("std").get<std::vector<double>>();
        a.M = j.at("M").get<std::size_t>();
        a.direction.v_avg = j.at("v_avg").get<std::vector<double>>();
        for (const auto& e : j.at("curve")) a.direction.curve.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<double>());
        a.direction.d_steer = j.at("d_steer").get<std::size_t>();
        a.direction.cbar_pos = j.value("cbar_pos", 0.0);
        a.direction.cbar_neg = j.value("cbar_neg", 0.0);
        const auto k = a.subspace.indices.size();
        if (j.at("k").get<std::size_t>() != k || a.subspace.mean.size() != k || a.subspace.std.size() != k ||
            a.direction.v_avg.size() != k) {
            throw ArtifactError("probe artifact fields disagree on k");
        }
        if (j.contains("I_hash") && j["I_hash"] != a.subspace.hash()) throw ArtifactError("probe artifact I_hash mismatch");
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("malformed probe artifact: ") + e.what());
    }
}

}  // namespace saessv::probe
