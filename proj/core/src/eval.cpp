#include "saessv/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "saessv/error.hpp"
#include "saessv/hash.hpp"
#include "saessv/probe.hpp"

namespace saessv::eval {

using nd::Tensor;

namespace {

std::vector<double> frequencies(std::span<const TokenId> tokens, std::size_t vocab) {
    std::vector<double> f(vocab, 0.0);
    for (auto t : tokens) {
        if (t >= vocab) throw ShapeError("token id " + std::to_string(t) + " outside the judge vocabulary");
        f[t] += 1.0;
    }
    for (auto& v : f) v /= static_cast<double>(tokens.size());
    return f;
}

Tensor feature_rows(const corpus::Corpus& texts, std::size_t vocab) {
    Tensor x({texts.size(), vocab});
    for (std::size_t r = 0; r < texts.size(); ++r) {
        const auto f = frequencies(texts[r].token_ids, vocab);
        std::copy(f.begin(), f.end(), x.row(r).begin());
    }
    return x;
}

std::vector<int> labels_of(const corpus::Corpus& texts) {
    std::vector<int> y;
    for (const auto& t : texts) y.push_back(t.label);
    return y;
}

}  // namespace

double JudgeOracle::prob_positive(std::span<const TokenId> tokens) const {
    if (tokens.empty()) throw PreconditionError("cannot judge an empty sequence");
    const auto f = frequencies(tokens, vocab_size());
    double logit = bias;
    for (std::size_t i = 0; i < f.size(); ++i) logit += weights[i] * (f[i] - mean[i]) / std[i];
    return 1.0 / (1.0 + std::exp(-logit));
}

std::string JudgeOracle::hash() const {
    std::vector<double> all(weights);
    all.push_back(bias);
    all.insert(all.end(), mean.begin(), mean.end());
    all.insert(all.end(), std.begin(), std.end());
    return content_hash(all);
}

JudgeOracle train_judge(const corpus::Corpus& train, const corpus::Corpus& heldout, std::size_t vocab_size) {
    if (train.empty() || heldout.empty()) throw PreconditionError("judge needs training and held-out texts");
    Tensor x = feature_rows(train, vocab_size);
    JudgeOracle j;
    j.mean.assign(vocab_size, 0.0);
    j.std.assign(vocab_size, 0.0);
    const double n = static_cast<double>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t i = 0; i < vocab_size; ++i) j.mean[i] += x.at(r, i) / n;
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t i = 0; i < vocab_size; ++i) j.std[i] += (x.at(r, i) - j.mean[i]) * (x.at(r, i) - j.mean[i]) / n;
    }
    for (auto& s : j.std) s = s > 0.0 ? std::sqrt(s) : 1.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t i = 0; i < vocab_size; ++i) x.at(r, i) = (x.at(r, i) - j.mean[i]) / j.std[i];
    }
    probe::ProbeConfig cfg;
    cfg.iterations = 300;
    const auto p = probe::fit_probe(x, labels_of(train), cfg);
    // two-logit softmax collapses to a single logistic
    j.weights.resize(vocab_size);
    for (std::size_t i = 0; i < vocab_size; ++i) j.weights[i] = p.w1[i] - p.w0[i];
    j.bias = p.b1 - p.b0;
    j.trained_on = corpus::corpus_hash(train);

    std::size_t correct = 0;
    for (const auto& t : heldout) {
        const int pred = j.prob_positive(t.token_ids) >= j.threshold ? 1 : 0;
        correct += pred == t.label ? 1 : 0;
    }
    j.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(heldout.size());
    return j;
}

void require_reliable(const JudgeOracle& oracle) {
    if (oracle.heldout_accuracy < kJudgeMinAccuracy) {
        std::ostringstream msg;
        msg << "judge held-out accuracy " << oracle.heldout_accuracy << " is below " << kJudgeMinAccuracy << "; refusing to evaluate";
        throw PreconditionError(msg.str());
    }
}

nlohmann::json to_json(const JudgeOracle& j) {
    return {{"weights", j.weights},     {"bias", j.bias},           {"mean", j.mean},
            {"std", j.std},             {"threshold", j.threshold}, {"heldout_accuracy", j.heldout_accuracy},
            {"trained_on", j.trained_on}, {"judge_hash", j.hash()}};
}

JudgeOracle judge_from_json(const nlohmann::json& js) {
    try {
        JudgeOracle j;
        j.weights = js.at("weights").get<std::vector<double>>();
        j.bias = js.at("bias").get<double>();
        j.mean = js.at("mean").get<std::vector<double>>();
        j.std = js.at("std").get<std::vector<double>>();
        j.threshold = js.value("threshold", 0.5);
        j.heldout_accuracy = js.at("heldout_accuracy").get<double>();
        j.trained_on = js.value("trained_on", "");
        if (j.mean.size() != j.weights.size() || j.std.size() != j.weights.size()) throw ArtifactError("judge vectors disagree in length");
        if (js.contains("judge_hash") && js["judge_hash"] != j.hash()) throw ArtifactError("judge hash mismatch");
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("malformed judge artifact: ") + e.what());
    }
}

std::string category_name(Category c) {
    switch (c) {
        case Category::success: return "Success";
        case Category::retained: return "Retained";
        case Category::disorder: return "Disorder";
    }
    return "?";
}

double repetition_ratio(std::span<const TokenId> tokens) {
    if (tokens.size() < 4) return 0.0;
    std::set<std::array<TokenId, 4>> seen;
    std::size_t dup = 0, total = 0;
    for (std::size_t i = 0; i + 4 <= tokens.size(); ++i) {
        const std::array<TokenId, 4> g{tokens[i], tokens[i + 1], tokens[i + 2], tokens[i + 3]};
        ++total;
        if (!seen.insert(g).second) ++dup;
    }
    return static_cast<double>(dup) / static_cast<double>(total);
}

double entropy_bits(std::span<const TokenId> tokens) {
    if (tokens.empty()) throw PreconditionError("entropy of an empty sequence");
    std::unordered_map<TokenId, std::size_t> counts;
    for (auto t : tokens) ++counts[t];
    std::vector<std::size_t> c;
    for (const auto& [t, n] : counts) c.push_back(n);
    std::sort(c.begin(), c.end());  // fixed summation order
    double h = 0.0;
    const double n = static_cast<double>(tokens.size());
    for (auto k : c) {
        const double p = static_cast<double>(k) / n;
        h -= p * std::log2(p);
    }
    return h;
}

namespace {

double mtld_pass(std::span<const TokenId> tokens, bool reverse) {
    double factors = 0.0;
    std::set<TokenId> types;
    std::size_t count = 0;
    double ttr = 1.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto t = reverse ? tokens[tokens.size() - 1 - i] : tokens[i];
        types.insert(t);
        ++count;
        ttr = static_cast<double>(types.size()) / static_cast<double>(count);
        if (ttr < kMtldThreshold) {
            factors += 1.0;
            types.clear();
            count = 0;
            ttr = 1.0;
        }
    }
    if (count > 0) factors += (1.0 - ttr) / (1.0 - kMtldThreshold);
    if (factors == 0.0) return static_cast<double>(tokens.size());
    return static_cast<double>(tokens.size()) / factors;
}

}  // namespace

double mtld(std::span<const TokenId> tokens) {
    if (tokens.size() < 10) throw PreconditionError("MTLD needs at least 10 tokens");
    return 0.5 * (mtld_pass(tokens, false) + mtld_pass(tokens, true));
}

GenerationVerdict judge(const JudgeOracle& oracle, std::span<const TokenId> tokens, int target_label) {
    if (tokens.empty()) throw PreconditionError("cannot judge an empty sequence");
    GenerationVerdict v;
    const double p1 = oracle.prob_positive(tokens);
    v.judge_prob = target_label == 1 ? p1 : 1.0 - p1;
    v.repetition_ratio = repetition_ratio(tokens);
    v.entropy_bits = entropy_bits(tokens);
    if (v.repetition_ratio > kRepetitionLimit || v.entropy_bits < kEntropyFloor) {
        v.category = Category::disorder;
    } else if (v.judge_prob >= oracle.threshold) {
        v.category = Category::success;
    } else {
        v.category = Category::retained;
    }
    return v;
}

Tokens Intervention::generate(const lm::LmParams& lm, std::span<const TokenId> prompt, double lambda_scale,
                              const lm::GenerateOptions& gen) const {
    if (vector && direction) throw PreconditionError("an intervention is either an SAE vector or a residual direction");
    if (vector) {
        if (!sae) throw PreconditionError("SAE steering needs the SAE");
        ssv::SteerConfig cfg{lambda_scale, error_corrected, steer_prompt};
        return ssv::steer_generate(lm, *sae, *vector, prompt, cfg, gen);
    }
    auto options = gen;
    options.steer_prompt = steer_prompt;
    if (direction) return baselines::apply_residual(lm, *direction, lambda_scale, prompt, options);
    return lm::generate(lm, prompt, options);
}

std::string Intervention::artifact_hash() const {
    if (vector) return content_hash(ssv::to_json(*vector).dump());
    if (direction) return content_hash(baselines::to_json(*direction).dump());
    return "";
}

EvalReport evaluate(const lm::LmParams& lm, const Intervention& intervention, const std::vector<Tokens>& prompts,
                    double lambda_scale, const JudgeOracle& oracle, const EvalOptions& options,
                    std::vector<GenerationRecord>* records) {
    if (prompts.size() < options.min_prompts) {
        throw PreconditionError("evaluation needs at least " + std::to_string(options.min_prompts) + " prompts, got " +
                                std::to_string(prompts.size()));
    }
    require_reliable(oracle);
    if (oracle.vocab_size() != lm.config.vocab_size) throw ArtifactError("judge vocabulary does not match the LM");

    lm::GenerateOptions gen;
    gen.max_new = options.max_new;
    gen.seed = options.seed;

    EvalReport r;
    r.method = intervention.method;
    r.lambda_scale = lambda_scale;
    r.n_prompts = prompts.size();
    r.lm_hash = lm.hash();
    r.artifact_hash = intervention.artifact_hash();
    r.judge_hash = oracle.hash();
    r.identical_to_base = true;
    std::size_t counts[3] = {0, 0, 0}, base_counts[3] = {0, 0, 0};
    for (const auto& prompt : prompts) {
        auto base_full = lm::generate(lm, prompt, gen);
        auto steered_full = intervention.generate(lm, prompt, lambda_scale, gen);
        Tokens base(base_full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), base_full.end());
        Tokens steered(steered_full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), steered_full.end());
        if (base.empty() || steered.empty()) throw PreconditionError("evaluation needs max_new > 0");
        const auto bv = judge(oracle, base, options.target_label);
        const auto sv = judge(oracle, steered, options.target_label);
        ++base_counts[static_cast<int>(bv.category)];
        ++counts[static_cast<int>(sv.category)];
        r.mtld_base += mtld(base);
        r.mtld_steered += mtld(steered);
        r.entropy_base += bv.entropy_bits;
        r.entropy_steered += sv.entropy_bits;
        if (std::set<TokenId>(steered.begin(), steered.end()).size() == steered.size()) ++r.mtld_degenerate;
        r.identical_to_base = r.identical_to_base && base == steered;
        if (records) records->push_back({prompt, std::move(base), std::move(steered), bv, sv});
    }
    const double n = static_cast<double>(prompts.size());
    r.sr_pct = 100.0 * static_cast<double>(counts[0]) / n;
    r.retained_pct = 100.0 * static_cast<double>(counts[1]) / n;
    r.disorder_pct = 100.0 * static_cast<double>(counts[2]) / n;
    r.base_sr_pct = 100.0 * static_cast<double>(base_counts[0]) / n;
    r.base_retained_pct = 100.0 * static_cast<double>(base_counts[1]) / n;
    r.base_disorder_pct = 100.0 * static_cast<double>(base_counts[2]) / n;
    r.mtld_base /= n;
    r.mtld_steered /= n;
    r.entropy_base /= n;
    r.entropy_steered /= n;
    r.delta_mtld = r.mtld_steered - r.mtld_base;
    r.delta_entropy = r.entropy_steered - r.entropy_base;
    return r;
}

nlohmann::json to_json(const EvalReport& r) {
    return {{"method", r.method},
            {"lambda_scale", r.lambda_scale},
            {"n_prompts", r.n_prompts},
            {"sr_pct", r.sr_pct},
            {"retained_pct", r.retained_pct},
            {"disorder_pct", r.disorder_pct},
            {"base_sr_pct", r.base_sr_pct},
            {"base_retained_pct", r.base_retained_pct},
            {"base_disorder_pct", r.base_disorder_pct},
            {"mtld_steered", r.mtld_steered},
            {"mtld_base", r.mtld_base},
            {"delta_mtld", r.delta_mtld},
            {"entropy_steered", r.entropy_steered},
            {"entropy_base", r.entropy_base},
            {"delta_entropy", r.delta_entropy},
            {"mtld_degenerate", r.mtld_degenerate},
            {"identical_to_base", r.identical_to_base},
            {"lm_hash", r.lm_hash},
            {"artifact_hash", r.artifact_hash},
            {"judge_hash", r.judge_hash}};
}

std::string csv_header() {
    return "method,lambda,n_prompts,sr_pct,retained_pct,disorder_pct,base_sr_pct,delta_mtld,delta_entropy,lm_hash,artifact_hash,judge_hash";
}

std::string csv_row(const EvalReport& r) {
    std::ostringstream out;
    out << std::setprecision(10) << r.method << ',' << r.lambda_scale << ',' << r.n_prompts << ',' << r.sr_pct << ','
        << r.retained_pct << ',' << r.disorder_pct << ',' << r.base_sr_pct << ',' << r.delta_mtld << ',' << r.delta_entropy << ','
        << r.lm_hash << ',' << r.artifact_hash << ',' << r.judge_hash;
    return out.str();
}

std::vector<HeatmapRow> heatmap_export(const Tensor& rows, std::span<const int> labels, std::size_t top_n) {
    if (labels.size() != rows.rows()) throw ShapeError("heatmap: label count does not match rows");
    const auto d = rows.cols();
    if (top_n == 0 || top_n > d) throw PreconditionError("top_n must lie in [1, " + std::to_string(d) + "]");
    std::vector<double> s0(d, 0.0), s1(d, 0.0);
    std::size_t n0 = 0, n1 = 0;
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        auto& s = labels[r] == 1 ? s1 : s0;
        (labels[r] == 1 ? n1 : n0)++;
        for (std::size_t j = 0; j < d; ++j) s[j] += rows.at(r, j);
    }
    if (n0 == 0 || n1 == 0) throw PreconditionError("heatmap needs both classes");
    std::vector<HeatmapRow> all(d);
    for (std::size_t j = 0; j < d; ++j) all[j] = {j, s0[j] / static_cast<double>(n0), s1[j] / static_cast<double>(n1), 0.0};
    std::vector<double> within(d, 0.0);
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            const double mu = labels[r] == 1 ? all[j].mean_class1 : all[j].mean_class0;
            within[j] += (rows.at(r, j) - mu) * (rows.at(r, j) - mu);
        }
    }
    const double dof = rows.rows() > 2 ? static_cast<double>(rows.rows() - 2) : 1.0;
    for (std::size_t j = 0; j < d; ++j) all[j].pooled_std = std::sqrt(within[j] / dof);
    std::stable_sort(all.begin(), all.end(), [](const HeatmapRow& a, const HeatmapRow& b) {
        return std::fabs(a.mean_class1 - a.mean_class0) > std::fabs(b.mean_class1 - b.mean_class0);
    });
    all.resize(top_n);
    return all;
}

void write_heatmap_csv(const std::vector<HeatmapRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path);
    out << std::setprecision(17) << "dim_id,mean_class0,mean_class1,pooled_std\n";
    for (const auto& r : rows) out << r.dim << ',' << r.mean_class0 << ',' << r.mean_class1 << ',' << r.pooled_std << '\n';
}

}  // namespace saessv::eval
