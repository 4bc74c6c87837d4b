#include "app.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "saessv/error.hpp"
#include "saessv/hash.hpp"
#include "saessv/serialize.hpp"

namespace saessv::app {

using nlohmann::json;

namespace {

enum Stage : std::uint64_t {
    kCorpusA = 1,
    kCorpusB,
    kSplitA,
    kSplitB,
    kLmInit,
    kLmTrain,
    kSae,
    kProbe,
    kSsv,
    kEval,
};

json lm_train_json(const lm::TrainOptions& o) {
    return {{"epochs", o.epochs}, {"lr", o.lr}, {"batch_size", o.batch_size}, {"clip_norm", o.clip_norm}, {"seed", o.seed}};
}

lm::TrainOptions lm_train_from(const json& j) {
    lm::TrainOptions o;
    o.epochs = j.at("epochs").get<std::size_t>();
    o.lr = j.at("lr").get<double>();
    o.batch_size = j.at("batch_size").get<std::size_t>();
    o.clip_norm = j.at("clip_norm").get<double>();
    o.seed = j.at("seed").get<std::uint64_t>();
    return o;
}

json corpus_json(const CorpusSection& c) {
    return {{"n_texts", c.n_texts},   {"strength", c.strength},     {"train_fraction", c.train_fraction},
            {"prompt_len", c.prompt_len}, {"n_prompts", c.n_prompts}, {"min_len", c.gen.min_len},
            {"max_len", c.gen.max_len}, {"follow_prob", c.gen.follow_prob}};
}

CorpusSection corpus_from(const json& j) {
    CorpusSection c;
    c.n_texts = j.at("n_texts").get<std::size_t>();
    c.strength = j.at("strength").get<double>();
    c.train_fraction = j.at("train_fraction").get<double>();
    c.prompt_len = j.at("prompt_len").get<std::size_t>();
    c.n_prompts = j.at("n_prompts").get<std::size_t>();
    c.gen.min_len = j.at("min_len").get<std::size_t>();
    c.gen.max_len = j.at("max_len").get<std::size_t>();
    c.gen.follow_prob = j.at("follow_prob").get<double>();
    return c;
}

json probe_json(const probe::ProbeConfig& p, std::size_t k) {
    json j = p;
    j["k"] = k;
    return j;
}

json steer_json(const ssv::SteerConfig& s) {
    return {{"lambda", s.lambda_scale}, {"error_corrected", s.error_corrected}, {"steer_prompt", s.steer_prompt}};
}

ssv::SteerConfig steer_from(const json& j) {
    return {j.at("lambda").get<double>(), j.at("error_corrected").get<bool>(), j.at("steer_prompt").get<bool>()};
}

json eval_json(const eval::EvalOptions& e, const std::vector<double>& lambdas) {
    return {{"max_new", e.max_new}, {"target_label", e.target_label}, {"min_prompts", e.min_prompts},
            {"seed", e.seed},       {"lambdas", lambdas}};
}

std::string type_name(const json& j) {
    if (j.is_boolean()) return "a boolean";
    if (j.is_number_unsigned()) return "a non-negative integer";
    if (j.is_number()) return "a number";
    if (j.is_string()) return "a string";
    if (j.is_array()) return "an array";
    return "an object";
}

bool compatible(const json& want, const json& got) {
    if (want.is_boolean()) return got.is_boolean();
    if (want.is_number_unsigned()) return got.is_number_unsigned() || (got.is_number_integer() && got.get<std::int64_t>() >= 0);
    if (want.is_number()) return got.is_number();
    if (want.is_string()) return got.is_string();
    if (want.is_array()) return got.is_array();
    return got.is_object();
}

// Overlays `user` on the defaults of one section, naming the first bad field.
json merge_section(const std::string& name, const json& defaults, const json& user) {
    if (!user.is_object()) throw ConfigError(name + ": expected an object");
    json merged = defaults;
    for (const auto& [key, value] : user.items()) {
        const auto path = name + "." + key;
        if (!defaults.contains(key)) throw ConfigError("unknown field " + path);
        if (!compatible(defaults[key], value)) throw ConfigError(path + ": expected " + type_name(defaults[key]));
        merged[key] = value;
    }
    return merged;
}

template <class F>
auto parse_section(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(name + ": " + e.what());
    } catch (const json::exception& e) {
        throw ConfigError(name + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("missing artifact " + path.string() + " (run the upstream subcommand first)");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ArtifactError("corrupt artifact " + path.string() + ": " + e.what());
    }
}

void require_match(const std::string& what, const std::string& recorded, const std::string& actual) {
    if (recorded != actual) throw ArtifactError(what + " is stale: recorded upstream hash " + recorded + ", found " + actual);
}

corpus::Corpus concat(const corpus::Corpus& a, const corpus::Corpus& b) {
    corpus::Corpus out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

void log(const Context& ctx, const std::string& line) {
    if (ctx.verbose) std::cout << line << std::endl;
}

std::string fmt(double x) {
    std::ostringstream s;
    s << std::setprecision(6) << x;
    return s.str();
}

std::string lambda_tag(double l) {
    std::ostringstream s;
    s << l;
    return s.str();
}

corpus::Split load_split(const Layout& layout, corpus::Style style) {
    return {corpus::read_jsonl(layout.corpus("train", style)), corpus::read_jsonl(layout.corpus("test", style))};
}

lm::ActivationBatch load_acts(const Layout& layout, const std::string& part, const lm::LmParams& lm,
                              const corpus::Corpus& texts) {
    auto batch = lm::load_activations(layout.acts(part, corpus::Style::A));
    require_match("activations " + part, batch.lm_hash, lm.hash());
    std::vector<int> labels;
    for (const auto& t : texts) labels.push_back(t.label);
    if (labels != batch.labels) throw ArtifactError("activations " + part + " do not match the corpus");
    return batch;
}

struct ProbeState {
    probe::ProbeArtifact artifact;
    nd::Tensor train_codes;
    lm::ActivationBatch train_acts;
};

ProbeState load_probe(const Context& ctx, const Artifacts& a) {
    const auto j = read_json(ctx.layout.probe());
    require_match("probe artifact", j.at("sae_hash").get<std::string>(), a.sae.hash());
    ProbeState s{probe::from_artifact(j), {}, load_acts(ctx.layout, "train", a.lm, a.style_a.train)};
    s.train_codes = sae::encode_rows(a.sae, s.train_acts.rows);
    return s;
}

std::string tag_for(const SteerRequest& r) {
    const bool sae_space = r.method == "ssv" || r.method == "init" || r.method == "no-lm" || r.method == "none";
    const auto name = sae_space ? r.method : baselines::method_name(baselines::parse_method(r.method));
    std::string tag = name + "_" + corpus::style_name(r.style);
    if (r.method != "none") tag += "_l" + lambda_tag(r.lambda_scale);
    if (!r.error_corrected) tag += "_plain";
    return tag;
}

// Owns whatever an intervention points at.
struct Prepared {
    ssv::SteeringVector vector;
    baselines::ResidualDirection direction;
    eval::Intervention intervention;
};

std::unique_ptr<Prepared> prepare(const Context& ctx, const Artifacts& a, const SteerRequest& r) {
    auto owner = std::make_unique<Prepared>();
    auto& p = *owner;
    p.intervention.method = r.method;
    p.intervention.error_corrected = r.error_corrected;
    p.intervention.steer_prompt = ctx.config.steer.steer_prompt;
    if (r.method == "none") return owner;
    if (r.method == "ssv" || r.method == "init" || r.method == "no-lm") {
        p.vector = load_vector(ctx, a, r.method);
        p.intervention.sae = &a.sae;
        p.intervention.vector = &p.vector;
        return owner;
    }
    const auto m = baselines::parse_method(r.method);
    const auto path = ctx.layout.direction(m);
    p.direction = fs::exists(path) ? baselines::direction_from_json(read_json(path)) : build_baseline(ctx, m);
    require_match("baseline direction " + r.method, p.direction.lm_hash, a.lm.hash());
    p.intervention.method = baselines::method_name(m);
    p.intervention.direction = &p.direction;
    return owner;
}

void write_reports_csv(const fs::path& path, const std::vector<eval::EvalReport>& reports) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << eval::csv_header() << '\n';
    for (const auto& r : reports) out << eval::csv_row(r) << '\n';
}

eval::EvalOptions eval_options(const Context& ctx) {
    auto o = ctx.config.eval;
    o.seed = ctx.config.stage_seed(kEval, o.seed);
    return o;
}

eval::EvalReport run_eval(const Context& ctx, const Artifacts& a, const SteerRequest& r) {
    const auto p = prepare(ctx, a, r);
    const auto report = eval::evaluate(a.lm, p->intervention, prompts(ctx, a, r.style), r.lambda_scale, a.judge, eval_options(ctx));
    write_json(ctx.layout.report(tag_for(r)), eval::to_json(report));
    log(ctx, report.method + " style " + corpus::style_name(r.style) + " lambda " + lambda_tag(r.lambda_scale) + ": SR " +
                 fmt(report.sr_pct) + " retained " + fmt(report.retained_pct) + " disorder " + fmt(report.disorder_pct) +
                 " (base SR " + fmt(report.base_sr_pct) + ") dMTLD " + fmt(report.delta_mtld) + " dEntropy " +
                 fmt(report.delta_entropy));
    return report;
}

}  // namespace

// ------------------------------------------------------------------ config

std::uint64_t RunConfig::stage_seed(std::uint64_t stage, std::uint64_t local) const {
    return seed * 1000003ULL + stage * 7919ULL + local;
}

void RunConfig::validate() const {
    parse_section("corpus", [&] {
        if (corpus.n_texts < 2 || corpus.n_texts % 2) throw PreconditionError("n_texts must be even and >= 2");
        if (!(corpus.strength > 0.0 && corpus.strength <= 1.0)) throw PreconditionError("strength must lie in (0, 1]");
        if (!(corpus.train_fraction > 0.0 && corpus.train_fraction < 1.0)) throw PreconditionError("train_fraction must lie in (0, 1)");
        if (corpus.prompt_len < 1 || corpus.prompt_len > corpus.gen.min_len) throw PreconditionError("prompt_len must lie in [1, min_len]");
        if (corpus.n_prompts == 0) throw PreconditionError("n_prompts must be positive");
        return 0;
    });
    parse_section("lm", [&] { return lm.validate(), 0; });
    parse_section("lm_train", [&] {
        if (lm_train.batch_size == 0) throw PreconditionError("batch_size must be positive");
        if (!(lm_train.lr > 0.0)) throw PreconditionError("lr must be positive");
        return 0;
    });
    parse_section("sae", [&] { return sae.validate(), 0; });
    parse_section("probe", [&] {
        probe.validate();
        if (k == 0) throw PreconditionError("k must be positive");
        return 0;
    });
    parse_section("ssv", [&] { return ssv.validate(), 0; });
    parse_section("steer", [&] { return steer.validate(), 0; });
    parse_section("eval", [&] {
        if (eval.max_new == 0) throw PreconditionError("max_new must be positive");
        if (eval.target_label != 0 && eval.target_label != 1) throw PreconditionError("target_label must be 0 or 1");
        if (corpus.prompt_len + eval.max_new > lm.context_len) throw PreconditionError("prompt_len + max_new exceeds the LM context");
        for (double l : lambdas) {
            if (!(l >= 0.0 && l <= 10.0)) throw PreconditionError("lambdas must lie in [0, 10]");
        }
        return 0;
    });
}

json to_json(const RunConfig& c) {
    json lm_j = c.lm;
    json sae_j = c.sae;
    json ssv_j = c.ssv;
    return {{"seed", c.seed},
            {"corpus", corpus_json(c.corpus)},
            {"lm", lm_j},
            {"lm_train", lm_train_json(c.lm_train)},
            {"sae", sae_j},
            {"probe", probe_json(c.probe, c.k)},
            {"ssv", ssv_j},
            {"steer", steer_json(c.steer)},
            {"eval", eval_json(c.eval, c.lambdas)}};
}

RunConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const RunConfig defaults;
    const json d = to_json(defaults);
    for (const auto& [key, value] : j.items()) {
        if (!d.contains(key)) throw ConfigError("unknown field " + key);
    }
    RunConfig c;
    if (j.contains("seed")) {
        if (!compatible(d["seed"], j["seed"])) throw ConfigError("seed: expected a non-negative integer");
        c.seed = j["seed"].get<std::uint64_t>();
    }
    auto section = [&](const std::string& name) { return merge_section(name, d[name], j.value(name, json::object())); };
    c.corpus = parse_section("corpus", [&] { return corpus_from(section("corpus")); });
    c.lm = parse_section("lm", [&] { return section("lm").get<lm::LmConfig>(); });
    c.lm_train = parse_section("lm_train", [&] { return lm_train_from(section("lm_train")); });
    c.sae = parse_section("sae", [&] { return section("sae").get<sae::SaeTrainConfig>(); });
    parse_section("probe", [&] {
        const auto p = section("probe");
        c.probe = p.get<probe::ProbeConfig>();
        c.k = p.at("k").get<std::size_t>();
        return 0;
    });
    c.ssv = parse_section("ssv", [&] { return section("ssv").get<ssv::SsvTrainConfig>(); });
    c.steer = parse_section("steer", [&] { return steer_from(section("steer")); });
    parse_section("eval", [&] {
        const auto e = section("eval");
        c.eval.max_new = e.at("max_new").get<std::size_t>();
        c.eval.target_label = e.at("target_label").get<int>();
        c.eval.min_prompts = e.at("min_prompts").get<std::size_t>();
        c.eval.seed = e.at("seed").get<std::uint64_t>();
        for (const auto& l : e.at("lambdas")) {
            if (!l.is_number()) throw ConfigError("eval.lambdas: expected numbers");
            c.lambdas.clear();
        }
        c.lambdas = e.at("lambdas").get<std::vector<double>>();
        return 0;
    });
    c.validate();
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form section.field=value");
    const auto path = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty field name");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        if (!node->contains(key)) (*node)[key] = json::object();
        node = &(*node)[key];
        if (!node->is_object()) throw ConfigError("override path " + path + " passes through a non-object");
        start = dot + 1;
    }
}

RunConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
    json j = json::object();
    if (file) {
        std::ifstream in(*file);
        if (!in) throw ConfigError("cannot open config file " + file->string());
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("config file " + file->string() + " is not valid JSON: " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j);
}

// ------------------------------------------------------------------ layout

fs::path Layout::corpus(const std::string& part, corpus::Style style) const {
    return root / "corpus" / (part + "_" + corpus::style_name(style) + ".jsonl");
}

fs::path Layout::acts(const std::string& part, corpus::Style style) const {
    return root / "acts" / (part + "_" + corpus::style_name(style));
}

fs::path Layout::vector(const std::string& variant) const { return root / "vectors" / (variant + ".json"); }
fs::path Layout::history(const std::string& variant) const { return root / "vectors" / (variant + "_history.csv"); }

fs::path Layout::direction(baselines::Method m) const {
    return root / "baselines" / (baselines::method_name(m) + ".json");
}

fs::path Layout::generations(const std::string& tag) const { return root / "generations" / (tag + ".jsonl"); }
fs::path Layout::report(const std::string& tag) const { return root / "reports" / (tag + ".json"); }

// ------------------------------------------------------------------ stages

void gen_corpus(const Context& ctx) {
    const auto& c = ctx.config;
    const auto& L = ctx.layout;
    json manifest = {{"config", corpus_json(c.corpus)}, {"seed", c.seed}};
    corpus::Split splits[2];
    for (auto style : {corpus::Style::A, corpus::Style::B}) {
        const bool a = style == corpus::Style::A;
        const auto texts = corpus::generate_corpus(c.stage_seed(a ? kCorpusA : kCorpusB, 0), c.corpus.n_texts, style,
                                                   c.corpus.strength, c.corpus.gen);
        auto s = corpus::split(texts, c.corpus.train_fraction, c.stage_seed(a ? kSplitA : kSplitB, 0));
        fs::create_directories(L.corpus("train", style).parent_path());
        corpus::write_jsonl(L.corpus("train", style), s.train);
        corpus::write_jsonl(L.corpus("test", style), s.test);
        manifest[corpus::style_name(style)] = {{"train", corpus::corpus_hash(s.train)}, {"test", corpus::corpus_hash(s.test)}};
        splits[a ? 0 : 1] = std::move(s);
    }
    corpus::write_vocab(L.vocab(), corpus::World::standard().vocab());
    write_json(L.corpus_manifest(), manifest);

    const auto judge = eval::train_judge(concat(splits[0].train, splits[1].train), concat(splits[0].test, splits[1].test),
                                         corpus::World::standard().vocab().size());
    eval::require_reliable(judge);
    write_json(L.judge(), eval::to_json(judge));
    log(ctx, "corpus: " + std::to_string(splits[0].train.size() + splits[1].train.size()) + " train / " +
                 std::to_string(splits[0].test.size() + splits[1].test.size()) + " test texts; judge held-out accuracy " +
                 fmt(judge.heldout_accuracy));
}

void train_lm(const Context& ctx) {
    const auto& c = ctx.config;
    const auto a = load_split(ctx.layout, corpus::Style::A);
    const auto b = load_split(ctx.layout, corpus::Style::B);
    const auto train = concat(a.train, b.train);
    const auto test = concat(a.test, b.test);
    auto cfg = c.lm;
    cfg.seed = c.stage_seed(kLmInit, cfg.seed);
    auto opts = c.lm_train;
    opts.seed = c.stage_seed(kLmTrain, opts.seed);
    std::size_t last_epoch = 0;
    const auto params = lm::train_lm(train, cfg, opts, [&](const lm::TrainProgress& p) {
        if (p.epoch != last_epoch) {
            last_epoch = p.epoch;
            log(ctx, "lm: epoch " + std::to_string(p.epoch) + " loss " + fmt(p.loss));
        }
    });
    const double ce = lm::cross_entropy(params, test);
    const double uni = lm::unigram_cross_entropy(train, test, cfg.vocab_size);
    lm::save_params(params, ctx.layout.lm(), {{"corpus_hash", corpus::corpus_hash(train)}, {"test_ce", ce}, {"unigram_ce", uni}});
    log(ctx, "lm: held-out cross-entropy " + fmt(ce) + " nats (unigram " + fmt(uni) + ")");
}

void dump_activations(const Context& ctx) {
    const auto a = load_split(ctx.layout, corpus::Style::A);
    json meta;
    const auto params = lm::load_params(ctx.layout.lm(), &meta);
    const auto b = load_split(ctx.layout, corpus::Style::B);
    require_match("LM", meta.at("corpus_hash").get<std::string>(), corpus::corpus_hash(concat(a.train, b.train)));
    const auto layer = params.config.hook_layer;
    fs::create_directories(ctx.layout.acts("train", corpus::Style::A).parent_path());
    for (const auto& [part, texts] : {std::pair{std::string("train"), &a.train}, std::pair{std::string("test"), &a.test}}) {
        const auto batch = lm::dump_activations(params, *texts, layer);
        lm::save_activations(batch, ctx.layout.acts(part, corpus::Style::A));
        log(ctx, "activations: " + part + " " + std::to_string(batch.size()) + " x " + std::to_string(batch.dim()) +
                     " at layer " + std::to_string(layer));
    }
}

void train_sae(const Context& ctx) {
    const auto a = load_split(ctx.layout, corpus::Style::A);
    const auto params = lm::load_params(ctx.layout.lm());
    const auto acts = load_acts(ctx.layout, "train", params, a.train);
    auto cfg = ctx.config.sae;
    cfg.seed = ctx.config.stage_seed(kSae, cfg.seed);
    sae::SaeTrainReport report;
    const auto s = sae::train_sae(acts.rows, cfg, &report);
    const json meta = {{"lm_hash", params.hash()},
                       {"acts_hash", file_hash(nd::with_suffix(ctx.layout.acts("train", corpus::Style::A), ".bin"))},
                       {"beta", cfg.beta},
                       {"final_mse", report.final_mse},
                       {"final_l0", report.final_l0},
                       {"input_variance", report.input_variance}};
    sae::save_params(s, ctx.layout.sae(), meta);
    log(ctx, "sae: held-out MSE " + fmt(report.final_mse) + " (per-dim variance " + fmt(report.input_variance) + "), L0 " +
                 fmt(report.final_l0));
}

void select_dims(const Context& ctx) {
    const auto a = load_core(ctx);
    const auto train = load_acts(ctx.layout, "train", a.lm, a.style_a.train);
    const auto test = load_acts(ctx.layout, "test", a.lm, a.style_a.test);
    const auto codes = sae::encode_rows(a.sae, train.rows);
    const auto test_codes = sae::encode_rows(a.sae, test.rows);
    const auto scores = probe::f_scores(codes, train.labels);
    const auto subspace = probe::select_subspace(scores, codes, ctx.config.k);
    auto pc = ctx.config.probe;
    pc.seed = ctx.config.stage_seed(kProbe, pc.seed);
    const auto ensemble = probe::train_probe_ensemble(probe::standardize(subspace, codes), train.labels, pc);
    const auto direction = probe::concept_direction(ensemble, probe::standardize(subspace, test_codes), test.labels);
    auto j = probe::to_artifact(subspace, ensemble, direction);
    j["sae_hash"] = a.sae.hash();
    j["lm_hash"] = a.lm.hash();
    j["mean_accuracy"] = ensemble.mean_accuracy();
    write_json(ctx.layout.probe(), j);
    eval::write_heatmap_csv(eval::heatmap_export(codes, train.labels, 32), (ctx.layout.root / "heatmap_sae.csv").string());
    eval::write_heatmap_csv(eval::heatmap_export(train.rows, train.labels, 32), (ctx.layout.root / "heatmap_residual.csv").string());
    log(ctx, "probe: k " + std::to_string(subspace.k()) + ", M " + std::to_string(ensemble.M()) + ", mean accuracy " +
                 fmt(ensemble.mean_accuracy()) + ", d_steer " + std::to_string(direction.d_steer));
}

void learn_ssv(const Context& ctx) {
    const auto a = load_core(ctx);
    const auto p = load_probe(ctx, a);
    const auto centroids = ssv::centroids(p.train_codes, p.train_acts.labels);
    auto init = ssv::init_vector(centroids, p.artifact.subspace, p.artifact.direction.d_steer);
    init.lm_hash = a.lm.hash();
    init.sae_hash = a.sae.hash();
    write_json(ctx.layout.vector("init"), ssv::to_json(init));
    auto cfg = ctx.config.ssv;
    cfg.seed = ctx.config.stage_seed(kSsv, cfg.seed);
    const auto result = ssv::optimize(init, ssv::twin_pairs(a.style_a.train), a.lm, a.sae, centroids, cfg);
    write_json(ctx.layout.vector("ssv"), ssv::to_json(result.vector));
    ssv::write_history_csv(result.history, ctx.layout.history("ssv").string());
    log(ctx, "ssv: d_steer " + std::to_string(init.d_steer()) + ", loss " + fmt(result.history.front().total) + " -> " +
                 fmt(result.history.back().total) + ", |v| " + fmt(result.vector.norm()));
}

fs::path steer(const Context& ctx, const SteerRequest& request) {
    const auto a = load_core(ctx);
    const auto p = prepare(ctx, a, request);
    lm::GenerateOptions gen;
    gen.max_new = ctx.config.eval.max_new;
    const auto path = ctx.layout.generations(tag_for(request));
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path.string());
    for (const auto& prompt : prompts(ctx, a, request.style)) {
        out << json(p->intervention.generate(a.lm, prompt, request.lambda_scale, gen)).dump() << '\n';
    }
    log(ctx, "steer: wrote " + path.string());
    return path;
}

eval::EvalReport evaluate(const Context& ctx, const SteerRequest& request) {
    const auto a = load_core(ctx);
    return run_eval(ctx, a, request);
}

baselines::ResidualDirection build_baseline(const Context& ctx, baselines::Method method) {
    const auto a = load_split(ctx.layout, corpus::Style::A);
    const auto params = lm::load_params(ctx.layout.lm());
    const auto acts = load_acts(ctx.layout, "train", params, a.train);
    baselines::ResidualDirection d;
    switch (method) {
        case baselines::Method::caa: d = baselines::caa(acts); break;
        case baselines::Method::repe: {
            const auto [pos, neg] = baselines::paired_rows(acts);
            d = baselines::repe(pos, neg);
            d.lm_hash = params.hash();
            break;
        }
        case baselines::Method::top_pc: d = baselines::top_pc(acts); break;
        case baselines::Method::iti_lite: d = baselines::iti_lite(acts); break;
    }
    write_json(ctx.layout.direction(method), baselines::to_json(d));
    return d;
}

AblateVariant parse_variant(const std::string& name) {
    if (name == "no-train") return AblateVariant::no_train;
    if (name == "no-lm-loss") return AblateVariant::no_lm_loss;
    if (name == "lambda-sweep") return AblateVariant::lambda_sweep;
    if (name == "plain-reinsert") return AblateVariant::plain_reinsert;
    throw ConfigError("unknown ablation variant '" + name + "'");
}

std::vector<eval::EvalReport> ablate(const Context& ctx, AblateVariant variant) {
    const auto a = load_core(ctx);
    const double lambda = ctx.config.steer.lambda_scale;
    std::vector<eval::EvalReport> reports;
    std::string name;
    switch (variant) {
        case AblateVariant::no_train:
            name = "no-train";
            reports.push_back(run_eval(ctx, a, {"init", lambda, true, corpus::Style::A}));
            break;
        case AblateVariant::no_lm_loss: {
            name = "no-lm-loss";
            const auto p = load_probe(ctx, a);
            const auto centroids = ssv::centroids(p.train_codes, p.train_acts.labels);
            const auto init = load_vector(ctx, a, "init");
            auto cfg = ctx.config.ssv;
            cfg.seed = ctx.config.stage_seed(kSsv, cfg.seed);
            cfg.lambda_lm = 0.0;
            const auto result = ssv::optimize(init, ssv::twin_pairs(a.style_a.train), a.lm, a.sae, centroids, cfg);
            write_json(ctx.layout.vector("no-lm"), ssv::to_json(result.vector));
            ssv::write_history_csv(result.history, ctx.layout.history("no-lm").string());
            reports.push_back(run_eval(ctx, a, {"no-lm", lambda, true, corpus::Style::A}));
            break;
        }
        case AblateVariant::lambda_sweep:
            name = "lambda-sweep";
            for (double l : ctx.config.lambdas) reports.push_back(run_eval(ctx, a, {"ssv", l, true, corpus::Style::A}));
            break;
        case AblateVariant::plain_reinsert:
            name = "plain-reinsert";
            reports.push_back(run_eval(ctx, a, {"ssv", 0.0, false, corpus::Style::A}));
            reports.push_back(run_eval(ctx, a, {"ssv", lambda, false, corpus::Style::A}));
            break;
    }
    write_reports_csv(ctx.layout.root / "reports" / ("ablate_" + name + ".csv"), reports);
    return reports;
}

std::vector<eval::EvalReport> compare(const Context& ctx) {
    const auto a = load_core(ctx);
    std::vector<eval::EvalReport> reports;
    for (const std::string method : {"ssv", "caa", "repe", "top_pc", "iti_lite"}) {
        for (double l : ctx.config.lambdas) reports.push_back(run_eval(ctx, a, {method, l, true, corpus::Style::A}));
    }
    write_reports_csv(ctx.layout.compare(), reports);
    return reports;
}

// --------------------------------------------------------------- artifacts

Artifacts load_core(const Context& ctx) {
    Artifacts a;
    a.style_a = load_split(ctx.layout, corpus::Style::A);
    a.style_b = load_split(ctx.layout, corpus::Style::B);
    const auto train_hash = corpus::corpus_hash(concat(a.style_a.train, a.style_b.train));
    a.judge = eval::judge_from_json(read_json(ctx.layout.judge()));
    require_match("judge", a.judge.trained_on, train_hash);
    json lm_meta;
    a.lm = lm::load_params(ctx.layout.lm(), &lm_meta);
    require_match("LM", lm_meta.at("corpus_hash").get<std::string>(), train_hash);
    json sae_meta;
    a.sae = sae::load_params(ctx.layout.sae(), &sae_meta);
    require_match("SAE", sae_meta.at("lm_hash").get<std::string>(), a.lm.hash());
    require_match("SAE", sae_meta.at("acts_hash").get<std::string>(),
                  file_hash(nd::with_suffix(ctx.layout.acts("train", corpus::Style::A), ".bin")));
    return a;
}

std::vector<corpus::Tokens> prompts(const Context& ctx, const Artifacts& a, corpus::Style style) {
    const auto& test = style == corpus::Style::A ? a.style_a.test : a.style_b.test;
    const int source = 1 - ctx.config.eval.target_label;
    std::vector<corpus::Tokens> out;
    for (const auto& t : test) {
        if (t.label != source) continue;
        out.emplace_back(t.token_ids.begin(), t.token_ids.begin() + static_cast<std::ptrdiff_t>(ctx.config.corpus.prompt_len));
        if (out.size() == ctx.config.corpus.n_prompts) break;
    }
    return out;
}

ssv::SteeringVector load_vector(const Context& ctx, const Artifacts& a, const std::string& variant) {
    auto v = ssv::vector_from_json(read_json(ctx.layout.vector(variant)));
    ssv::check_lineage(v, a.lm, a.sae);
    const auto probe_j = read_json(ctx.layout.probe());
    require_match("steering vector " + variant, v.i_hash, probe::from_artifact(probe_j).subspace.hash());
    return v;
}

}  // namespace saessv::app
