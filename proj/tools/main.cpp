#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "app.hpp"
#include "saessv/error.hpp"

namespace app = saessv::app;

int main(int argc, char** argv) {
    CLI::App cli{"Supervised sparse steering on a toy language model"};
    cli.require_subcommand(1);

    std::string out_dir = "run";
    std::string config_file;
    std::vector<std::string> overrides;
    bool quiet = false;
    cli.add_option("--out-dir", out_dir, "Artifact directory")->capture_default_str();
    cli.add_option("--config", config_file, "JSON run configuration");
    cli.add_option("--set", overrides, "Override one field, e.g. --set ssv.lr=0.01")->take_all();
    cli.add_flag("--quiet", quiet, "Suppress progress output");

    auto* gen = cli.add_subcommand("gen-corpus", "Sample both style corpora, split them, train the judge");
    auto* train_lm = cli.add_subcommand("train-lm", "Train the toy LM on both styles");
    auto* dump = cli.add_subcommand("dump-activations", "Pooled hook-layer activations for style A");
    auto* train_sae = cli.add_subcommand("train-sae", "Train the SAE on training activations");
    auto* select = cli.add_subcommand("select-dims", "F-score subspace, probe ensemble, concept direction");
    auto* learn = cli.add_subcommand("learn-ssv", "Initialize and optimize the steering vector");

    app::SteerRequest request;
    std::string style = "A";
    bool plain = false;
    auto add_request = [&](CLI::App* sub, bool with_method) {
        if (with_method) {
            sub->add_option("--method", request.method, "ssv | init | no-lm | none | caa | repe | top_pc | iti_lite")
                ->capture_default_str();
        }
        sub->add_option("--lambda", request.lambda_scale, "Steering scale")->capture_default_str();
        sub->add_option("--style", style, "Prompt style")->check(CLI::IsMember({"A", "B"}))->capture_default_str();
        sub->add_flag("--plain", plain, "Plain reinsertion instead of error-corrected");
        sub->add_flag("--error-corrected", "Error-corrected reinsertion (default)");
    };
    auto* steer = cli.add_subcommand("steer", "Generate continuations for the prompt set");
    add_request(steer, true);
    auto* evaluate = cli.add_subcommand("evaluate", "Judge steered vs unsteered continuations");
    add_request(evaluate, true);

    std::string baseline_method = "caa";
    auto* baseline = cli.add_subcommand("baseline", "Build a residual-stream baseline direction and evaluate it");
    baseline->add_option("--method", baseline_method, "caa | repe | top_pc | iti_lite")
        ->check(CLI::IsMember({"caa", "repe", "top_pc", "iti_lite", "CAA", "RePe", "TopPC", "ITI-lite"}))
        ->capture_default_str();
    add_request(baseline, false);

    std::string variant;
    auto* ablate = cli.add_subcommand("ablate", "Ablation variants of the steering vector");
    ablate->add_option("--variant", variant, "no-train | no-lm-loss | lambda-sweep | plain-reinsert")->required();
    auto* compare = cli.add_subcommand("compare", "All methods over the lambda grid into one CSV");

    CLI11_PARSE(cli, argc, argv);

    try {
        app::Context ctx;
        ctx.config = app::load_config(config_file.empty() ? std::nullopt : std::optional<app::fs::path>(config_file), overrides);
        ctx.layout.root = out_dir;
        ctx.verbose = !quiet;
        request.style = saessv::corpus::parse_style(style);
        request.error_corrected = !plain;
        if (baseline->parsed() || evaluate->parsed() || steer->parsed()) {
            if (!(request.lambda_scale >= 0.0 && request.lambda_scale <= 10.0)) {
                throw saessv::ConfigError("--lambda must lie in [0, 10]");
            }
        }

        if (gen->parsed()) app::gen_corpus(ctx);
        if (train_lm->parsed()) app::train_lm(ctx);
        if (dump->parsed()) app::dump_activations(ctx);
        if (train_sae->parsed()) app::train_sae(ctx);
        if (select->parsed()) app::select_dims(ctx);
        if (learn->parsed()) app::learn_ssv(ctx);
        if (steer->parsed()) app::steer(ctx, request);
        if (evaluate->parsed()) app::evaluate(ctx, request);
        if (baseline->parsed()) {
            const auto method = saessv::baselines::parse_method(baseline_method);
            app::build_baseline(ctx, method);
            request.method = saessv::baselines::method_name(method);
            app::evaluate(ctx, request);
        }
        if (ablate->parsed()) app::ablate(ctx, app::parse_variant(variant));
        if (compare->parsed()) app::compare(ctx);
    } catch (const saessv::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const saessv::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
