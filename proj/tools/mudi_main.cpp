#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mudi/errors.hpp"
#include "mudi/pipeline.hpp"

namespace {

// Config file first, then command-line overrides on top.
struct ConfigArgs {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
};

mudi::RunConfig resolve_config(const std::string& config_path) {
    if (config_path.empty()) return mudi::RunConfig{};
    return mudi::RunConfig::load(config_path);
}

void add_config_option(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON run configuration file");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mudi: discourse-relation dialogue graphs for personalized generation"};
    app.require_subcommand(1);

    ConfigArgs cfg;
    std::string in_path, out_path, corpus_path, graphs_dir, init_dir, coherence_dir,
        generator_dir, hyp_path, ref_path, persona_path, context_path, report_path,
        run_dir, mode = "attention", decode = "greedy", weights_csv, metrics_csv,
        variant, provider;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t limit = 0;
    bool limit_set = false;
    int d_override = 0;
    double keep_prob = -1.0, quantile = -1.0, tau = -1.0;
    int epochs = -1;
    double lr = -1.0;
    std::vector<std::string> modes = {"attention", "add", "context_only",
                                      "persona_only", "random", "none"};

    auto apply_common = [&](mudi::RunConfig& config) {
        if (seed_set) config.seed = seed;
        if (limit_set) config.data.limit = limit;
        if (d_override > 0) config.graph.d = d_override;
        if (keep_prob >= 0.0) config.graph.keep_prob = keep_prob;
        if (quantile >= 0.0) config.graph.quantile = quantile;
        if (!provider.empty()) config.graph.provider = provider;
        if (tau >= 0.0) config.generator.tau = tau;
        if (!variant.empty()) config.generator.variant = variant;
        if (!decode.empty()) config.generator.decode = decode;
        if (!weights_csv.empty()) {
            std::vector<double> w;
            std::size_t pos = 0;
            std::string rest = weights_csv;
            while (!rest.empty()) {
                pos = rest.find(',');
                w.push_back(std::stod(rest.substr(0, pos)));
                if (pos == std::string::npos) break;
                rest = rest.substr(pos + 1);
            }
            config.coherence.weights = w;
        }
        if (!metrics_csv.empty()) {
            config.evaluate.metrics.clear();
            std::size_t pos = 0;
            std::string rest = metrics_csv;
            while (!rest.empty()) {
                pos = rest.find(',');
                config.evaluate.metrics.push_back(rest.substr(0, pos));
                if (pos == std::string::npos) break;
                rest = rest.substr(pos + 1);
            }
        }
        // Re-validate after overrides.
        config = mudi::RunConfig::from_json(config.to_json());
    };

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "global RNG seed")->each([&](const std::string&) {
            seed_set = true;
        });
    };

    // annotate
    auto* cmd_annotate = app.add_subcommand("annotate", "attach coherence relations");
    add_config_option(cmd_annotate, cfg);
    cmd_annotate->add_option("--in", in_path, "input dialogue JSONL")->required();
    cmd_annotate->add_option("--out", out_path, "annotated output JSONL")->required();
    cmd_annotate->add_option("--limit", limit, "read at most N dialogues")
        ->each([&](const std::string&) { limit_set = true; });
    add_seed(cmd_annotate);

    // build-graphs
    auto* cmd_graphs = app.add_subcommand("build-graphs", "construct dialogue graphs");
    add_config_option(cmd_graphs, cfg);
    cmd_graphs->add_option("--in", in_path, "annotated corpus JSONL")->required();
    cmd_graphs->add_option("--out", out_path, "output graph directory")->required();
    cmd_graphs->add_option("--d", d_override, "order window (d = k+1)");
    cmd_graphs->add_option("--keep-prob", keep_prob, "pruning keep probability");
    cmd_graphs->add_option("--quantile", quantile, "high-frequency quantile");
    cmd_graphs->add_option("--provider", provider, "embedding provider fallback|adapter");
    add_seed(cmd_graphs);

    // pretrain
    auto* cmd_pre = app.add_subcommand("pretrain", "self-supervised graph pre-training");
    add_config_option(cmd_pre, cfg);
    cmd_pre->add_option("--graphs", graphs_dir, "graph directory")->required();
    cmd_pre->add_option("--out", out_path, "checkpoint output directory")->required();
    cmd_pre->add_option("--epochs", epochs, "training epochs");
    cmd_pre->add_option("--lr", lr, "learning rate");
    add_seed(cmd_pre);

    // finetune
    auto* cmd_fine = app.add_subcommand("finetune", "discourse-coherence fine-tuning");
    add_config_option(cmd_fine, cfg);
    cmd_fine->add_option("--graphs", graphs_dir, "graph directory")->required();
    cmd_fine->add_option("--init", init_dir, "pretrain checkpoint directory")->required();
    cmd_fine->add_option("--out", out_path, "checkpoint output directory")->required();
    cmd_fine->add_option("--weights", weights_csv, "alpha,beta,gamma,delta");
    cmd_fine->add_option("--epochs", epochs, "training epochs");
    add_seed(cmd_fine);

    // train-generator
    auto* cmd_gen = app.add_subcommand("train-generator", "train the response generator");
    add_config_option(cmd_gen, cfg);
    cmd_gen->add_option("--corpus", corpus_path, "annotated corpus JSONL")->required();
    cmd_gen->add_option("--graphs", graphs_dir, "graph directory (for meta)")->required();
    cmd_gen->add_option("--coherence-ckpt", coherence_dir, "coherence checkpoint dir")
        ->required();
    cmd_gen->add_option("--out", out_path, "checkpoint output directory")->required();
    cmd_gen->add_option("--variant", variant, "sp|emb|sp_emb");
    cmd_gen->add_option("--tau", tau, "DWA threshold");
    cmd_gen->add_option("--epochs", epochs, "training epochs");
    add_seed(cmd_gen);

    // generate
    auto* cmd_generate = app.add_subcommand("generate", "generate a personalized response");
    add_config_option(cmd_generate, cfg);
    cmd_generate->add_option("--persona-file", persona_path, "persona sentences, one per line")
        ->required();
    cmd_generate->add_option("--context-file", context_path,
                             "dialogue context JSONL ({speaker, text} per line)")
        ->required();
    cmd_generate->add_option("--ckpt", run_dir, "run checkpoint root (ckpt/)")->required();
    cmd_generate->add_option("--decode", decode, "greedy | beam:K | sample:T:SEED");
    cmd_generate->add_option("--out", out_path, "append the result JSONL here");
    add_seed(cmd_generate);

    // generate-corpus (batch generation used by run/ablate internally)
    auto* cmd_gencorp = app.add_subcommand("generate-corpus",
                                           "generate responses for every corpus position");
    add_config_option(cmd_gencorp, cfg);
    cmd_gencorp->add_option("--corpus", corpus_path, "annotated corpus JSONL")->required();
    cmd_gencorp->add_option("--coherence-ckpt", coherence_dir, "coherence ckpt dir")
        ->required();
    cmd_gencorp->add_option("--generator-ckpt", generator_dir, "generator ckpt dir")
        ->required();
    cmd_gencorp->add_option("--out", out_path, "output JSONL")->required();
    cmd_gencorp->add_option("--mode", mode, "fusion mode (ablations)");
    cmd_gencorp->add_option("--decode", decode, "decode spec");
    add_seed(cmd_gencorp);

    // evaluate
    auto* cmd_eval = app.add_subcommand("evaluate", "score generated responses");
    add_config_option(cmd_eval, cfg);
    cmd_eval->add_option("--hyp", hyp_path, "hypothesis JSONL")->required();
    cmd_eval->add_option("--ref", ref_path, "reference corpus JSONL")->required();
    cmd_eval->add_option("--persona", persona_path,
                         "persona source (defaults to the reference corpus)");
    cmd_eval->add_option("--metrics", metrics_csv, "comma list: bleu,rouge,dist,ent,usr,cscore");
    cmd_eval->add_option("--report", report_path, "report JSON output")->required();

    // run
    auto* cmd_run = app.add_subcommand("run", "full pipeline into a run directory");
    add_config_option(cmd_run, cfg);
    cmd_run->add_option("--out", run_dir, "run directory")->required();
    add_seed(cmd_run);

    // ablate
    auto* cmd_ablate = app.add_subcommand("ablate", "encoder ablation reports");
    add_config_option(cmd_ablate, cfg);
    cmd_ablate->add_option("--out", run_dir, "run directory with trained checkpoints")
        ->required();
    cmd_ablate->add_option("--modes", modes, "fusion modes to evaluate");
    add_seed(cmd_ablate);

    CLI11_PARSE(app, argc, argv);

    try {
        mudi::RunConfig config = resolve_config(cfg.config_path);
        if (epochs >= 0) {
            if (app.got_subcommand(cmd_pre)) config.pretrain.epochs = epochs;
            if (app.got_subcommand(cmd_fine)) config.coherence.epochs = epochs;
            if (app.got_subcommand(cmd_gen)) config.generator.epochs = epochs;
        }
        if (lr > 0 && app.got_subcommand(cmd_pre)) config.pretrain.lr = lr;
        apply_common(config);

        if (app.got_subcommand(cmd_annotate)) {
            mudi::stage_annotate(config, in_path, out_path);
        } else if (app.got_subcommand(cmd_graphs)) {
            mudi::stage_build_graphs(config, in_path, out_path);
        } else if (app.got_subcommand(cmd_pre)) {
            mudi::stage_pretrain(config, graphs_dir, out_path);
        } else if (app.got_subcommand(cmd_fine)) {
            mudi::stage_finetune(config, graphs_dir, init_dir, out_path);
        } else if (app.got_subcommand(cmd_gen)) {
            mudi::stage_train_generator(config, corpus_path, graphs_dir, coherence_dir,
                                        out_path);
        } else if (app.got_subcommand(cmd_generate)) {
            auto persona = mudi::load_persona_file(persona_path);
            auto context = mudi::load_context_file(context_path);
            auto result = mudi::generate_single(config, persona, context,
                                                run_dir + "/coherence", run_dir + "/gen",
                                                mudi::decode_spec_from_string(decode));
            auto line = mudi::generation_to_json_line(result);
            std::cout << line << "\n";
            if (!out_path.empty()) {
                std::ofstream os(out_path, std::ios::app);
                os << line << '\n';
            }
        } else if (app.got_subcommand(cmd_gencorp)) {
            auto corpus = mudi::load_corpus(corpus_path, config.data.limit);
            auto results = mudi::generate_for_corpus(
                config, corpus, coherence_dir, generator_dir,
                mudi::fusion_mode_from_name(mode),
                mudi::decode_spec_from_string(decode));
            std::ofstream os(out_path);
            for (const auto& r : results) os << mudi::generation_to_json_line(r) << '\n';
            std::cout << "[generate-corpus] " << results.size() << " responses -> "
                      << out_path << "\n";
        } else if (app.got_subcommand(cmd_eval)) {
            auto report = mudi::stage_evaluate(config, hyp_path, ref_path, report_path,
                                               nullptr, persona_path);
            std::cout << report.to_json().dump(2) << "\n";
        } else if (app.got_subcommand(cmd_run)) {
            auto report = mudi::run_pipeline(config, run_dir);
            std::cout << report.to_json().dump(2) << "\n";
        } else if (app.got_subcommand(cmd_ablate)) {
            auto reports = mudi::encoder_ablation(config, run_dir, modes);
            for (const auto& [m, r] : reports) {
                std::cout << m << ": bleu1=" << (r.bleu1 ? *r.bleu1 : -1.0) << "\n";
            }
        }
    } catch (const mudi::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
