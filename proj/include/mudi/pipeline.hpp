#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mudi/coherence.hpp"
#include "mudi/corpus.hpp"
#include "mudi/generator.hpp"
#include "mudi/graph.hpp"
#include "mudi/metrics.hpp"
#include "mudi/pretrain.hpp"

namespace mudi {

// CLI orchestration: a validated run configuration, per-stage entry points,
// checkpoint hand-off with config-hash verification, and the end-to-end
// pipeline: annotate -> build-graphs -> pretrain -> finetune ->
// train-generator -> generate -> evaluate.

struct RunConfig {
    std::uint64_t seed = 42;

    struct Data {
        std::string corpus;
        std::optional<std::size_t> limit;
    } data;

    struct Graph {
        std::string provider = "fallback";
        int dim = 64;
        int d = 3;
        double keep_prob = 0.3;
        double quantile = 0.75;
    } graph;

    struct Encoder {
        int per_head_dim = 16;
        int out_dim = 64;
        int num_layers = 2;
        int num_heads = 4;
        double lambda = 0.5;
        bool lambda_learnable = false;
        double leaky_slope = 0.2;
        std::string combine = "separate";
        bool self_loops = false;
    } encoder;

    struct Pretrain {
        int epochs = 200;
        double lr = 3e-4;
        int batch_size = 4;
        int num_pairs = 8;
        int head_hidden = 32;
        double holdout_fraction = 0.2;
    } pretrain;

    struct Coherence {
        int epochs = 60;
        double lr = 1e-3;
        int batch_size = 4;
        int fusion_heads = 4;
        int head_hidden = 32;
        std::vector<double> weights = {1.0, 0.5, 0.5, 1.0};
        double cb_beta = 0.999;
        double negative_ratio = 1.0;
        double type_threshold = 0.5;
        double holdout_fraction = 0.2;
    } coherence;

    struct Generator {
        int model_dim = 128;
        int ffn_dim = 256;
        int enc_layers = 2;
        int dec_layers = 2;
        int num_heads = 4;
        int max_src_len = 192;
        int max_tgt_len = 48;
        std::string variant = "sp_emb";
        double tau = 0.2;
        int pc_epochs = 20;
        int epochs = 500;
        double lr = 1e-3;
        int batch_size = 8;
        std::string decode = "greedy";
    } generator;

    struct Evaluate {
        std::vector<std::string> metrics = {"bleu", "rouge", "dist", "ent", "usr"};
    } evaluate;

    nlohmann::json to_json() const;
    // Unknown keys anywhere in the document are rejected.
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path);

    std::string hash() const; // FNV-64 of the canonical serialization, hex

    GatConfig encoder_gat(bool with_relations) const;
    PretrainConfig pretrain_config() const;
    CoherenceConfig coherence_config() const;
    GeneratorConfig generator_config() const;
};

// --- stages -----------------------------------------------------------------

void stage_annotate(const RunConfig& config, const std::string& in_path,
                    const std::string& out_path);

void stage_build_graphs(const RunConfig& config, const std::string& corpus_path,
                        const std::string& out_dir);

void stage_pretrain(const RunConfig& config, const std::string& graphs_dir,
                    const std::string& out_dir);

void stage_finetune(const RunConfig& config, const std::string& graphs_dir,
                    const std::string& pretrain_dir, const std::string& out_dir);

void stage_train_generator(const RunConfig& config, const std::string& corpus_path,
                           const std::string& graphs_dir,
                           const std::string& coherence_dir, const std::string& out_dir);

// One generation per bot response position in the corpus; hypothesis keys are
// "<dialogue_id>#<response_index>".
std::vector<GenerationResult> generate_for_corpus(
    const RunConfig& config, const std::vector<Dialogue>& corpus,
    const std::string& coherence_dir, const std::string& generator_dir,
    FusionMode mode, const DecodeSpec& decode);

void stage_generate(const RunConfig& config, const std::string& corpus_path,
                    const std::string& coherence_dir, const std::string& generator_dir,
                    const std::string& out_path, const std::string& mode = "attention");

// Aligns hypotheses with gold responses by key and evaluates. Personas come
// from `persona_corpus_path` when non-empty, else from the reference corpus.
EvalReport stage_evaluate(const RunConfig& config, const std::string& hyp_path,
                          const std::string& ref_corpus_path,
                          const std::string& report_path, NliAdapter* nli = nullptr,
                          const std::string& persona_corpus_path = "");

// Full pipeline into a run directory; stages with existing outputs are
// skipped (resume). Returns the final report.
EvalReport run_pipeline(const RunConfig& config, const std::string& run_dir);

// Encoder ablation: one report per fusion mode.
std::map<std::string, EvalReport> encoder_ablation(const RunConfig& config,
                                                   const std::string& run_dir,
                                                   const std::vector<std::string>& modes);

// Single ad-hoc generation for the `generate` CLI subcommand.
GenerationResult generate_single(const RunConfig& config,
                                 const std::vector<std::string>& persona,
                                 const std::vector<std::string>& context,
                                 const std::string& coherence_dir,
                                 const std::string& generator_dir,
                                 const DecodeSpec& decode);

// Context file: JSONL of {"speaker": "USER"|"BOT", "text": ...}, alternating,
// starting and ending with USER.
std::vector<std::string> load_context_file(const std::string& path);
std::vector<std::string> load_persona_file(const std::string& path);

} // namespace mudi
