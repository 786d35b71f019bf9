#include "mudi/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <unistd.h>

#include <httplib.h>

#include "mudi/errors.hpp"
#include "mudi/text.hpp"

namespace mudi {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

namespace {

void reject_unknown(const json& j, const std::string& section,
                    const std::set<std::string>& known) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) {
            throw ConfigError("unknown config key '" + key + "' in " +
                              (section.empty() ? "top level" : section));
        }
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

json RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["data"] = {{"corpus", data.corpus}};
    if (data.limit) j["data"]["limit"] = *data.limit;
    j["graph"] = {{"provider", graph.provider}, {"dim", graph.dim},       {"d", graph.d},
                  {"keep_prob", graph.keep_prob}, {"quantile", graph.quantile}};
    j["encoder"] = {{"per_head_dim", encoder.per_head_dim},
                    {"out_dim", encoder.out_dim},
                    {"num_layers", encoder.num_layers},
                    {"num_heads", encoder.num_heads},
                    {"lambda", encoder.lambda},
                    {"lambda_learnable", encoder.lambda_learnable},
                    {"leaky_slope", encoder.leaky_slope},
                    {"combine", encoder.combine},
                    {"self_loops", encoder.self_loops}};
    j["pretrain"] = {{"epochs", pretrain.epochs},
                     {"lr", pretrain.lr},
                     {"batch_size", pretrain.batch_size},
                     {"num_pairs", pretrain.num_pairs},
                     {"head_hidden", pretrain.head_hidden},
                     {"holdout_fraction", pretrain.holdout_fraction}};
    j["coherence"] = {{"epochs", coherence.epochs},
                      {"lr", coherence.lr},
                      {"batch_size", coherence.batch_size},
                      {"fusion_heads", coherence.fusion_heads},
                      {"head_hidden", coherence.head_hidden},
                      {"weights", coherence.weights},
                      {"cb_beta", coherence.cb_beta},
                      {"negative_ratio", coherence.negative_ratio},
                      {"type_threshold", coherence.type_threshold},
                      {"holdout_fraction", coherence.holdout_fraction}};
    j["generator"] = {{"model_dim", generator.model_dim},
                      {"ffn_dim", generator.ffn_dim},
                      {"enc_layers", generator.enc_layers},
                      {"dec_layers", generator.dec_layers},
                      {"num_heads", generator.num_heads},
                      {"max_src_len", generator.max_src_len},
                      {"max_tgt_len", generator.max_tgt_len},
                      {"variant", generator.variant},
                      {"tau", generator.tau},
                      {"pc_epochs", generator.pc_epochs},
                      {"epochs", generator.epochs},
                      {"lr", generator.lr},
                      {"batch_size", generator.batch_size},
                      {"decode", generator.decode}};
    j["evaluate"] = {{"metrics", evaluate.metrics}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    reject_unknown(j, "", {"seed", "data", "graph", "encoder", "pretrain", "coherence",
                           "generator", "evaluate"});
    read_field(j, "seed", c.seed);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d, "data", {"corpus", "limit"});
        read_field(d, "corpus", c.data.corpus);
        if (d.contains("limit") && !d.at("limit").is_null()) {
            c.data.limit = d.at("limit").get<std::size_t>();
        }
    }
    if (j.contains("graph")) {
        const auto& g = j.at("graph");
        reject_unknown(g, "graph", {"provider", "dim", "d", "keep_prob", "quantile"});
        read_field(g, "provider", c.graph.provider);
        read_field(g, "dim", c.graph.dim);
        read_field(g, "d", c.graph.d);
        read_field(g, "keep_prob", c.graph.keep_prob);
        read_field(g, "quantile", c.graph.quantile);
    }
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        reject_unknown(e, "encoder",
                       {"per_head_dim", "out_dim", "num_layers", "num_heads", "lambda",
                        "lambda_learnable", "leaky_slope", "combine", "self_loops"});
        read_field(e, "per_head_dim", c.encoder.per_head_dim);
        read_field(e, "out_dim", c.encoder.out_dim);
        read_field(e, "num_layers", c.encoder.num_layers);
        read_field(e, "num_heads", c.encoder.num_heads);
        read_field(e, "lambda", c.encoder.lambda);
        read_field(e, "lambda_learnable", c.encoder.lambda_learnable);
        read_field(e, "leaky_slope", c.encoder.leaky_slope);
        read_field(e, "combine", c.encoder.combine);
        read_field(e, "self_loops", c.encoder.self_loops);
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        reject_unknown(p, "pretrain", {"epochs", "lr", "batch_size", "num_pairs",
                                       "head_hidden", "holdout_fraction"});
        read_field(p, "epochs", c.pretrain.epochs);
        read_field(p, "lr", c.pretrain.lr);
        read_field(p, "batch_size", c.pretrain.batch_size);
        read_field(p, "num_pairs", c.pretrain.num_pairs);
        read_field(p, "head_hidden", c.pretrain.head_hidden);
        read_field(p, "holdout_fraction", c.pretrain.holdout_fraction);
    }
    if (j.contains("coherence")) {
        const auto& co = j.at("coherence");
        reject_unknown(co, "coherence",
                       {"epochs", "lr", "batch_size", "fusion_heads", "head_hidden",
                        "weights", "cb_beta", "negative_ratio", "type_threshold",
                        "holdout_fraction"});
        read_field(co, "epochs", c.coherence.epochs);
        read_field(co, "lr", c.coherence.lr);
        read_field(co, "batch_size", c.coherence.batch_size);
        read_field(co, "fusion_heads", c.coherence.fusion_heads);
        read_field(co, "head_hidden", c.coherence.head_hidden);
        read_field(co, "weights", c.coherence.weights);
        read_field(co, "cb_beta", c.coherence.cb_beta);
        read_field(co, "negative_ratio", c.coherence.negative_ratio);
        read_field(co, "type_threshold", c.coherence.type_threshold);
        read_field(co, "holdout_fraction", c.coherence.holdout_fraction);
    }
    if (j.contains("generator")) {
        const auto& g = j.at("generator");
        reject_unknown(g, "generator",
                       {"model_dim", "ffn_dim", "enc_layers", "dec_layers", "num_heads",
                        "max_src_len", "max_tgt_len", "variant", "tau", "pc_epochs",
                        "epochs", "lr", "batch_size", "decode"});
        read_field(g, "model_dim", c.generator.model_dim);
        read_field(g, "ffn_dim", c.generator.ffn_dim);
        read_field(g, "enc_layers", c.generator.enc_layers);
        read_field(g, "dec_layers", c.generator.dec_layers);
        read_field(g, "num_heads", c.generator.num_heads);
        read_field(g, "max_src_len", c.generator.max_src_len);
        read_field(g, "max_tgt_len", c.generator.max_tgt_len);
        read_field(g, "variant", c.generator.variant);
        read_field(g, "tau", c.generator.tau);
        read_field(g, "pc_epochs", c.generator.pc_epochs);
        read_field(g, "epochs", c.generator.epochs);
        read_field(g, "lr", c.generator.lr);
        read_field(g, "batch_size", c.generator.batch_size);
        read_field(g, "decode", c.generator.decode);
    }
    if (j.contains("evaluate")) {
        const auto& e = j.at("evaluate");
        reject_unknown(e, "evaluate", {"metrics"});
        read_field(e, "metrics", c.evaluate.metrics);
    }

    // Field validation.
    if (c.graph.dim < 1 || c.graph.d < 1) throw ConfigError("graph.dim and graph.d must be >= 1");
    if (c.graph.keep_prob < 0.0 || c.graph.keep_prob > 1.0) {
        throw ConfigError("graph.keep_prob must be in [0,1]");
    }
    if (c.graph.quantile <= 0.0 || c.graph.quantile >= 1.0) {
        throw ConfigError("graph.quantile must be in (0,1)");
    }
    if (c.graph.provider != "fallback" && c.graph.provider != "adapter") {
        throw ConfigError("graph.provider must be fallback or adapter");
    }
    if (c.encoder.combine != "separate" && c.encoder.combine != "joint") {
        throw ConfigError("encoder.combine must be separate or joint");
    }
    if (c.coherence.weights.size() != 4) throw ConfigError("coherence.weights needs 4 entries");
    double wsum = 0;
    for (double w : c.coherence.weights) {
        if (w < 0) throw ConfigError("coherence.weights must be nonnegative");
        wsum += w;
    }
    if (wsum == 0) throw ConfigError("coherence.weights must not all be zero");
    if (c.generator.tau < 0.0 || c.generator.tau > 1.0) {
        throw ConfigError("generator.tau must be in [0,1]");
    }
    if (c.generator.model_dim % c.generator.num_heads != 0) {
        throw ConfigError("generator.model_dim must be divisible by num_heads");
    }
    variant_from_name(c.generator.variant);
    decode_spec_from_string(c.generator.decode);
    for (const auto& m : c.evaluate.metrics) {
        static const std::set<std::string> known = {"bleu", "rouge", "dist",
                                                    "ent",  "usr",   "cscore"};
        if (!known.count(m)) throw ConfigError("unknown metric in evaluate.metrics: " + m);
    }
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config JSON: ") + e.what());
    }
    return from_json(j);
}

std::string RunConfig::hash() const {
    std::string canon = to_json().dump();
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canon)));
    return std::string(buf);
}

GatConfig RunConfig::encoder_gat(bool with_relations) const {
    GatConfig g;
    g.in_dim = graph.dim;
    g.per_head_dim = encoder.per_head_dim;
    g.out_dim = encoder.out_dim;
    g.num_layers = encoder.num_layers;
    g.num_heads = encoder.num_heads;
    g.lambda_decay = encoder.lambda;
    g.lambda_learnable = encoder.lambda_learnable;
    g.leaky_slope = encoder.leaky_slope;
    g.use_relations = with_relations;
    g.combine = encoder.combine == "joint" ? ChannelCombine::Joint
                                           : ChannelCombine::Separate;
    g.self_loops = encoder.self_loops;
    return g;
}

PretrainConfig RunConfig::pretrain_config() const {
    PretrainConfig p;
    p.gat = encoder_gat(false);
    p.head_hidden = pretrain.head_hidden;
    p.num_pairs = pretrain.num_pairs;
    p.epochs = pretrain.epochs;
    p.lr = pretrain.lr;
    p.batch_size = pretrain.batch_size;
    p.holdout_fraction = pretrain.holdout_fraction;
    p.seed = seed;
    p.config_hash = hash();
    return p;
}

CoherenceConfig RunConfig::coherence_config() const {
    CoherenceConfig c;
    c.context_gat = encoder_gat(true);
    c.persona_gat = encoder_gat(false);
    c.emb_dim = encoder.out_dim;
    c.fusion_heads = coherence.fusion_heads;
    c.head_hidden = coherence.head_hidden;
    c.weights = {coherence.weights[0], coherence.weights[1], coherence.weights[2],
                 coherence.weights[3]};
    c.cb_beta = coherence.cb_beta;
    c.negative_ratio = coherence.negative_ratio;
    c.type_threshold = coherence.type_threshold;
    c.epochs = coherence.epochs;
    c.lr = coherence.lr;
    c.batch_size = coherence.batch_size;
    c.holdout_fraction = coherence.holdout_fraction;
    c.seed = seed;
    c.config_hash = hash();
    return c;
}

GeneratorConfig RunConfig::generator_config() const {
    GeneratorConfig g;
    g.model_dim = generator.model_dim;
    g.ffn_dim = generator.ffn_dim;
    g.enc_layers = generator.enc_layers;
    g.dec_layers = generator.dec_layers;
    g.num_heads = generator.num_heads;
    g.max_src_len = generator.max_src_len;
    g.max_tgt_len = generator.max_tgt_len;
    g.variant = variant_from_name(generator.variant);
    g.tau = generator.tau;
    g.coherence_dim = encoder.out_dim;
    g.pc_epochs = generator.pc_epochs;
    g.epochs = generator.epochs;
    g.lr = generator.lr;
    g.batch_size = generator.batch_size;
    g.seed = seed;
    g.config_hash = hash();
    g.decode = decode_spec_from_string(generator.decode);
    return g;
}

// ---------------------------------------------------------------------------
// Stage helpers
// ---------------------------------------------------------------------------

namespace {

void require_exists(const std::string& path, const std::string& stage,
                    const std::string& producer) {
    if (!fs::exists(path)) {
        throw StateError("stage '" + stage + "' requires " + path +
                         " (produced by stage '" + producer + "')");
    }
}

void verify_hash(const Checkpoint& ckpt, const RunConfig& config,
                 const std::string& context) {
    if (!ckpt.config_hash.empty() && ckpt.config_hash != config.hash()) {
        throw ConfigError("config hash mismatch at " + context + ": checkpoint " +
                          ckpt.config_hash + " vs current " + config.hash());
    }
}

std::string hyp_key(const std::string& dialogue_id, int response_index) {
    return dialogue_id + "#" + std::to_string(response_index);
}

// HTTP NLI adapter (MUDI_NLI_ENDPOINT); reply {"label": "entail|neutral|contradict"}.
class HttpNliAdapter : public NliAdapter {
public:
    explicit HttpNliAdapter(std::string endpoint) {
        auto pos = endpoint.find("://");
        std::string rest = pos == std::string::npos ? endpoint : endpoint.substr(pos + 3);
        auto slash = rest.find('/');
        host_ = "http://" + (slash == std::string::npos ? rest : rest.substr(0, slash));
        path_ = slash == std::string::npos ? "/" : rest.substr(slash);
    }
    std::string name() const override { return "http"; }
    Verdict classify(const std::string& premise, const std::string& hypothesis) override {
        httplib::Client client(host_);
        client.set_read_timeout(std::chrono::seconds(10));
        json req = {{"premise", premise}, {"hypothesis", hypothesis}};
        auto res = client.Post(path_, req.dump(), "application/json");
        if (!res || res->status != 200) {
            throw ParseError("NLI endpoint unreachable or returned error");
        }
        auto label = json::parse(res->body).at("label").get<std::string>();
        if (label == "entail" || label == "entailment") return Verdict::Entail;
        if (label == "contradict" || label == "contradiction") return Verdict::Contradict;
        return Verdict::Neutral;
    }

private:
    std::string host_;
    std::string path_;
};

struct LockFile {
    std::string path;
    explicit LockFile(const std::string& dir) : path(dir + "/.lock") {
        int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            throw StateError("run directory is locked by another process: " + path);
        }
        ::close(fd);
    }
    ~LockFile() { ::unlink(path.c_str()); }
};

} // namespace

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void stage_annotate(const RunConfig& config, const std::string& in_path,
                    const std::string& out_path) {
    (void)config;
    auto corpus = load_corpus(in_path, config.data.limit);
    auto annotator = make_annotator_from_env();
    std::vector<Dialogue> annotated;
    annotated.reserve(corpus.size());
    for (const auto& d : corpus) annotated.push_back(annotate(d, *annotator));
    save_corpus(out_path, annotated);
    std::cout << "[annotate] " << annotated.size() << " dialogues -> " << out_path
              << " (annotator: " << annotator->name() << ")\n";
}

void stage_build_graphs(const RunConfig& config, const std::string& corpus_path,
                        const std::string& out_dir) {
    auto corpus = load_corpus(corpus_path, config.data.limit);
    auto provider = make_embedding_provider(config.graph.provider, config.graph.dim);
    GraphSet set;
    for (const auto& d : corpus) {
        set.graphs.push_back(build_dialogue_graph(d, *provider, config.graph.d));
        set.personas.push_back(build_persona_graph(d.persona, *provider));
    }
    set.graphs = prune_for_balance(set.graphs, config.graph.keep_prob,
                                   config.graph.quantile, config.seed);
    set.meta.provider = config.graph.provider;
    set.meta.dim = config.graph.dim;
    set.meta.d = config.graph.d;
    set.meta.keep_prob = config.graph.keep_prob;
    set.meta.quantile = config.graph.quantile;
    set.meta.seed = config.seed;
    set.meta.config_hash = config.hash();
    save_graph_set(out_dir, set);
    std::cout << "[build-graphs] " << set.graphs.size() << " graphs -> " << out_dir << "\n";
}

void stage_pretrain(const RunConfig& config, const std::string& graphs_dir,
                    const std::string& out_dir) {
    require_exists(graphs_dir + "/graphs.jsonl", "pretrain", "build-graphs");
    auto set = load_graph_set(graphs_dir);
    if (!set.meta.config_hash.empty() && set.meta.config_hash != config.hash()) {
        throw ConfigError("config hash mismatch between graphs and current config");
    }
    auto result = run_pretraining(config.pretrain_config(), set.graphs);
    fs::create_directories(out_dir);
    save_checkpoint(out_dir + "/pretrain.ckpt", result.checkpoint);
    write_loss_csv(out_dir + "/loss.csv", result.log);
    std::cout << "[pretrain] holdout L_DA " << result.holdout_epoch0 << " -> "
              << result.holdout_final << (result.diverged ? " (DIVERGED)" : "") << "\n";
}

void stage_finetune(const RunConfig& config, const std::string& graphs_dir,
                    const std::string& pretrain_dir, const std::string& out_dir) {
    require_exists(graphs_dir + "/graphs.jsonl", "finetune", "build-graphs");
    require_exists(pretrain_dir + "/pretrain.ckpt", "finetune", "pretrain");
    auto set = load_graph_set(graphs_dir);
    auto pre = load_checkpoint(pretrain_dir + "/pretrain.ckpt");
    verify_hash(pre, config, "finetune init");
    auto result = run_finetune(config.coherence_config(), set, &pre);
    fs::create_directories(out_dir);
    save_checkpoint(out_dir + "/coherence.ckpt", result.checkpoint);
    write_dcu_csv(out_dir + "/loss.csv", result.log);
    double last = result.log.empty() ? 0.0 : result.log.back().dcu;
    std::cout << "[finetune] final L_DCU " << last
              << (result.diverged ? " (DIVERGED)" : "") << "\n";
}

void stage_train_generator(const RunConfig& config, const std::string& corpus_path,
                           const std::string& graphs_dir,
                           const std::string& coherence_dir, const std::string& out_dir) {
    require_exists(coherence_dir + "/coherence.ckpt", "train-generator", "finetune");
    auto corpus = load_corpus(corpus_path, config.data.limit);
    auto coh_ckpt = load_checkpoint(coherence_dir + "/coherence.ckpt");
    verify_hash(coh_ckpt, config, "train-generator init");
    auto coh_config = coherence_config_from_checkpoint(coh_ckpt);

    auto vocab = Vocabulary::build(corpus);
    auto gen_config = config.generator_config();
    auto provider = make_embedding_provider(config.graph.provider, config.graph.dim);
    auto examples = build_train_examples(corpus, vocab, gen_config, coh_config,
                                         coh_ckpt.params, *provider, config.graph.d);
    auto result = train_generator(gen_config, vocab, examples);
    fs::create_directories(out_dir);
    save_checkpoint(out_dir + "/generator.ckpt", result.checkpoint);
    write_gen_csv(out_dir + "/loss.csv", result.log);
    double last = result.log.empty() ? 0.0 : result.log.back().loss;
    std::cout << "[train-generator] " << examples.size() << " examples, final NLL/token "
              << last << (result.descent_abort ? " (DESCENT FLAG)" : "")
              << (result.diverged ? " (DIVERGED)" : "") << "\n";
}

std::vector<GenerationResult> generate_for_corpus(
    const RunConfig& config, const std::vector<Dialogue>& corpus,
    const std::string& coherence_dir, const std::string& generator_dir, FusionMode mode,
    const DecodeSpec& decode) {
    auto coh_ckpt = load_checkpoint(coherence_dir + "/coherence.ckpt");
    auto gen_ckpt = load_checkpoint(generator_dir + "/generator.ckpt");
    verify_hash(coh_ckpt, config, "generate (coherence)");
    verify_hash(gen_ckpt, config, "generate (generator)");
    auto coh_config = coherence_config_from_checkpoint(coh_ckpt);
    auto gen_config = generator_config_from_checkpoint(gen_ckpt);
    gen_config.decode = decode;
    auto vocab = vocabulary_from_checkpoint(gen_ckpt);
    auto provider = make_embedding_provider(config.graph.provider, config.graph.dim);

    std::vector<GenerationResult> out;
    for (const auto& dlg : corpus) {
        PersonaGraph pgraph = build_persona_graph(dlg.persona, *provider);
        for (std::size_t p = 1; p < dlg.utterances.size(); p += 2) {
            DialogueGraph prefix_graph;
            if (p == 1) {
                prefix_graph.dialogue_id = dlg.dialogue_id + "#1";
                prefix_graph.node_features = Mat(1, provider->dim());
                prefix_graph.node_features.row(0) =
                    provider->embed(dlg.utterances[0].text).transpose();
                prefix_graph.orders = {0};
                prefix_graph.turns = {0};
                prefix_graph.speakers = {0};
            } else {
                Dialogue prefix;
                prefix.dialogue_id = dlg.dialogue_id;
                prefix.persona = dlg.persona;
                prefix.utterances.assign(dlg.utterances.begin(),
                                         dlg.utterances.begin() + static_cast<long>(p));
                for (const auto& a : dlg.annotations) {
                    if (a.target_id < static_cast<int>(p)) prefix.annotations.push_back(a);
                }
                prefix_graph = build_dialogue_graph(prefix, *provider, config.graph.d);
            }

            std::vector<std::string> context;
            for (std::size_t i = 0; i < p; ++i) context.push_back(dlg.utterances[i].text);
            auto src = build_encoder_input(vocab, dlg.persona, context,
                                           gen_config.max_src_len);

            GenerationResult r;
            if (mode == FusionMode::None) {
                // Degraded path: no coherence memory, no predicted types.
                auto prompt = build_prompt(vocab, {RelationLabel::Comment}, GenVariant::Emb);
                r = generate_response(gen_config, gen_ckpt.params, vocab, src, prompt,
                                      nullptr, {}, decode);
                r.predicted_types.clear();
            } else {
                auto enc = coherence_encode(coh_config, coh_ckpt.params, prefix_graph,
                                            pgraph);
                Mat h_d = mode == FusionMode::Attention
                              ? enc.h_d
                              : ablation_h_d(mode, enc.h_c, enc.h_p,
                                             config.seed ^ fnv1a64(dlg.dialogue_id));
                auto types =
                    predict_response_type(coh_config, coh_ckpt.params, h_d,
                                          TypePredictionMode::Direct,
                                          coh_config.type_threshold);
                auto prompt = build_prompt(vocab, types.labels, gen_config.variant);
                r = generate_response(gen_config, gen_ckpt.params, vocab, src, prompt,
                                      &h_d, types.labels, decode);
            }
            r.dialogue_id = hyp_key(dlg.dialogue_id, static_cast<int>(p));
            out.push_back(std::move(r));
        }
    }
    return out;
}

void stage_generate(const RunConfig& config, const std::string& corpus_path,
                    const std::string& coherence_dir, const std::string& generator_dir,
                    const std::string& out_path, const std::string& mode) {
    require_exists(generator_dir + "/generator.ckpt", "generate", "train-generator");
    require_exists(coherence_dir + "/coherence.ckpt", "generate", "finetune");
    auto corpus = load_corpus(corpus_path, config.data.limit);
    auto results =
        generate_for_corpus(config, corpus, coherence_dir, generator_dir,
                            fusion_mode_from_name(mode),
                            decode_spec_from_string(config.generator.decode));
    std::ofstream out(out_path);
    if (!out) throw ParseError("cannot write generation output: " + out_path);
    for (const auto& r : results) out << generation_to_json_line(r) << '\n';
    std::cout << "[generate] " << results.size() << " responses -> " << out_path << "\n";
}

EvalReport stage_evaluate(const RunConfig& config, const std::string& hyp_path,
                          const std::string& ref_corpus_path,
                          const std::string& report_path, NliAdapter* nli,
                          const std::string& persona_corpus_path) {
    require_exists(hyp_path, "evaluate", "generate");
    std::ifstream in(hyp_path);
    std::map<std::string, std::string> hyp_by_key;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto j = json::parse(line);
        hyp_by_key[j.at("dialogue_id").get<std::string>()] =
            j.at("response").get<std::string>();
    }

    auto refs = load_corpus(ref_corpus_path, config.data.limit);
    std::map<std::string, std::vector<std::string>> persona_by_id;
    if (!persona_corpus_path.empty() && persona_corpus_path != ref_corpus_path) {
        for (const auto& dlg : load_corpus(persona_corpus_path, config.data.limit)) {
            persona_by_id[dlg.dialogue_id] = dlg.persona;
        }
    }
    std::vector<std::string> hypotheses, references;
    std::vector<std::vector<std::string>> personas;
    for (const auto& dlg : refs) {
        for (std::size_t p = 1; p < dlg.utterances.size(); p += 2) {
            auto key = hyp_key(dlg.dialogue_id, static_cast<int>(p));
            auto it = hyp_by_key.find(key);
            if (it == hyp_by_key.end()) {
                throw StateError("evaluate: hypothesis missing for " + key);
            }
            hypotheses.push_back(it->second);
            references.push_back(dlg.utterances[p].text);
            auto pit = persona_by_id.find(dlg.dialogue_id);
            personas.push_back(pit != persona_by_id.end() ? pit->second : dlg.persona);
        }
    }

    std::unique_ptr<NliAdapter> owned;
    auto metrics = config.evaluate.metrics;
    bool want_cscore =
        std::find(metrics.begin(), metrics.end(), "cscore") != metrics.end();
    if (want_cscore && nli == nullptr) {
        const char* endpoint = std::getenv("MUDI_NLI_ENDPOINT");
        if (endpoint != nullptr && *endpoint != '\0') {
            owned = std::make_unique<HttpNliAdapter>(endpoint);
            nli = owned.get();
        }
    }
    auto report = evaluate_responses(hypotheses, references, personas, metrics, nli);
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw ParseError("cannot write report: " + report_path);
        out << report.to_json().dump(2) << '\n';
    }
    return report;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

EvalReport run_pipeline(const RunConfig& config, const std::string& run_dir) {
    fs::create_directories(run_dir);
    LockFile lock(run_dir);

    // Snapshot the config; a resumed run must use the identical one.
    std::string config_path = run_dir + "/config.json";
    if (fs::exists(config_path)) {
        auto existing = RunConfig::load(config_path);
        if (existing.hash() != config.hash()) {
            throw ConfigError("run directory " + run_dir +
                              " was created with a different config (hash " +
                              existing.hash() + " vs " + config.hash() + ")");
        }
    } else {
        std::ofstream out(config_path);
        out << config.to_json().dump(2) << '\n';
    }

    auto timed = [&](const std::string& name, const std::string& output, auto&& fn) {
        if (fs::exists(output)) {
            std::cout << "[run] skip " << name << " (found " << output << ")\n";
            return;
        }
        auto t0 = std::chrono::steady_clock::now();
        fn();
        auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
        std::ofstream log(run_dir + "/run.log", std::ios::app);
        log << name << " " << dt.count() << "s\n";
    };

    std::string annotated = run_dir + "/annotated.jsonl";
    std::string graphs = run_dir + "/graphs";
    std::string pre_dir = run_dir + "/ckpt/pretrain";
    std::string coh_dir = run_dir + "/ckpt/coherence";
    std::string gen_dir = run_dir + "/ckpt/gen";
    std::string gen_out = run_dir + "/gen.jsonl";
    std::string report_path = run_dir + "/report.json";

    timed("annotate", annotated,
          [&] { stage_annotate(config, config.data.corpus, annotated); });
    timed("build-graphs", graphs + "/graphs.jsonl",
          [&] { stage_build_graphs(config, annotated, graphs); });
    timed("pretrain", pre_dir + "/pretrain.ckpt",
          [&] { stage_pretrain(config, graphs, pre_dir); });
    timed("finetune", coh_dir + "/coherence.ckpt",
          [&] { stage_finetune(config, graphs, pre_dir, coh_dir); });
    timed("train-generator", gen_dir + "/generator.ckpt", [&] {
        stage_train_generator(config, annotated, graphs, coh_dir, gen_dir);
    });
    timed("generate", gen_out,
          [&] { stage_generate(config, annotated, coh_dir, gen_dir, gen_out); });

    return stage_evaluate(config, gen_out, annotated, report_path);
}

std::map<std::string, EvalReport> encoder_ablation(const RunConfig& config,
                                                   const std::string& run_dir,
                                                   const std::vector<std::string>& modes) {
    std::string annotated = run_dir + "/annotated.jsonl";
    std::string coh_dir = run_dir + "/ckpt/coherence";
    std::string gen_dir = run_dir + "/ckpt/gen";
    require_exists(gen_dir + "/generator.ckpt", "ablate", "train-generator");
    require_exists(coh_dir + "/coherence.ckpt", "ablate", "finetune");
    require_exists(annotated, "ablate", "annotate");

    std::map<std::string, EvalReport> out;
    for (const auto& mode : modes) {
        std::string gen_out = run_dir + "/gen_" + mode + ".jsonl";
        auto corpus = load_corpus(annotated, config.data.limit);
        auto results =
            generate_for_corpus(config, corpus, coh_dir, gen_dir,
                                fusion_mode_from_name(mode),
                                decode_spec_from_string(config.generator.decode));
        std::ofstream os(gen_out);
        for (const auto& r : results) os << generation_to_json_line(r) << '\n';
        os.close();
        out[mode] = stage_evaluate(config, gen_out, annotated,
                                   run_dir + "/report_" + mode + ".json");
        std::cout << "[ablate] mode " << mode << " bleu1="
                  << (out[mode].bleu1 ? *out[mode].bleu1 : -1.0) << "\n";
    }
    return out;
}

GenerationResult generate_single(const RunConfig& config,
                                 const std::vector<std::string>& persona,
                                 const std::vector<std::string>& context,
                                 const std::string& coherence_dir,
                                 const std::string& generator_dir,
                                 const DecodeSpec& decode) {
    if (persona.empty()) throw ArgumentError("generate: persona must be non-empty");
    if (context.empty() || context.size() % 2 == 0) {
        throw ArgumentError("generate: context must end with a user query");
    }
    // Wrap the context in a synthetic dialogue with one pending response slot.
    Dialogue d;
    d.dialogue_id = "adhoc";
    d.persona = persona;
    for (std::size_t i = 0; i < context.size(); ++i) {
        d.utterances.push_back({static_cast<int>(i),
                                i % 2 == 0 ? Speaker::User : Speaker::Bot,
                                static_cast<int>(i) / 2, context[i]});
    }
    d.utterances.push_back({static_cast<int>(context.size()), Speaker::Bot,
                            static_cast<int>(context.size()) / 2, "placeholder"});
    HeuristicAnnotator h;
    d = annotate(d, h);

    auto results = generate_for_corpus(config, {d}, coherence_dir, generator_dir,
                                       FusionMode::Attention, decode);
    // The pending slot is the last response position.
    GenerationResult r = results.back();
    r.dialogue_id = "adhoc#" + std::to_string(context.size());
    return r;
}

std::vector<std::string> load_context_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open context file: " + path);
    std::vector<std::string> out;
    std::string line;
    std::size_t idx = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto j = json::parse(line);
        auto speaker = speaker_from_name(j.at("speaker").get<std::string>());
        Speaker expected = idx % 2 == 0 ? Speaker::User : Speaker::Bot;
        if (speaker != expected) {
            throw ValidationError("context file must alternate USER/BOT starting with USER");
        }
        out.push_back(j.at("text").get<std::string>());
        ++idx;
    }
    if (out.empty() || out.size() % 2 == 0) {
        throw ValidationError("context file must end with a USER query");
    }
    return out;
}

std::vector<std::string> load_persona_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open persona file: " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!trim(line).empty()) out.push_back(trim(line));
    }
    return out;
}

} // namespace mudi
