#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "mudi/errors.hpp"
#include "mudi/pipeline.hpp"

using namespace mudi;
namespace fs = std::filesystem;

namespace {

std::string fixture_path() {
    return std::string(MUDI_SOURCE_DIR) + "/data/fixture/fixture.jsonl";
}

RunConfig tiny_run_config() {
    RunConfig c;
    c.data.corpus = fixture_path();
    c.graph.dim = 16;
    c.graph.keep_prob = 1.0;
    c.encoder.per_head_dim = 4;
    c.encoder.out_dim = 16;
    c.encoder.num_layers = 1;
    c.encoder.num_heads = 2;
    c.pretrain.epochs = 3;
    c.pretrain.lr = 3e-3;
    c.coherence.epochs = 2;
    c.coherence.fusion_heads = 2;
    c.coherence.head_hidden = 8;
    c.generator.model_dim = 32;
    c.generator.ffn_dim = 48;
    c.generator.enc_layers = 1;
    c.generator.dec_layers = 1;
    c.generator.num_heads = 2;
    c.generator.pc_epochs = 1;
    c.generator.epochs = 3;
    c.generator.max_src_len = 160;
    c.generator.max_tgt_len = 40;
    return c;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

} // namespace

TEST_CASE("config round-trips, rejects unknown keys, validates fields") {
    RunConfig c = tiny_run_config();
    auto j = c.to_json();
    auto back = RunConfig::from_json(j);
    CHECK(back.hash() == c.hash());
    CHECK(back.graph.dim == 16);

    auto bad = j;
    bad["graph"]["mystery"] = 1;
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);

    auto bad_top = j;
    bad_top["extra_section"] = nlohmann::json::object();
    CHECK_THROWS_AS(RunConfig::from_json(bad_top), ConfigError);

    auto bad_tau = j;
    bad_tau["generator"]["tau"] = 1.5;
    CHECK_THROWS_AS(RunConfig::from_json(bad_tau), ConfigError);

    auto bad_weights = j;
    bad_weights["coherence"]["weights"] = {0.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(RunConfig::from_json(bad_weights), ConfigError);

    auto bad_variant = j;
    bad_variant["generator"]["variant"] = "both";
    CHECK_THROWS_AS(RunConfig::from_json(bad_variant), ConfigError);

    // Hash is stable and sensitive.
    auto c2 = c;
    CHECK(c2.hash() == c.hash());
    c2.seed = 43;
    CHECK(c2.hash() != c.hash());
}

TEST_CASE("full pipeline produces a report, resumes, and is deterministic") {
    RunConfig config = tiny_run_config();
    TempDir run_a("mudi_pipe_a");
    auto report_a = run_pipeline(config, run_a.str());
    CHECK(report_a.bleu1.has_value());
    CHECK(fs::exists(run_a.path / "report.json"));
    CHECK(fs::exists(run_a.path / "ckpt/pretrain/pretrain.ckpt"));
    CHECK(fs::exists(run_a.path / "ckpt/coherence/coherence.ckpt"));
    CHECK(fs::exists(run_a.path / "ckpt/gen/generator.ckpt"));
    CHECK(fs::exists(run_a.path / "gen.jsonl"));
    CHECK(fs::exists(run_a.path / "config.json"));
    CHECK(!fs::exists(run_a.path / ".lock")); // released

    // Resume: a second invocation skips all stages and reproduces the report.
    auto resumed = run_pipeline(config, run_a.str());
    CHECK(resumed.to_json() == report_a.to_json());

    // Full determinism across independent run directories.
    TempDir run_b("mudi_pipe_b");
    auto report_b = run_pipeline(config, run_b.str());
    CHECK(report_b.to_json() == report_a.to_json());
}

TEST_CASE("pipeline checkpoints round-trip bit-exactly between stages") {
    RunConfig config = tiny_run_config();
    TempDir run("mudi_pipe_ckpt");
    run_pipeline(config, run.str());

    for (const char* rel : {"ckpt/pretrain/pretrain.ckpt", "ckpt/coherence/coherence.ckpt",
                            "ckpt/gen/generator.ckpt"}) {
        auto path = (run.path / rel).string();
        auto ckpt = load_checkpoint(path);
        CHECK(ckpt.config_hash == config.hash());
        auto copy = path + ".copy";
        save_checkpoint(copy, ckpt);
        auto reloaded = load_checkpoint(copy);
        for (const auto& [name, e] : ckpt.params) {
            CHECK(reloaded.params.value(name) == e.value); // bitwise
        }
        fs::remove(copy);
    }
}

TEST_CASE("skip-to-evaluate without a generator checkpoint names the stage") {
    RunConfig config = tiny_run_config();
    TempDir run("mudi_pipe_missing");
    fs::create_directories(run.path);
    try {
        stage_generate(config, fixture_path(), run.str() + "/ckpt/coherence",
                       run.str() + "/ckpt/gen", run.str() + "/gen.jsonl");
        FAIL("expected StateError");
    } catch (const StateError& e) {
        CHECK(std::string(e.what()).find("train-generator") != std::string::npos);
    }
}

TEST_CASE("run directory with a different config hash is rejected") {
    RunConfig config = tiny_run_config();
    TempDir run("mudi_pipe_hash");
    fs::create_directories(run.path);
    {
        RunConfig other = config;
        other.seed = 999;
        std::ofstream out(run.path / "config.json");
        out << other.to_json().dump(2) << '\n';
    }
    CHECK_THROWS_AS(run_pipeline(config, run.str()), ConfigError);
}

TEST_CASE("locked run directory is refused") {
    RunConfig config = tiny_run_config();
    TempDir run("mudi_pipe_lock");
    fs::create_directories(run.path);
    std::ofstream(run.path / ".lock") << "held\n";
    CHECK_THROWS_AS(run_pipeline(config, run.str()), StateError);
}

TEST_CASE("encoder ablation: all six modes produce reports; random is seeded") {
    RunConfig config = tiny_run_config();
    TempDir run("mudi_pipe_ablate");
    run_pipeline(config, run.str());

    auto reports = encoder_ablation(
        config, run.str(),
        {"attention", "add", "context_only", "persona_only", "random", "none"});
    REQUIRE(reports.size() == 6);
    for (const auto& [mode, report] : reports) {
        CHECK(report.bleu1.has_value());
        CHECK(fs::exists(run.path / ("report_" + mode + ".json")));
    }

    // mode=none generations carry no predicted types (degraded path).
    std::ifstream in(run.path / "gen_none.jsonl");
    std::string line;
    REQUIRE(std::getline(in, line));
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("predicted_types").empty());
    CHECK(j.at("gate_mean") == 0.0);

    // Reproducible random mode.
    auto again = encoder_ablation(config, run.str(), {"random"});
    CHECK(again.at("random").to_json() == reports.at("random").to_json());
}

TEST_CASE("evaluate draws personas from a separate corpus when given one") {
    RunConfig config = tiny_run_config();
    config.evaluate.metrics = {"bleu", "cscore"};
    TempDir run("mudi_pipe_persona");
    fs::create_directories(run.path);

    // Hypotheses aligned with the fixture references.
    auto refs = load_corpus(fixture_path());
    {
        std::ofstream hyp(run.path / "hyp.jsonl");
        for (const auto& d : refs) {
            for (std::size_t p = 1; p < d.utterances.size(); p += 2) {
                GenerationResult r;
                r.dialogue_id = d.dialogue_id + "#" + std::to_string(p);
                r.response = d.utterances[p].text;
                hyp << generation_to_json_line(r) << '\n';
            }
        }
    }
    // A persona corpus whose sentences differ from the reference corpus.
    {
        std::vector<Dialogue> alt = refs;
        for (auto& d : alt) d.persona = {"i am a placeholder persona."};
        save_corpus((run.path / "alt.jsonl").string(), alt);
    }

    struct CountingNli : NliAdapter {
        std::set<std::string>* seen;
        std::string name() const override { return "counting"; }
        Verdict classify(const std::string& premise, const std::string&) override {
            seen->insert(premise);
            return Verdict::Neutral;
        }
    } nli;
    std::set<std::string> premises;
    nli.seen = &premises;

    auto report = stage_evaluate(config, (run.path / "hyp.jsonl").string(), fixture_path(),
                                 "", &nli, (run.path / "alt.jsonl").string());
    CHECK(report.bleu1 == 100.0);
    REQUIRE(premises.size() == 1);
    CHECK(*premises.begin() == "i am a placeholder persona.");
}

TEST_CASE("ad-hoc generation from persona and context files") {
    RunConfig config = tiny_run_config();
    TempDir run("mudi_pipe_single");
    run_pipeline(config, run.str());

    TempDir files("mudi_pipe_files");
    fs::create_directories(files.path);
    {
        std::ofstream p(files.path / "persona.txt");
        p << "i love hiking in the mountains.\n\ni have a golden retriever named max.\n";
        std::ofstream c(files.path / "context.jsonl");
        c << R"({"speaker": "USER", "text": "do you have any pets ?"})" << "\n";
    }
    auto persona = load_persona_file((files.path / "persona.txt").string());
    REQUIRE(persona.size() == 2);
    auto context = load_context_file((files.path / "context.jsonl").string());
    REQUIRE(context.size() == 1);

    auto r = generate_single(config, persona, context, run.str() + "/ckpt/coherence",
                             run.str() + "/ckpt/gen", DecodeSpec{});
    CHECK(!r.predicted_types.empty());
    auto r2 = generate_single(config, persona, context, run.str() + "/ckpt/coherence",
                              run.str() + "/ckpt/gen", DecodeSpec{});
    CHECK(r.response == r2.response); // greedy determinism

    // Malformed context files are rejected.
    {
        std::ofstream c(files.path / "bad.jsonl");
        c << R"({"speaker": "BOT", "text": "i speak first"})" << "\n";
    }
    CHECK_THROWS_AS(load_context_file((files.path / "bad.jsonl").string()),
                    ValidationError);
}
