#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>
#include <unistd.h>

#include <httplib.h>
#include <json.hpp>

#include "mudi/corpus.hpp"
#include "mudi/errors.hpp"

using namespace mudi;

namespace {

Dialogue make_dialogue(int num_utterances, const std::string& id = "d1") {
    Dialogue d;
    d.dialogue_id = id;
    d.persona = {"i like tea.", "i have a dog."};
    for (int i = 0; i < num_utterances; ++i) {
        Utterance u;
        u.id = i;
        u.speaker = (i % 2 == 0) ? Speaker::User : Speaker::Bot;
        u.turn_index = i / 2;
        u.text = "utterance number " + std::to_string(i);
        d.utterances.push_back(u);
    }
    return d;
}

std::string write_temp_corpus(const std::vector<Dialogue>& ds) {
    auto path = std::filesystem::temp_directory_path() /
                ("mudi_corpus_test_" + std::to_string(::getpid()) + ".jsonl");
    save_corpus(path.string(), ds);
    return path.string();
}

} // namespace

TEST_CASE("relation taxonomy has 17 distinct labels including TOPIC_SHIFT") {
    const auto& names = relation_names();
    CHECK(names.size() == 17);
    std::set<std::string> uniq(names.begin(), names.end());
    CHECK(uniq.size() == 17);
    CHECK(uniq.count("TOPIC_SHIFT") == 1);
    // STAC names present
    CHECK(uniq.count("Question_answer_pair") == 1);
    CHECK(uniq.count("Q_Elab") == 1);
    CHECK(relation_from_name("Acknowledgement") == RelationLabel::Acknowledgement);
    CHECK(relation_name(RelationLabel::TopicShift) == "TOPIC_SHIFT");
}

TEST_CASE("load_corpus respects limit and preserves order") {
    std::vector<Dialogue> ds;
    for (int i = 0; i < 20; ++i) ds.push_back(make_dialogue(4, "dlg" + std::to_string(i)));
    auto path = write_temp_corpus(ds);
    auto loaded = load_corpus(path, 5);
    REQUIRE(loaded.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(loaded[i].dialogue_id == "dlg" + std::to_string(i));
    std::filesystem::remove(path);
}

TEST_CASE("load_corpus rejects empty persona with a validation error") {
    auto path = std::filesystem::temp_directory_path() / "mudi_bad_persona.jsonl";
    {
        std::ofstream out(path);
        out << R"({"dialogue_id":"bad","persona":[],"utterances":[)"
            << R"({"speaker":"USER","text":"hi"},{"speaker":"BOT","text":"hello"}]})"
            << "\n";
    }
    CHECK_THROWS_AS(load_corpus(path.string()), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("load_corpus reports the line number of malformed JSON") {
    auto path = std::filesystem::temp_directory_path() / "mudi_bad_json.jsonl";
    {
        std::ofstream out(path);
        out << dialogue_to_json_line(make_dialogue(2)) << "\n";
        out << "{not json\n";
    }
    try {
        load_corpus(path.string());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("validation enforces alternation, ids, and turn indices") {
    auto d = make_dialogue(4);
    CHECK_NOTHROW(validate_dialogue(d));

    auto bad_speaker = d;
    bad_speaker.utterances[1].speaker = Speaker::User;
    CHECK_THROWS_AS(validate_dialogue(bad_speaker), ValidationError);

    auto bad_turn = d;
    bad_turn.utterances[3].turn_index = 0;
    CHECK_THROWS_AS(validate_dialogue(bad_turn), ValidationError);

    auto bad_len = d;
    bad_len.utterances.resize(1);
    CHECK_THROWS_AS(validate_dialogue(bad_len), ValidationError);

    auto bad_ann = d;
    bad_ann.annotations.push_back({2, 1, {RelationLabel::Comment}, ""});
    CHECK_THROWS_AS(validate_dialogue(bad_ann), ValidationError);
}

TEST_CASE("heuristic annotator emits QA pair for question-answer") {
    HeuristicAnnotator h;
    auto scored = h.annotate_pair("Do you like dogs?", "Yes, I have two.");
    bool has_qa = false;
    for (const auto& s : scored) {
        if (s.label == RelationLabel::QuestionAnswerPair) has_qa = true;
    }
    CHECK(has_qa);
}

TEST_CASE("annotate covers every adjacent pair and never emits an empty set") {
    auto d = make_dialogue(7);
    HeuristicAnnotator h;
    auto ann = annotate(d, h);
    REQUIRE(ann.annotations.size() == 6);
    std::set<std::pair<int, int>> pairs;
    for (const auto& a : ann.annotations) {
        pairs.insert({a.source_id, a.target_id});
        CHECK(a.labels.size() >= 1);
        CHECK(a.labels.size() <= 3);
    }
    for (int i = 0; i < 6; ++i) CHECK(pairs.count({i, i + 1}) == 1);
    CHECK(ann.annotated());
}

TEST_CASE("annotation is idempotent under the heuristic") {
    auto d = make_dialogue(6);
    HeuristicAnnotator h;
    auto once = annotate(d, h);
    auto twice = annotate(once, h);
    CHECK(once == twice);
}

TEST_CASE("annotator emitting five labels is truncated to the top three") {
    struct FiveLabelAnnotator : RelationAnnotator {
        std::string name() const override { return "stub"; }
        std::vector<ScoredLabel> annotate_pair(const std::string&,
                                               const std::string&) override {
            return {{RelationLabel::Comment, 0.9},
                    {RelationLabel::Elaboration, 0.8},
                    {RelationLabel::Background, 0.7},
                    {RelationLabel::Narration, 0.6},
                    {RelationLabel::Contrast, 0.5}};
        }
    } stub;
    auto ann = annotate(make_dialogue(4), stub);
    for (const auto& a : ann.annotations) {
        REQUIRE(a.labels.size() == 3);
        std::set<RelationLabel> got(a.labels.begin(), a.labels.end());
        CHECK(got.count(RelationLabel::Comment) == 1);
        CHECK(got.count(RelationLabel::Elaboration) == 1);
        CHECK(got.count(RelationLabel::Background) == 1);
    }
}

TEST_CASE("serialize then load reproduces an identical dialogue") {
    auto d = make_dialogue(6, "round_trip");
    HeuristicAnnotator h;
    auto ann = annotate(d, h);
    auto path = write_temp_corpus({ann});
    auto loaded = load_corpus(path);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0] == ann);
    std::filesystem::remove(path);
}

TEST_CASE("external adapter talks to an HTTP endpoint and falls back on failure") {
    httplib::Server server;
    server.Post("/annotate", [](const httplib::Request& req, httplib::Response& res) {
        auto body = nlohmann::json::parse(req.body);
        REQUIRE(body.contains("source_text"));
        REQUIRE(body.contains("label_vocabulary"));
        nlohmann::json reply = {
            {"labels", {{{"label", "Elaboration"}, {"confidence", 0.95}},
                        {{"label", "Comment"}, {"confidence", 0.5}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ExternalLlmAnnotator ext("http://127.0.0.1:" + std::to_string(port) + "/annotate");
    auto d = make_dialogue(4);
    auto ann = annotate(d, ext);
    REQUIRE(ann.annotations.size() == 3);
    for (const auto& a : ann.annotations) {
        CHECK(a.provenance == "external");
        CHECK(a.labels ==
              std::vector<RelationLabel>{RelationLabel::Comment, RelationLabel::Elaboration});
    }

    server.stop();
    t.join();

    // Unreachable endpoint: every pair falls back to the heuristic.
    ExternalLlmAnnotator dead("http://127.0.0.1:1/annotate", 0.2);
    auto fb = annotate(d, dead);
    REQUIRE(fb.annotations.size() == 3);
    for (const auto& a : fb.annotations) CHECK(a.provenance == "heuristic");
}

TEST_CASE("committed fixture carries the gold heuristic annotations") {
    auto corpus =
        load_corpus(std::string(MUDI_SOURCE_DIR) + "/data/fixture/fixture.jsonl");
    REQUIRE(corpus.size() == 20);
    HeuristicAnnotator h;
    std::size_t utterances = 0;
    for (const auto& d : corpus) {
        CHECK(d.annotated());
        CHECK(d.persona.size() >= 4);
        CHECK(d.utterances.size() >= 6);
        CHECK(d.utterances.size() <= 10);
        CHECK(annotate(d, h) == d); // gold = heuristic output, idempotent
        utterances += d.utterances.size();
    }
    CHECK(utterances >= 120);
}

TEST_CASE("ConvAI2-scale corpus counts" *
          doctest::description("skipped unless MUDI_CONVAI2_TRAIN points at the file")) {
    const char* path = std::getenv("MUDI_CONVAI2_TRAIN");
    if (path == nullptr || *path == '\0') {
        MESSAGE("skipped: MUDI_CONVAI2_TRAIN not set");
        return;
    }
    auto dialogues = load_corpus(path);
    std::size_t utterances = 0;
    for (const auto& d : dialogues) utterances += d.utterances.size();
    CHECK(dialogues.size() == 17878);
    CHECK(utterances == 131438);
}
