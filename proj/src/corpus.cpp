#include "mudi/corpus.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include <httplib.h>

#include "mudi/errors.hpp"
#include "mudi/text.hpp"

namespace mudi {

namespace {

// STAC names as published in the corpus documentation, plus the added
// topic-shift label. These strings are the wire format; do not reorder.
const std::array<std::string, kNumRelations> kRelationNames = {
    "Comment",
    "Clarification_question",
    "Elaboration",
    "Acknowledgement",
    "Continuation",
    "Explanation",
    "Conditional",
    "Question_answer_pair",
    "Alternation",
    "Q_Elab",
    "Result",
    "Background",
    "Narration",
    "Correction",
    "Parallel",
    "Contrast",
    "TOPIC_SHIFT",
};

const std::string kSpeakerUser = "USER";
const std::string kSpeakerBot = "BOT";

} // namespace

const std::string& relation_name(RelationLabel label) {
    int idx = static_cast<int>(label);
    if (idx < 0 || idx >= kNumRelations) {
        throw ArgumentError("relation_name: label index out of range");
    }
    return kRelationNames[static_cast<std::size_t>(idx)];
}

RelationLabel relation_from_name(const std::string& name) {
    for (int i = 0; i < kNumRelations; ++i) {
        if (kRelationNames[static_cast<std::size_t>(i)] == name) {
            return static_cast<RelationLabel>(i);
        }
    }
    throw ValidationError("unknown relation label: '" + name + "'");
}

const std::vector<std::string>& relation_names() {
    static const std::vector<std::string> names(kRelationNames.begin(),
                                                kRelationNames.end());
    return names;
}

const std::string& speaker_name(Speaker s) {
    return s == Speaker::User ? kSpeakerUser : kSpeakerBot;
}

Speaker speaker_from_name(const std::string& name) {
    if (name == kSpeakerUser) return Speaker::User;
    if (name == kSpeakerBot) return Speaker::Bot;
    throw ValidationError("unknown speaker: '" + name + "'");
}

bool Dialogue::annotated() const {
    if (utterances.size() < 2) return false;
    if (annotations.size() != utterances.size() - 1) return false;
    std::set<std::pair<int, int>> pairs;
    for (const auto& a : annotations) pairs.insert({a.source_id, a.target_id});
    for (std::size_t i = 0; i + 1 < utterances.size(); ++i) {
        if (!pairs.count({static_cast<int>(i), static_cast<int>(i) + 1})) return false;
    }
    return true;
}

void validate_dialogue(const Dialogue& d) {
    auto fail = [&](const std::string& rule) {
        throw ValidationError("dialogue '" + d.dialogue_id + "': " + rule);
    };
    if (d.dialogue_id.empty()) fail("dialogue_id must be non-empty");
    if (d.persona.empty() || d.persona.size() > 10) {
        fail("persona must contain 1..10 sentences");
    }
    for (const auto& p : d.persona) {
        if (trim(p).empty()) fail("persona sentences must be non-empty");
    }
    if (d.utterances.size() < 2) fail("dialogue needs at least 2 utterances");
    for (std::size_t i = 0; i < d.utterances.size(); ++i) {
        const auto& u = d.utterances[i];
        if (u.id != static_cast<int>(i)) fail("utterance ids must be consecutive from 0");
        Speaker expected = (i % 2 == 0) ? Speaker::User : Speaker::Bot;
        if (u.speaker != expected) fail("speakers must alternate starting with USER");
        if (u.turn_index != static_cast<int>(i) / 2) fail("turn_index must be floor(id/2)");
        if (trim(u.text).empty()) fail("utterance text must be non-empty");
    }
    std::set<std::pair<int, int>> seen;
    for (const auto& a : d.annotations) {
        if (a.source_id < 0 || a.target_id >= static_cast<int>(d.utterances.size())) {
            fail("annotation references unknown utterance id");
        }
        if (a.source_id >= a.target_id) fail("annotation must have source.id < target.id");
        if (a.labels.empty() || a.labels.size() > kMaxLabelsPerPair) {
            fail("annotation label set size must be in [1,3]");
        }
        std::set<RelationLabel> uniq(a.labels.begin(), a.labels.end());
        if (uniq.size() != a.labels.size()) fail("annotation labels must be unique");
        if (!seen.insert({a.source_id, a.target_id}).second) {
            fail("duplicate annotation for utterance pair");
        }
    }
}

// ---------------------------------------------------------------------------
// JSON conversion
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

json dialogue_to_json(const Dialogue& d) {
    json utts = json::array();
    for (const auto& u : d.utterances) {
        utts.push_back({{"speaker", speaker_name(u.speaker)}, {"text", u.text}});
    }
    json anns = json::array();
    for (const auto& a : d.annotations) {
        json labels = json::array();
        for (auto l : a.labels) labels.push_back(relation_name(l));
        json entry = {{"source", a.source_id}, {"target", a.target_id}, {"labels", labels}};
        if (!a.provenance.empty()) entry["provenance"] = a.provenance;
        anns.push_back(entry);
    }
    json out = {{"dialogue_id", d.dialogue_id},
                {"persona", d.persona},
                {"utterances", utts}};
    if (!anns.empty()) out["annotations"] = anns;
    return out;
}

Dialogue dialogue_from_json(const json& j) {
    Dialogue d;
    d.dialogue_id = j.at("dialogue_id").get<std::string>();
    d.persona = j.at("persona").get<std::vector<std::string>>();
    int id = 0;
    for (const auto& ju : j.at("utterances")) {
        Utterance u;
        u.id = id;
        u.turn_index = id / 2;
        u.speaker = speaker_from_name(ju.at("speaker").get<std::string>());
        u.text = ju.at("text").get<std::string>();
        d.utterances.push_back(std::move(u));
        ++id;
    }
    if (j.contains("annotations")) {
        for (const auto& ja : j.at("annotations")) {
            RelationAnnotation a;
            a.source_id = ja.at("source").get<int>();
            a.target_id = ja.at("target").get<int>();
            for (const auto& jl : ja.at("labels")) {
                a.labels.push_back(relation_from_name(jl.get<std::string>()));
            }
            std::sort(a.labels.begin(), a.labels.end());
            if (ja.contains("provenance")) {
                a.provenance = ja.at("provenance").get<std::string>();
            }
            d.annotations.push_back(std::move(a));
        }
    }
    validate_dialogue(d);
    return d;
}

} // namespace

std::string dialogue_to_json_line(const Dialogue& d) {
    return dialogue_to_json(d).dump();
}

Dialogue dialogue_from_json_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what());
    }
    try {
        return dialogue_from_json(j);
    } catch (const json::exception& e) {
        throw ParseError(std::string("bad dialogue object: ") + e.what());
    }
}

std::vector<Dialogue> load_corpus(const std::string& path,
                                  std::optional<std::size_t> limit) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open corpus file: " + path);
    std::vector<Dialogue> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        if (limit && out.size() >= *limit) break;
        try {
            out.push_back(dialogue_from_json_line(line));
        } catch (const ParseError& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void save_corpus(const std::string& path, const std::vector<Dialogue>& dialogues) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open file for writing: " + path);
    for (const auto& d : dialogues) {
        out << dialogue_to_json_line(d) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Heuristic annotator
// ---------------------------------------------------------------------------

namespace {

const std::set<std::string>& ack_keywords() {
    static const std::set<std::string> kw = {
        "yes",  "yeah", "yep",  "ok",     "okay",  "sure",  "right", "exactly",
        "cool", "nice", "great", "thanks", "thank", "wow",  "awesome", "agreed",
    };
    return kw;
}

} // namespace

std::vector<ScoredLabel> HeuristicAnnotator::annotate_pair(
    const std::string& source_text, const std::string& target_text) {
    auto src_tokens = tokenize_words(source_text);
    auto tgt_tokens = tokenize_words(target_text);

    bool src_question = source_text.find('?') != std::string::npos;
    bool tgt_question = target_text.find('?') != std::string::npos;

    bool tgt_ack = false;
    for (const auto& t : tgt_tokens) {
        if (ack_keywords().count(t)) {
            tgt_ack = true;
            break;
        }
    }

    double overlap = overlap_coefficient(src_tokens, tgt_tokens);

    std::vector<ScoredLabel> out;
    if (src_question && !tgt_question) {
        out.push_back({RelationLabel::QuestionAnswerPair, 0.9});
    }
    if (tgt_ack) {
        out.push_back({RelationLabel::Acknowledgement, 0.8});
    }
    if (overlap >= 0.5) {
        out.push_back({RelationLabel::Continuation, 0.6});
    } else if (overlap < 0.1) {
        out.push_back({RelationLabel::TopicShift, 0.6});
    }
    if (out.empty()) {
        out.push_back({RelationLabel::Comment, 0.5});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rate limiter
// ---------------------------------------------------------------------------

RateLimiter::RateLimiter(double min_interval_seconds)
    : min_interval_(min_interval_seconds) {}

void RateLimiter::acquire() {
    if (min_interval_ <= 0.0) return;
    std::unique_lock<std::mutex> lock(mu_);
    using clock = std::chrono::steady_clock;
    auto now_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                      clock::now().time_since_epoch())
                      .count();
    auto interval_ns = static_cast<std::int64_t>(min_interval_ * 1e9);
    std::int64_t earliest = last_ns_ + interval_ns;
    if (now_ns < earliest) {
        std::this_thread::sleep_for(std::chrono::nanoseconds(earliest - now_ns));
        now_ns = earliest;
    }
    last_ns_ = now_ns;
}

// ---------------------------------------------------------------------------
// External adapter
// ---------------------------------------------------------------------------

ExternalLlmAnnotator::ExternalLlmAnnotator(std::string endpoint,
                                           double timeout_seconds,
                                           double min_interval_seconds)
    : timeout_seconds_(timeout_seconds), limiter_(min_interval_seconds) {
    // endpoint looks like "http://host:port/path"
    auto pos = endpoint.find("://");
    std::string rest = pos == std::string::npos ? endpoint : endpoint.substr(pos + 3);
    auto slash = rest.find('/');
    if (slash == std::string::npos) {
        host_ = "http://" + rest;
        path_ = "/";
    } else {
        host_ = "http://" + rest.substr(0, slash);
        path_ = rest.substr(slash);
    }
}

std::vector<ScoredLabel> ExternalLlmAnnotator::annotate_pair(
    const std::string& source_text, const std::string& target_text) {
    limiter_.acquire();
    httplib::Client client(host_);
    client.set_connection_timeout(std::chrono::milliseconds(
        static_cast<int>(timeout_seconds_ * 1000)));
    client.set_read_timeout(std::chrono::milliseconds(
        static_cast<int>(timeout_seconds_ * 1000)));

    json request = {{"source_text", source_text},
                    {"target_text", target_text},
                    {"label_vocabulary", relation_names()}};
    auto res = client.Post(path_, request.dump(), "application/json");
    if (!res || res->status != 200) {
        throw ParseError("annotator endpoint unreachable or returned error");
    }
    json reply = json::parse(res->body);
    std::vector<ScoredLabel> out;
    for (const auto& item : reply.at("labels")) {
        ScoredLabel s;
        s.label = relation_from_name(item.at("label").get<std::string>());
        s.confidence = item.at("confidence").get<double>();
        if (s.confidence < 0.0 || s.confidence > 1.0) {
            throw ValidationError("annotator confidence outside [0,1]");
        }
        out.push_back(s);
    }
    return out;
}

std::unique_ptr<RelationAnnotator> make_annotator_from_env() {
    const char* endpoint = std::getenv("MUDI_ANNOTATOR_ENDPOINT");
    if (endpoint != nullptr && *endpoint != '\0') {
        return std::make_unique<ExternalLlmAnnotator>(endpoint);
    }
    return std::make_unique<HeuristicAnnotator>();
}

Dialogue annotate(const Dialogue& dialogue, RelationAnnotator& annotator) {
    validate_dialogue(dialogue);
    HeuristicAnnotator fallback;
    Dialogue out = dialogue;
    out.annotations.clear();
    for (std::size_t i = 0; i + 1 < out.utterances.size(); ++i) {
        const std::string& src = out.utterances[i].text;
        const std::string& tgt = out.utterances[i + 1].text;
        std::vector<ScoredLabel> scored;
        std::string provenance = annotator.name();
        try {
            scored = annotator.annotate_pair(src, tgt);
        } catch (const std::exception&) {
            scored.clear();
        }
        if (scored.empty() && annotator.name() != fallback.name()) {
            scored = fallback.annotate_pair(src, tgt);
            provenance = fallback.name();
        }
        if (scored.empty()) {
            scored.push_back({RelationLabel::Comment, 0.5});
        }
        // Keep the three highest-confidence labels (stable on ties).
        std::stable_sort(scored.begin(), scored.end(),
                         [](const ScoredLabel& a, const ScoredLabel& b) {
                             return a.confidence > b.confidence;
                         });
        std::vector<RelationLabel> labels;
        for (const auto& s : scored) {
            if (std::find(labels.begin(), labels.end(), s.label) != labels.end()) continue;
            labels.push_back(s.label);
            if (labels.size() == kMaxLabelsPerPair) break;
        }
        std::sort(labels.begin(), labels.end());
        RelationAnnotation a;
        a.source_id = static_cast<int>(i);
        a.target_id = static_cast<int>(i) + 1;
        a.labels = std::move(labels);
        a.provenance = provenance;
        out.annotations.push_back(std::move(a));
    }
    return out;
}

} // namespace mudi
