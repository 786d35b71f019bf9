#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace mudi {

// ---------------------------------------------------------------------------
// Discourse relation taxonomy: the 16 STAC relations plus TOPIC_SHIFT.
// ---------------------------------------------------------------------------

enum class RelationLabel : int {
    Comment = 0,
    ClarificationQuestion,
    Elaboration,
    Acknowledgement,
    Continuation,
    Explanation,
    Conditional,
    QuestionAnswerPair,
    Alternation,
    QElab,
    Result,
    Background,
    Narration,
    Correction,
    Parallel,
    Contrast,
    TopicShift,
};

inline constexpr int kNumRelations = 17;
inline constexpr int kMaxLabelsPerPair = 3;

const std::string& relation_name(RelationLabel label);
RelationLabel relation_from_name(const std::string& name);
const std::vector<std::string>& relation_names();

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class Speaker { User, Bot };

const std::string& speaker_name(Speaker s);
Speaker speaker_from_name(const std::string& name);

struct Utterance {
    int id = 0;         // position in dialogue, 0-based
    Speaker speaker = Speaker::User;
    int turn_index = 0; // exchange-pair index, floor(id / 2)
    std::string text;

    bool operator==(const Utterance&) const = default;
};

struct RelationAnnotation {
    int source_id = 0;
    int target_id = 0;
    std::vector<RelationLabel> labels; // sorted, unique, size 1..3
    std::string provenance;            // "", "heuristic" or "external"

    bool operator==(const RelationAnnotation&) const = default;
};

struct Dialogue {
    std::string dialogue_id;
    std::vector<std::string> persona;     // 1..10 non-empty sentences
    std::vector<Utterance> utterances;    // length >= 2, alternating, USER first
    std::vector<RelationAnnotation> annotations;

    // True when every adjacent pair (i, i+1) carries an annotation.
    bool annotated() const;

    bool operator==(const Dialogue&) const = default;
};

// Validates all invariants; throws ValidationError naming the dialogue and rule.
void validate_dialogue(const Dialogue& d);

// ---------------------------------------------------------------------------
// JSONL corpus I/O
// ---------------------------------------------------------------------------

std::vector<Dialogue> load_corpus(const std::string& path,
                                  std::optional<std::size_t> limit = std::nullopt);
void save_corpus(const std::string& path, const std::vector<Dialogue>& dialogues);

std::string dialogue_to_json_line(const Dialogue& d);
Dialogue dialogue_from_json_line(const std::string& line);

// ---------------------------------------------------------------------------
// Annotator adapter contract
// ---------------------------------------------------------------------------

struct ScoredLabel {
    RelationLabel label;
    double confidence = 0.0; // in [0, 1]
};

class RelationAnnotator {
public:
    virtual ~RelationAnnotator() = default;
    virtual std::string name() const = 0;
    // Ranked labels (best first) for one adjacent utterance pair.
    virtual std::vector<ScoredLabel> annotate_pair(const std::string& source_text,
                                                   const std::string& target_text) = 0;
};

// Deterministic rule-table annotator (CI fallback, no model access needed).
class HeuristicAnnotator : public RelationAnnotator {
public:
    std::string name() const override { return "heuristic"; }
    std::vector<ScoredLabel> annotate_pair(const std::string& source_text,
                                           const std::string& target_text) override;
};

// Simple blocking rate limiter shared by external adapters.
class RateLimiter {
public:
    explicit RateLimiter(double min_interval_seconds);
    void acquire();

private:
    std::mutex mu_;
    double min_interval_;
    std::int64_t last_ns_ = 0;
};

// External LLM adapter: POSTs {source_text, target_text, label_vocabulary}
// to an HTTP endpoint and expects {"labels": [{"label": str, "confidence": x}]}.
// Endpoint comes from MUDI_ANNOTATOR_ENDPOINT; failures raise so annotate()
// can fall back per pair.
class ExternalLlmAnnotator : public RelationAnnotator {
public:
    explicit ExternalLlmAnnotator(std::string endpoint, double timeout_seconds = 10.0,
                                  double min_interval_seconds = 0.0);
    std::string name() const override { return "external"; }
    std::vector<ScoredLabel> annotate_pair(const std::string& source_text,
                                           const std::string& target_text) override;

private:
    std::string host_;
    std::string path_;
    double timeout_seconds_;
    RateLimiter limiter_;
};

// Picks the external adapter when MUDI_ANNOTATOR_ENDPOINT is set, else heuristic.
std::unique_ptr<RelationAnnotator> make_annotator_from_env();

// Returns a copy of `dialogue` with one annotation per adjacent pair. The
// external adapter falls back to the heuristic per pair on failure; more than
// three labels are truncated to the three highest-confidence ones.
Dialogue annotate(const Dialogue& dialogue, RelationAnnotator& annotator);

} // namespace mudi
