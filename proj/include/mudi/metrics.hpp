#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace mudi {

// Evaluation suite. Metric tokenization is tokenize_words (lowercase,
// whitespace split, punctuation as single tokens); Ent-n uses natural log.
// Both choices are recorded in the report.

using TokenSeq = std::vector<std::string>;

// unique n-grams / total n-grams across the corpus; absent when there are
// no n-grams of this order.
std::optional<double> distinct_n(const std::vector<TokenSeq>& responses, int n);

// Shannon entropy (natural log) of the empirical n-gram distribution.
std::optional<double> entropy_n(const std::vector<TokenSeq>& responses, int n);

// |distinct normalized responses| / |responses|; normalization trims,
// collapses whitespace and casefolds.
double unique_sentence_ratio(const std::vector<std::string>& responses);

// Corpus BLEU-1 with brevity penalty, scaled to [0, 100].
double bleu1(const std::vector<TokenSeq>& candidates,
             const std::vector<TokenSeq>& references);

// Mean per-pair ROUGE-1 F-measure, scaled to [0, 100].
double rouge1(const std::vector<TokenSeq>& candidates,
              const std::vector<TokenSeq>& references);

// NLI adapter contract for the consistency score.
class NliAdapter {
public:
    enum class Verdict { Entail, Neutral, Contradict };
    virtual ~NliAdapter() = default;
    virtual std::string name() const = 0;
    virtual Verdict classify(const std::string& premise, const std::string& hypothesis) = 0;
};

// Per response: sum over persona sentences of entail:+1 / neutral:0 /
// contradict:-1; mean over responses.
double c_score(const std::vector<std::string>& responses,
               const std::vector<std::vector<std::string>>& personas,
               NliAdapter& adapter);

struct EvalReport {
    std::optional<double> bleu1;
    std::optional<double> rouge1;
    std::map<int, double> dist;   // per n
    std::map<int, double> ent;    // per n
    std::optional<double> usr;
    std::optional<double> c_score;
    std::optional<double> quantidce;  // adapter slot, unplugged in this artifact
    std::optional<double> bertscore;  // adapter slot, unplugged in this artifact
    std::vector<std::string> notes;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

// metrics: subset of {"bleu","rouge","dist","ent","usr","cscore"}; cscore is
// skipped with a note when no adapter is supplied.
EvalReport evaluate_responses(const std::vector<std::string>& hypotheses,
                              const std::vector<std::string>& references,
                              const std::vector<std::vector<std::string>>& personas,
                              const std::vector<std::string>& metrics,
                              NliAdapter* nli = nullptr);

} // namespace mudi
