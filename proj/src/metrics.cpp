#include "mudi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "mudi/errors.hpp"
#include "mudi/text.hpp"

namespace mudi {

namespace {

// n-gram keys as joined tokens; '\x1f' cannot appear in tokenized words.
std::map<std::string, long> ngram_counts(const std::vector<TokenSeq>& responses, int n) {
    std::map<std::string, long> counts;
    for (const auto& toks : responses) {
        if (static_cast<int>(toks.size()) < n) continue;
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
            std::string key = toks[i];
            for (int k = 1; k < n; ++k) {
                key += '\x1f';
                key += toks[i + static_cast<std::size_t>(k)];
            }
            ++counts[key];
        }
    }
    return counts;
}

std::map<std::string, long> token_counts(const TokenSeq& toks) {
    std::map<std::string, long> counts;
    for (const auto& t : toks) ++counts[t];
    return counts;
}

} // namespace

std::optional<double> distinct_n(const std::vector<TokenSeq>& responses, int n) {
    if (n < 1) throw ArgumentError("distinct_n: n must be >= 1");
    auto counts = ngram_counts(responses, n);
    long total = 0;
    for (const auto& [k, c] : counts) total += c;
    if (total == 0) return std::nullopt;
    return static_cast<double>(counts.size()) / static_cast<double>(total);
}

std::optional<double> entropy_n(const std::vector<TokenSeq>& responses, int n) {
    if (n < 1) throw ArgumentError("entropy_n: n must be >= 1");
    auto counts = ngram_counts(responses, n);
    long total = 0;
    for (const auto& [k, c] : counts) total += c;
    if (total == 0) return std::nullopt;
    double h = 0.0;
    for (const auto& [k, c] : counts) {
        double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return h;
}

double unique_sentence_ratio(const std::vector<std::string>& responses) {
    if (responses.empty()) throw ArgumentError("usr: empty response list");
    std::set<std::string> distinct;
    for (const auto& r : responses) distinct.insert(normalize_sentence(r));
    return static_cast<double>(distinct.size()) / static_cast<double>(responses.size());
}

double bleu1(const std::vector<TokenSeq>& candidates,
             const std::vector<TokenSeq>& references) {
    if (candidates.size() != references.size()) {
        throw ArgumentError("bleu1: candidate/reference count mismatch");
    }
    long matched = 0, cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        auto cc = token_counts(candidates[i]);
        auto rc = token_counts(references[i]);
        for (const auto& [tok, c] : cc) {
            auto it = rc.find(tok);
            if (it != rc.end()) matched += std::min(c, it->second);
        }
        cand_len += static_cast<long>(candidates[i].size());
        ref_len += static_cast<long>(references[i].size());
    }
    if (cand_len == 0) return 0.0;
    double precision = static_cast<double>(matched) / static_cast<double>(cand_len);
    double bp = cand_len >= ref_len
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(ref_len) /
                                         static_cast<double>(cand_len));
    return 100.0 * bp * precision;
}

double rouge1(const std::vector<TokenSeq>& candidates,
              const std::vector<TokenSeq>& references) {
    if (candidates.size() != references.size()) {
        throw ArgumentError("rouge1: candidate/reference count mismatch");
    }
    if (candidates.empty()) throw ArgumentError("rouge1: empty corpus");
    double total_f1 = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i].empty() || references[i].empty()) continue; // scored 0
        auto cc = token_counts(candidates[i]);
        auto rc = token_counts(references[i]);
        long overlap = 0;
        for (const auto& [tok, c] : cc) {
            auto it = rc.find(tok);
            if (it != rc.end()) overlap += std::min(c, it->second);
        }
        double precision = static_cast<double>(overlap) /
                           static_cast<double>(candidates[i].size());
        double recall = static_cast<double>(overlap) /
                        static_cast<double>(references[i].size());
        if (precision + recall > 0.0) {
            total_f1 += 2.0 * precision * recall / (precision + recall);
        }
    }
    return 100.0 * total_f1 / static_cast<double>(candidates.size());
}

double c_score(const std::vector<std::string>& responses,
               const std::vector<std::vector<std::string>>& personas, NliAdapter& adapter) {
    if (responses.size() != personas.size()) {
        throw ArgumentError("c_score: response/persona count mismatch");
    }
    if (responses.empty()) throw ArgumentError("c_score: empty corpus");
    double total = 0.0;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        double s = 0.0;
        for (const auto& p : personas[i]) {
            switch (adapter.classify(p, responses[i])) {
                case NliAdapter::Verdict::Entail: s += 1.0; break;
                case NliAdapter::Verdict::Neutral: break;
                case NliAdapter::Verdict::Contradict: s -= 1.0; break;
            }
        }
        total += s;
    }
    return total / static_cast<double>(responses.size());
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["tokenizer"] = "lowercase, whitespace split, punctuation as single tokens";
    j["ent_log_base"] = "natural";
    auto put = [&](const char* key, const std::optional<double>& v) {
        if (v) {
            j[key] = *v;
        } else {
            j[key] = nullptr;
        }
    };
    put("bleu1", bleu1);
    put("rouge1", rouge1);
    put("usr", usr);
    put("c_score", c_score);
    put("quantidce", quantidce);
    put("bertscore", bertscore);
    nlohmann::json dist_j = nlohmann::json::object();
    for (const auto& [n, v] : dist) dist_j[std::to_string(n)] = v;
    j["dist"] = dist_j;
    nlohmann::json ent_j = nlohmann::json::object();
    for (const auto& [n, v] : ent) ent_j[std::to_string(n)] = v;
    j["ent"] = ent_j;
    j["notes"] = notes;
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    auto get = [&](const char* key) -> std::optional<double> {
        if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
        return j.at(key).get<double>();
    };
    r.bleu1 = get("bleu1");
    r.rouge1 = get("rouge1");
    r.usr = get("usr");
    r.c_score = get("c_score");
    r.quantidce = get("quantidce");
    r.bertscore = get("bertscore");
    if (j.contains("dist")) {
        for (const auto& [k, v] : j.at("dist").items()) r.dist[std::stoi(k)] = v.get<double>();
    }
    if (j.contains("ent")) {
        for (const auto& [k, v] : j.at("ent").items()) r.ent[std::stoi(k)] = v.get<double>();
    }
    if (j.contains("notes")) r.notes = j.at("notes").get<std::vector<std::string>>();
    return r;
}

EvalReport evaluate_responses(const std::vector<std::string>& hypotheses,
                              const std::vector<std::string>& references,
                              const std::vector<std::vector<std::string>>& personas,
                              const std::vector<std::string>& metrics, NliAdapter* nli) {
    EvalReport report;
    std::vector<TokenSeq> hyp_tok, ref_tok;
    for (const auto& h : hypotheses) hyp_tok.push_back(tokenize_words(h));
    for (const auto& r : references) ref_tok.push_back(tokenize_words(r));

    for (const auto& m : metrics) {
        if (m == "bleu") {
            report.bleu1 = bleu1(hyp_tok, ref_tok);
        } else if (m == "rouge") {
            report.rouge1 = rouge1(hyp_tok, ref_tok);
        } else if (m == "dist") {
            for (int n : {1, 2}) {
                auto v = distinct_n(hyp_tok, n);
                if (v) {
                    report.dist[n] = *v;
                } else {
                    report.notes.push_back("dist-" + std::to_string(n) +
                                           " undefined: no n-grams");
                }
            }
        } else if (m == "ent") {
            for (int n : {1, 2}) {
                auto v = entropy_n(hyp_tok, n);
                if (v) {
                    report.ent[n] = *v;
                } else {
                    report.notes.push_back("ent-" + std::to_string(n) +
                                           " undefined: no n-grams");
                }
            }
        } else if (m == "usr") {
            report.usr = unique_sentence_ratio(hypotheses);
        } else if (m == "cscore") {
            if (nli == nullptr) {
                report.notes.push_back("c_score skipped: no NLI adapter plugged");
            } else {
                try {
                    report.c_score = c_score(hypotheses, personas, *nli);
                } catch (const std::exception& e) {
                    report.notes.push_back(std::string("c_score failed: ") + e.what());
                }
            }
        } else {
            throw ArgumentError("unknown metric: " + m);
        }
    }
    report.notes.push_back("quantidce: adapter not plugged");
    report.notes.push_back("bertscore: adapter not plugged");
    return report;
}

} // namespace mudi
