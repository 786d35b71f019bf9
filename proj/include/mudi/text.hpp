#pragma once

#include <string>
#include <vector>

namespace mudi {

// Word tokenization shared by the metrics suite, the heuristic annotator
// and the generator vocabulary: lowercase, alphanumeric runs are tokens,
// punctuation characters are single-character tokens, whitespace splits.
std::vector<std::string> tokenize_words(const std::string& text);

// Trim + collapse internal whitespace + lowercase (sentence identity for USR).
std::string normalize_sentence(const std::string& text);

std::string trim(const std::string& s);

// |A ∩ B| / min(|A|, |B|) over unique tokens; 0 when either side is empty.
double overlap_coefficient(const std::vector<std::string>& a,
                           const std::vector<std::string>& b);

std::string join(const std::vector<std::string>& parts, const std::string& sep);

} // namespace mudi
