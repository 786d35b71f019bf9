#include "mudi/text.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace mudi {

namespace {

bool is_word_char(unsigned char c) {
    return std::isalnum(c) != 0 || c == '\'';
}

} // namespace

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (is_word_char(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            if (!cur.empty()) {
                tokens.push_back(cur);
                cur.clear();
            }
            if (!std::isspace(c)) {
                tokens.push_back(std::string(1, static_cast<char>(c)));
            }
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::string normalize_sentence(const std::string& text) {
    std::string out;
    bool in_space = false;
    for (unsigned char c : trim(text)) {
        if (std::isspace(c)) {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out.push_back(' ');
        in_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

double overlap_coefficient(const std::vector<std::string>& a,
                           const std::vector<std::string>& b) {
    std::set<std::string> sa(a.begin(), a.end());
    std::set<std::string> sb(b.begin(), b.end());
    if (sa.empty() || sb.empty()) return 0.0;
    std::size_t common = 0;
    for (const auto& t : sa) common += sb.count(t);
    return static_cast<double>(common) /
           static_cast<double>(std::min(sa.size(), sb.size()));
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

} // namespace mudi
