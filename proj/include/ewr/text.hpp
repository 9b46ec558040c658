#pragma once

#include <string>
#include <unordered_set>
#include <vector>

namespace ewr::text {

// Canonical tokenisation for every lexical metric: whitespace split,
// lowercasing, surrounding punctuation stripped. Control tokens like
// "<entailed>" pass through unchanged.
std::vector<std::string> tokenize(const std::string& s);

std::string join(const std::vector<std::string>& tokens);

// Fixed 50-word stopword list used by the hallucination-rate proxy.
const std::unordered_set<std::string>& stopwords();
bool is_stopword(const std::string& token);

bool is_control_token(const std::string& token);

}  // namespace ewr::text
