#include "ewr/text.hpp"

#include <algorithm>
#include <cctype>

namespace ewr::text {

namespace {

bool is_punct(char c) {
  static const std::string punct = ".,;:!?\"'()[]{}";
  return punct.find(c) != std::string::npos;
}

std::string normalize(const std::string& raw) {
  if (is_control_token(raw)) return raw;
  std::size_t begin = 0, end = raw.size();
  while (begin < end && is_punct(raw[begin])) ++begin;
  while (end > begin && is_punct(raw[end - 1])) --end;
  std::string out = raw.substr(begin, end - begin);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& s) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      std::string t = normalize(current);
      if (!t.empty()) tokens.push_back(t);
      current.clear();
    }
  };
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      current.push_back(c);
    }
  }
  flush();
  return tokens;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> words = {
      "a",    "about", "an",   "and",  "are",  "as",   "at",   "be",
      "but",  "by",    "did",  "do",   "does", "for",  "from", "had",
      "has",  "have",  "he",   "her",  "his",  "i",    "in",   "indeed",
      "is",   "it",    "its",  "me",   "my",   "no",   "not",  "of",
      "oh",   "on",    "or",   "our",  "out",  "really", "she", "so",
      "tell", "that",  "the",  "they", "this", "to",   "was",  "well",
      "what", "yes",
  };
  return words;
}

bool is_stopword(const std::string& token) {
  return stopwords().count(token) > 0;
}

bool is_control_token(const std::string& token) {
  return token.size() >= 2 && token.front() == '<' && token.back() == '>';
}

}  // namespace ewr::text
