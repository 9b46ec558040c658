#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace ewr::data {

// One grounded-dialogue example at the text level (the JSONL format):
// {"context": [str,...], "knowledge": [str,...], "response": str,
//  "control_tokens": [str,...]?, "meta": {...}?}
struct TextExample {
  std::vector<std::string> context;    // dialogue turns, oldest first
  std::vector<std::string> knowledge;  // grounding documents
  std::string response;
  std::vector<std::string> control_tokens;
  nlohmann::json meta = nlohmann::json::object();
};

std::vector<TextExample> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::vector<TextExample>& examples,
                const std::filesystem::path& path);
nlohmann::json to_json(const TextExample& ex);
TextExample example_from_json(const nlohmann::json& j);

// Tokenised views used by the lexical metrics.
std::vector<std::string> context_tokens(const TextExample& ex);
std::vector<std::string> knowledge_tokens(const TextExample& ex);
std::vector<std::string> response_tokens(const TextExample& ex);

// Closed vocabulary mapping words to token ids. The first four ids are
// reserved: <pad>=0, <bos>=1, <eos>=2, <sep>=3.
class Vocab {
 public:
  static constexpr int pad = 0;
  static constexpr int bos = 1;
  static constexpr int eos = 2;
  static constexpr int sep = 3;

  static Vocab from_words(std::vector<std::string> words);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(const std::string& word) const;  // data error on unknown word
  const std::string& word(int id) const;
  bool knows(const std::string& word) const { return ids_.count(word) > 0; }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

// Token-id level example consumed by the toy LM.
struct DialogueExample {
  std::vector<std::vector<int>> context;  // turns
  std::vector<int> knowledge;             // documents joined with <sep>
  std::vector<int> response;              // gold response, <eos> appended
  std::vector<int> control_tokens;
};

// Conditioning plus the response prefix generated so far.
struct DecodeState {
  std::vector<int> context;  // turns flattened, joined with <sep>
  std::vector<int> knowledge;
  std::vector<int> control_tokens;
  std::vector<int> prefix;  // response tokens so far (never includes <bos>)
};

DecodeState conditioning_of(const DialogueExample& ex);

// Text -> ids. Responses get <eos> appended; knowledge documents are joined
// with <sep>. Unknown words raise a data error naming the word.
DialogueExample encode(const TextExample& ex, const Vocab& vocab);
std::vector<DialogueExample> encode_all(const std::vector<TextExample>& examples,
                                        const Vocab& vocab);

// Ids -> text, dropping the reserved structural tokens.
std::string decode_response(const std::vector<int>& tokens, const Vocab& vocab);

}  // namespace ewr::data
