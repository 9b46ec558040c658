#include "ewr/dataset.hpp"

#include <fstream>

#include "ewr/error.hpp"
#include "ewr/text.hpp"

namespace ewr::data {

using nlohmann::json;

nlohmann::json to_json(const TextExample& ex) {
  json j;
  j["context"] = ex.context;
  j["knowledge"] = ex.knowledge;
  j["response"] = ex.response;
  if (!ex.control_tokens.empty()) j["control_tokens"] = ex.control_tokens;
  if (!ex.meta.empty()) j["meta"] = ex.meta;
  return j;
}

TextExample example_from_json(const json& j) {
  if (!j.is_object() || !j.contains("context") || !j.contains("knowledge") ||
      !j.contains("response"))
    fail(ErrorKind::data,
         "dialogue example must contain context, knowledge and response");
  TextExample ex;
  ex.context = j["context"].get<std::vector<std::string>>();
  ex.knowledge = j["knowledge"].get<std::vector<std::string>>();
  ex.response = j["response"].get<std::string>();
  if (j.contains("control_tokens"))
    ex.control_tokens = j["control_tokens"].get<std::vector<std::string>>();
  if (j.contains("meta")) ex.meta = j["meta"];
  return ex;
}

std::vector<TextExample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::vector<TextExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      fail(ErrorKind::data, path.string() + ":" + std::to_string(lineno) +
                                ": invalid JSON line");
    out.push_back(example_from_json(j));
  }
  return out;
}

void save_jsonl(const std::vector<TextExample>& examples,
                const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  for (const auto& ex : examples) out << to_json(ex).dump() << "\n";
  if (!out) fail(ErrorKind::io, "write failure on " + path.string());
}

std::vector<std::string> context_tokens(const TextExample& ex) {
  std::vector<std::string> tokens;
  for (const auto& turn : ex.context) {
    auto t = text::tokenize(turn);
    tokens.insert(tokens.end(), t.begin(), t.end());
  }
  return tokens;
}

std::vector<std::string> knowledge_tokens(const TextExample& ex) {
  std::vector<std::string> tokens;
  for (const auto& doc : ex.knowledge) {
    auto t = text::tokenize(doc);
    tokens.insert(tokens.end(), t.begin(), t.end());
  }
  return tokens;
}

std::vector<std::string> response_tokens(const TextExample& ex) {
  return text::tokenize(ex.response);
}

Vocab Vocab::from_words(std::vector<std::string> words) {
  if (words.size() < 4 || words[0] != "<pad>" || words[1] != "<bos>" ||
      words[2] != "<eos>" || words[3] != "<sep>")
    fail(ErrorKind::invalid_config,
         "vocabulary must start with <pad>, <bos>, <eos>, <sep>");
  Vocab v;
  v.words_ = std::move(words);
  for (std::size_t i = 0; i < v.words_.size(); ++i) {
    if (v.words_[i].empty())
      fail(ErrorKind::invalid_config, "vocabulary contains an empty word");
    if (!v.ids_.emplace(v.words_[i], static_cast<int>(i)).second)
      fail(ErrorKind::invalid_config, "duplicate vocabulary word: " + v.words_[i]);
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("words"))
    fail(ErrorKind::data, path.string() + ": vocabulary must be {\"words\": [...]}");
  return from_words(j["words"].get<std::vector<std::string>>());
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  json j;
  j["words"] = words_;
  out << j.dump(2) << "\n";
}

int Vocab::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end())
    fail(ErrorKind::data, "word not in vocabulary: " + word);
  return it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size())
    fail(ErrorKind::token_out_of_range,
         "token id " + std::to_string(id) + " outside vocabulary of size " +
             std::to_string(size()));
  return words_[id];
}

namespace {

std::vector<int> encode_tokens(const std::vector<std::string>& tokens,
                               const Vocab& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

}  // namespace

DialogueExample encode(const TextExample& ex, const Vocab& vocab) {
  DialogueExample out;
  for (const auto& turn : ex.context)
    out.context.push_back(encode_tokens(text::tokenize(turn), vocab));
  bool first = true;
  for (const auto& doc : ex.knowledge) {
    if (!first) out.knowledge.push_back(Vocab::sep);
    first = false;
    for (int id : encode_tokens(text::tokenize(doc), vocab))
      out.knowledge.push_back(id);
  }
  out.response = encode_tokens(text::tokenize(ex.response), vocab);
  out.response.push_back(Vocab::eos);
  out.control_tokens = encode_tokens(ex.control_tokens, vocab);
  return out;
}

std::vector<DialogueExample> encode_all(const std::vector<TextExample>& examples,
                                        const Vocab& vocab) {
  std::vector<DialogueExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode(ex, vocab));
  return out;
}

DecodeState conditioning_of(const DialogueExample& ex) {
  DecodeState s;
  bool first = true;
  for (const auto& turn : ex.context) {
    if (!first) s.context.push_back(Vocab::sep);
    first = false;
    s.context.insert(s.context.end(), turn.begin(), turn.end());
  }
  s.knowledge = ex.knowledge;
  s.control_tokens = ex.control_tokens;
  return s;
}

std::string decode_response(const std::vector<int>& tokens, const Vocab& vocab) {
  std::vector<std::string> words;
  for (int id : tokens) {
    if (id == Vocab::pad || id == Vocab::bos || id == Vocab::eos ||
        id == Vocab::sep)
      continue;
    words.push_back(vocab.word(id));
  }
  return text::join(words);
}

}  // namespace ewr::data
