#include "headlens/tokenizer.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "headlens/error.hpp"

namespace headlens {

namespace {

std::size_t utf8_len(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> id_to_token, std::string bos, std::string unk)
    : id_to_token_(std::move(id_to_token)), bos_(std::move(bos)), unk_(std::move(unk)) {
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    const auto& t = id_to_token_[i];
    if (t.empty()) throw Error("vocab: empty token at id " + std::to_string(i));
    if (!token_to_id_.emplace(t, static_cast<int>(i)).second)
      throw Error("vocab: duplicate token '" + t + "'");
    max_len_ = std::max(max_len_, t.size());
  }
  if (!bos_.empty()) {
    auto it = token_to_id_.find(bos_);
    if (it == token_to_id_.end()) throw Error("vocab: bos token '" + bos_ + "' not in vocabulary");
    bos_id_ = it->second;
  }
  if (!unk_.empty()) {
    auto it = token_to_id_.find(unk_);
    if (it == token_to_id_.end()) throw Error("vocab: unk token '" + unk_ + "' not in vocabulary");
    unk_id_ = it->second;
  }
}

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_json, std::string bos, std::string unk) {
  nlohmann::json j;
  try {
    std::ifstream in(vocab_json);
    if (!in) throw Error("cannot open " + vocab_json.string());
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(vocab_json.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(vocab_json.string() + ": expected an object token -> id");
  std::vector<std::string> tokens(j.size());
  std::vector<bool> filled(j.size(), false);
  for (const auto& [tok, id_json] : j.items()) {
    const auto id = id_json.get<long long>();
    if (id < 0 || id >= static_cast<long long>(tokens.size()) || filled[id])
      throw Error(vocab_json.string() + ": ids must be a permutation of 0..n-1 (bad id for '" + tok + "')");
    tokens[id] = tok;
    filled[id] = true;
  }
  return Tokenizer(std::move(tokens), std::move(bos), std::move(unk));
}

void Tokenizer::save(const std::filesystem::path& vocab_json) const {
  // Written in id order so the file diffs cleanly.
  std::ofstream out(vocab_json);
  out << "{\n";
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    out << ' ' << nlohmann::json(id_to_token_[i]).dump() << ": " << i
        << (i + 1 < id_to_token_.size() ? ",\n" : "\n");
  }
  out << "}\n";
  if (!out) throw Error("failed writing " + vocab_json.string());
}

std::vector<int> Tokenizer::encode(std::string_view text, bool add_bos) const {
  std::vector<int> ids;
  if (add_bos) {
    if (!bos_id_) throw Error("tokenizer has no bos token");
    ids.push_back(*bos_id_);
  }
  std::size_t pos = 0;
  std::string key;
  while (pos < text.size()) {
    const std::size_t longest = std::min(max_len_, text.size() - pos);
    int match = -1;
    std::size_t match_len = 0;
    for (std::size_t len = longest; len > 0; --len) {
      key.assign(text.substr(pos, len));
      auto it = token_to_id_.find(key);
      if (it != token_to_id_.end()) {
        match = it->second;
        match_len = len;
        break;
      }
    }
    if (match < 0) {
      if (!unk_id_)
        throw Error("tokenizer: no token matches input at byte " + std::to_string(pos));
      match = *unk_id_;
      match_len = std::min(utf8_len(static_cast<unsigned char>(text[pos])), text.size() - pos);
    }
    ids.push_back(match);
    pos += match_len;
  }
  return ids;
}

std::string Tokenizer::decode(int id) const {
  if (id < 0 || id >= size()) throw Error("tokenizer: id " + std::to_string(id) + " out of range");
  return id_to_token_[id];
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) out += decode(id);
  return out;
}

std::optional<int> Tokenizer::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

int Tokenizer::first_token(std::string_view text) const {
  if (text.empty()) throw Error("tokenizer: cannot take the first token of an empty string");
  return encode(text, false).front();
}

}  // namespace headlens
