#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace headlens {

/// Greedy longest-match tokenizer over a fixed string vocabulary.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> id_to_token, std::string bos = {},
                     std::string unk = {});

  static Tokenizer load(const std::filesystem::path& vocab_json, std::string bos = {},
                        std::string unk = {});
  void save(const std::filesystem::path& vocab_json) const;

  /// Unmatched bytes map to the unk token (one UTF-8 code point at a time) or throw.
  std::vector<int> encode(std::string_view text, bool add_bos = true) const;
  std::string decode(int id) const;
  std::string decode(const std::vector<int>& ids) const;

  std::optional<int> find(std::string_view token) const;
  /// First token of `text` (no BOS). Throws if `text` is empty.
  int first_token(std::string_view text) const;

  int size() const { return static_cast<int>(id_to_token_.size()); }
  std::optional<int> bos() const { return bos_id_; }
  std::optional<int> unk() const { return unk_id_; }
  const std::string& bos_token() const { return bos_; }
  const std::string& unk_token() const { return unk_; }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  std::string bos_;
  std::string unk_;
  std::optional<int> bos_id_;
  std::optional<int> unk_id_;
  std::size_t max_len_ = 0;
};

}  // namespace headlens
