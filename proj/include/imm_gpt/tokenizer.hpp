#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "imm_gpt/ops.hpp"

namespace imm_gpt {

/// Decodes UTF-8 into code points. Throws std::invalid_argument on
/// malformed input, naming the byte offset.
std::u32string utf8_decode(std::string_view bytes);
std::string utf8_encode(std::u32string_view text);
std::string utf8_encode(char32_t c);

/// Character vocabulary, ids assigned in code point order.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<char32_t> chars);

  /// Throws std::invalid_argument("empty corpus") on empty text.
  static Vocab build(std::u32string_view text);

  std::int64_t size() const { return static_cast<std::int64_t>(chars_.size()); }
  const std::vector<char32_t>& chars() const { return chars_; }
  bool contains(char32_t c) const { return ids_.count(c) != 0; }
  TokenId id_of(char32_t c) const;
  char32_t char_of(TokenId id) const;

  std::vector<TokenId> encode(std::u32string_view text) const;
  std::u32string decode(std::span<const TokenId> ids) const;

  /// {"<char>": id, ..., "size": V}
  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  bool operator==(const Vocab& other) const { return chars_ == other.chars_; }

 private:
  std::vector<char32_t> chars_;
  std::map<char32_t, TokenId> ids_;
};

struct TokenDataset {
  Vocab vocab;
  std::vector<TokenId> train_ids;
  std::vector<TokenId> val_ids;

  /// Splits the encoded corpus at floor(train_fraction * length).
  static TokenDataset from_text(std::u32string_view text, double train_fraction = 0.9);
  static TokenDataset from_file(const std::filesystem::path& path, double train_fraction = 0.9);

  std::span<const TokenId> split(std::string_view name) const;
};

std::u32string read_corpus(const std::filesystem::path& path);

/// Row-major B×T token matrices; y is x shifted one position ahead.
struct Batch {
  std::int64_t batch_size = 0;
  std::int64_t block_size = 0;
  std::vector<TokenId> x;
  std::vector<TokenId> y;
  std::vector<std::int64_t> offsets;
};

/// Draws batch_size windows with offsets uniform in [0, len - block_size - 1].
Batch sample_batch(std::span<const TokenId> data, std::int64_t block_size,
                   std::int64_t batch_size, std::mt19937_64& rng);

}  // namespace imm_gpt
