#include "imm_gpt/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <stdexcept>

namespace imm_gpt {

namespace {

std::string describe(char32_t c) {
  std::ostringstream os;
  os << "U+" << std::hex << std::uppercase << static_cast<std::uint32_t>(c);
  if (c >= 0x20 && c != 0x7F) os << " '" << utf8_encode(c) << "'";
  return os.str();
}

}  // namespace

std::u32string utf8_decode(std::string_view bytes) {
  std::u32string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  while (i < bytes.size()) {
    const auto b0 = static_cast<unsigned char>(bytes[i]);
    int extra = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      extra = 1;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      extra = 2;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      extra = 3;
      cp = b0 & 0x07;
    } else {
      throw std::invalid_argument("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + static_cast<std::size_t>(extra) >= bytes.size() && extra > 0) {
      throw std::invalid_argument("truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    for (int k = 1; k <= extra; ++k) {
      const auto b = static_cast<unsigned char>(bytes[i + k]);
      if ((b & 0xC0) != 0x80) {
        throw std::invalid_argument("invalid UTF-8 continuation byte at offset " +
                                    std::to_string(i + k));
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(extra) + 1;
  }
  return out;
}

std::string utf8_encode(char32_t c) {
  std::string out;
  if (c < 0x80) {
    out.push_back(static_cast<char>(c));
  } else if (c < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (c >> 6)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else if (c < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (c >> 12)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (c >> 18)));
    out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  }
  return out;
}

std::string utf8_encode(std::u32string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char32_t c : text) out += utf8_encode(c);
  return out;
}

Vocab::Vocab(std::vector<char32_t> chars) : chars_(std::move(chars)) {
  std::sort(chars_.begin(), chars_.end());
  chars_.erase(std::unique(chars_.begin(), chars_.end()), chars_.end());
  for (std::size_t i = 0; i < chars_.size(); ++i) ids_[chars_[i]] = static_cast<TokenId>(i);
}

Vocab Vocab::build(std::u32string_view text) {
  if (text.empty()) throw std::invalid_argument("empty corpus");
  std::set<char32_t> unique(text.begin(), text.end());
  return Vocab(std::vector<char32_t>(unique.begin(), unique.end()));
}

TokenId Vocab::id_of(char32_t c) const {
  auto it = ids_.find(c);
  if (it == ids_.end()) throw std::out_of_range("character " + describe(c) + " not in vocabulary");
  return it->second;
}

char32_t Vocab::char_of(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                            std::to_string(size()));
  }
  return chars_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::u32string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char32_t c : text) ids.push_back(id_of(c));
  return ids;
}

std::u32string Vocab::decode(std::span<const TokenId> ids) const {
  std::u32string out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(char_of(id));
  return out;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < chars_.size(); ++i) j[utf8_encode(chars_[i])] = i;
  j["size"] = chars_.size();
  return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("size")) {
    throw std::invalid_argument("vocab JSON must be an object with a \"size\" field");
  }
  const auto size = j.at("size").get<std::int64_t>();
  std::vector<char32_t> chars(static_cast<std::size_t>(size), 0);
  std::vector<bool> seen(static_cast<std::size_t>(size), false);
  for (const auto& [key, value] : j.items()) {
    if (key == "size") continue;
    const auto cps = utf8_decode(key);
    if (cps.size() != 1) throw std::invalid_argument("vocab key is not a single character: " + key);
    const auto id = value.get<std::int64_t>();
    if (id < 0 || id >= size || seen[id]) {
      throw std::invalid_argument("vocab id " + std::to_string(id) + " invalid or duplicated");
    }
    seen[id] = true;
    chars[id] = cps[0];
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw std::invalid_argument("vocab ids have gaps");
  }
  Vocab v(chars);
  if (v.chars() != chars) throw std::invalid_argument("vocab ids are not in code point order");
  return v;
}

std::u32string read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return utf8_decode(bytes);
}

TokenDataset TokenDataset::from_text(std::u32string_view text, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train fraction must be in (0, 1)");
  }
  TokenDataset ds;
  ds.vocab = Vocab::build(text);
  auto ids = ds.vocab.encode(text);
  const auto n = static_cast<std::size_t>(train_fraction * static_cast<double>(ids.size()));
  ds.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
  ds.val_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end());
  return ds;
}

TokenDataset TokenDataset::from_file(const std::filesystem::path& path, double train_fraction) {
  return from_text(read_corpus(path), train_fraction);
}

std::span<const TokenId> TokenDataset::split(std::string_view name) const {
  if (name == "train") return train_ids;
  if (name == "val") return val_ids;
  throw std::invalid_argument("unknown split: " + std::string(name));
}

Batch sample_batch(std::span<const TokenId> data, std::int64_t block_size, std::int64_t batch_size,
                   std::mt19937_64& rng) {
  if (block_size < 1 || batch_size < 1) throw std::invalid_argument("block and batch size must be >= 1");
  const auto len = static_cast<std::int64_t>(data.size());
  if (len < block_size + 1) {
    throw std::invalid_argument("data of length " + std::to_string(len) +
                                " is shorter than block_size + 1 = " + std::to_string(block_size + 1));
  }
  std::uniform_int_distribution<std::int64_t> pick(0, len - block_size - 1);
  Batch batch;
  batch.batch_size = batch_size;
  batch.block_size = block_size;
  batch.x.resize(static_cast<std::size_t>(batch_size * block_size));
  batch.y.resize(batch.x.size());
  for (std::int64_t b = 0; b < batch_size; ++b) {
    const auto off = pick(rng);
    batch.offsets.push_back(off);
    std::copy_n(data.begin() + off, block_size, batch.x.begin() + b * block_size);
    std::copy_n(data.begin() + off + 1, block_size, batch.y.begin() + b * block_size);
  }
  return batch;
}

}  // namespace imm_gpt
