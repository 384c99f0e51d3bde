#include "imm_gpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace imm_gpt {

namespace {

constexpr char kMagic[8] = {'I', 'M', 'M', 'G', 'P', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw CheckpointError("truncated " + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const GPTModel<float>& model, const Vocab& vocab) {
  nlohmann::json header;
  header["config"] = model.config();
  header["vocab"] = vocab.to_json();
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    header["tensors"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    for (float v : p.tensor.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(in, "header length");
  if (header_len > (1u << 26)) throw CheckpointError("implausible header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw CheckpointError("truncated header");

  nlohmann::json header;
  ModelConfig config;
  Vocab vocab;
  try {
    header = nlohmann::json::parse(text);
    config = header.at("config").get<ModelConfig>();
    vocab = Vocab::from_json(header.at("vocab"));
    config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (vocab.size() != config.vocab_size) throw CheckpointError("vocab size does not match config");

  auto model = GPTModel<float>::allocate(config);
  const auto& params = model.parameters();
  const auto& tensors = header.at("tensors");
  if (!tensors.is_array() || tensors.size() != params.size()) {
    throw CheckpointError("checkpoint tensor list does not match the configured model");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto name = tensors[k].value("name", std::string());
    const auto shape = tensors[k].value("shape", Shape{});
    if (name != params[k].name || shape != params[k].tensor.shape()) {
      throw CheckpointError("unexpected tensor " + name + " " + shape_str(shape) + ", wanted " +
                            params[k].name + " " + shape_str(params[k].tensor.shape()));
    }
    Tensor<float> t = params[k].tensor;
    for (float& v : t.mutable_data()) v = std::bit_cast<float>(get_le<std::uint32_t>(in, "tensor " + name));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after tensors");
  return {std::move(config), std::move(vocab), std::move(model)};
}

}  // namespace imm_gpt
