#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lexrl/dictionary.hpp"
#include "lexrl/random.hpp"
#include "lexrl/transformer.hpp"

namespace lexrl {

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kParamsFile = "params.bin";
inline constexpr int kCheckpointFormat = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Transformer<float> model;
  std::uint64_t step = 0;
  /// Stream state of the run rng, so a resumed run continues the sequence.
  Rng rng;
  /// Free-form run settings recorded for provenance.
  nlohmann::json hyperparameters = nlohmann::json::object();
};

inline nlohmann::json config_to_json(const TransformerConfig& c) {
  return {{"vocab_size", c.vocab_size},         {"layers", c.layers},
          {"width", c.width},                   {"heads", c.heads},
          {"context_length", c.context_length}, {"prompt_window", c.prompt_window}};
}

inline TransformerConfig config_from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.context_length = j.at("context_length").get<std::size_t>();
  c.prompt_window = j.at("prompt_window").get<std::size_t>();
  return c;
}

namespace detail {
inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
  }
  return v;
}
}  // namespace detail

/// Writes `dir/manifest.json` and `dir/params.bin` (little-endian float32,
/// tensors back to back in manifest order). Output depends only on the
/// arguments, so identical runs give byte-identical files.
inline void save_checkpoint(const std::filesystem::path& dir, const Transformer<float>& model, std::uint64_t step,
                            const Rng& rng, const nlohmann::json& hyperparameters = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : model.tensors()) tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
  const nlohmann::json manifest = {{"format", kCheckpointFormat},
                                   {"model", config_to_json(model.config())},
                                   {"vocab_hash", std::to_string(model.vocabulary().hash())},
                                   {"step", step},
                                   {"rng_state", serialize_rng(rng)},
                                   {"hyperparameters", hyperparameters},
                                   {"tensors", tensors}};
  {
    std::ofstream out(dir / kManifestFile, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / kManifestFile).string());
    out << manifest.dump(2) << '\n';
  }
  std::ofstream out(dir / kParamsFile, std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / kParamsFile).string());
  const auto params = model.parameters();
  std::vector<std::uint32_t> words(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    words[i] = detail::to_little_endian(std::bit_cast<std::uint32_t>(params[i]));
  }
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw IoError("short write to " + (dir / kParamsFile).string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir, const Vocabulary& vocab = Vocabulary{}) {
  std::ifstream in(dir / kManifestFile, std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / kManifestFile).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad manifest: ") + e.what());
  }
  if (manifest.value("format", 0) != kCheckpointFormat) throw CheckpointError("unsupported checkpoint format");
  if (manifest.at("vocab_hash").get<std::string>() != std::to_string(vocab.hash())) {
    throw CheckpointError("checkpoint vocabulary does not match");
  }

  Checkpoint ck{Transformer<float>(config_from_json(manifest.at("model")), vocab), 0, Rng{}, {}};
  ck.step = manifest.at("step").get<std::uint64_t>();
  ck.rng = deserialize_rng(manifest.at("rng_state").get<std::string>());
  ck.hyperparameters = manifest.value("hyperparameters", nlohmann::json::object());

  const auto& listed = manifest.at("tensors");
  const auto& expected = ck.model.tensors();
  if (listed.size() != expected.size()) throw CheckpointError("tensor count mismatch");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& t = listed[i];
    if (t.at("name").get<std::string>() != expected[i].name ||
        t.at("shape").at(0).get<std::size_t>() != expected[i].rows ||
        t.at("shape").at(1).get<std::size_t>() != expected[i].cols) {
      throw CheckpointError("tensor " + std::to_string(i) + " does not match the model layout");
    }
  }

  std::ifstream bin(dir / kParamsFile, std::ios::binary);
  if (!bin) throw IoError("cannot open " + (dir / kParamsFile).string());
  auto params = ck.model.parameters();
  std::vector<std::uint32_t> words(params.size());
  bin.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (bin.gcount() != static_cast<std::streamsize>(words.size() * 4)) throw CheckpointError("params.bin too short");
  if (bin.peek() != std::char_traits<char>::eof()) throw CheckpointError("params.bin too long");
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] = std::bit_cast<float>(detail::to_little_endian(words[i]));
  }
  return ck;
}

}  // namespace lexrl
