#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lexrl/data.hpp"
#include "lexrl/dictionary.hpp"
#include "lexrl/eval.hpp"
#include "lexrl/grpo.hpp"
#include "lexrl/metrics.hpp"
#include "lexrl/sft.hpp"
#include "lexrl/transformer.hpp"

namespace lexrl {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every tunable of every stage in one flat record. Defaults are the
/// reference hyperparameters; the model shape and the toy language default
/// to the desk-scale setup.
struct RunConfig {
  SftConfig sft;
  GrpoConfig grpo;
  TransformerConfig model;
  ToyLanguageSpec toy;
  BleuConfig bleu;
  /// Decoding for eval and generate.
  bool eval_greedy = true;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  std::string corpus, test, dict, ckpt, out, report, transcripts, out_dir;

  EvalConfig eval() const {
    EvalConfig e;
    e.tool_budget = grpo.tool_budget;
    e.generation = {grpo.temperature, grpo.max_new_tokens, eval_greedy};
    e.bleu = bleu;
    e.seed = seed;
    e.workers = workers;
    return e;
  }
  SftConfig sft_config() const {
    SftConfig c = sft;
    c.seed = seed;
    c.workers = workers;
    return c;
  }
  GrpoConfig grpo_config() const {
    GrpoConfig c = grpo;
    c.bleu = bleu;
    c.seed = seed;
    c.workers = workers;
    return c;
  }
  ToyLanguageSpec toy_spec() const {
    ToyLanguageSpec t = toy;
    t.seed = seed;
    return t;
  }
};

namespace detail {

struct ConfigField {
  std::function<nlohmann::json(const RunConfig&)> get;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
};

template <typename T, typename Member>
ConfigField field(Member member) {
  return {[member](const RunConfig& c) { return nlohmann::json(member(const_cast<RunConfig&>(c))); },
          [member](RunConfig& c, const nlohmann::json& j) { member(c) = j.get<T>(); }};
}

inline const std::map<std::string, ConfigField>& config_fields() {
  using R = RunConfig;
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> f;
    // SFT
    f["num_epochs"] = field<std::size_t>([](R& c) -> auto& { return c.sft.epochs; });
    f["batch_size"] = field<std::size_t>([](R& c) -> auto& { return c.sft.batch_size; });
    f["lr"] = field<double>([](R& c) -> auto& { return c.sft.lr; });
    f["weight_decay"] = field<double>([](R& c) -> auto& { return c.sft.weight_decay; });
    f["sft_gradient_clipping"] = field<double>([](R& c) -> auto& { return c.sft.grad_clip_norm; });
    f["max_lookup_words"] = field<std::size_t>([](R& c) -> auto& { return c.sft.max_lookup_words; });
    // shared optimizer constants
    f["betas"] = {[](const R& c) { return nlohmann::json::array({c.sft.beta1, c.sft.beta2}); },
                  [](R& c, const nlohmann::json& j) {
                    if (!j.is_array() || j.size() != 2) throw ConfigError("betas must be a two-element array");
                    c.sft.beta1 = c.grpo.beta1 = j[0].get<double>();
                    c.sft.beta2 = c.grpo.beta2 = j[1].get<double>();
                  }};
    f["eps"] = {[](const R& c) { return nlohmann::json(c.sft.eps); },
                [](R& c, const nlohmann::json& j) { c.sft.eps = c.grpo.eps = j.get<double>(); }};
    // RL
    f["max_steps"] = field<std::size_t>([](R& c) -> auto& { return c.grpo.max_steps; });
    f["sims_per_prompt"] = field<std::size_t>([](R& c) -> auto& { return c.grpo.group_size; });
    f["policy_lr"] = field<double>([](R& c) -> auto& { return c.grpo.lr; });
    f["temperature"] = field<double>([](R& c) -> auto& { return c.grpo.temperature; });
    f["max_new_tokens"] = field<std::size_t>([](R& c) -> auto& { return c.grpo.max_new_tokens; });
    f["accum_grad_steps"] = field<std::size_t>([](R& c) -> auto& { return c.grpo.grad_accum_steps; });
    f["gradient_clipping"] = field<double>([](R& c) -> auto& { return c.grpo.grad_clip_norm; });
    f["rl_weight_decay"] = field<double>([](R& c) -> auto& { return c.grpo.weight_decay; });
    f["eval_every"] = field<std::size_t>([](R& c) -> auto& { return c.grpo.eval_every; });
    f["eval_set_size"] = field<std::size_t>([](R& c) -> auto& { return c.grpo.eval_set_size; });
    f["tool_budget"] = field<std::size_t>([](R& c) -> auto& { return c.grpo.tool_budget; });
    f["reward"] = {[](const R& c) { return nlohmann::json(to_string(c.grpo.reward_kind)); },
                   [](R& c, const nlohmann::json& j) { c.grpo.reward_kind = parse_reward_kind(j.get<std::string>()); }};
    // metric
    f["bleu_max_order"] = field<std::size_t>([](R& c) -> auto& { return c.bleu.max_order; });
    f["bleu_smoothing"] = {
        [](const R& c) { return nlohmann::json(c.bleu.smoothing == BleuSmoothing::None ? "none" : "add_one"); },
        [](R& c, const nlohmann::json& j) {
          const auto s = j.get<std::string>();
          if (s == "none") {
            c.bleu.smoothing = BleuSmoothing::None;
          } else if (s == "add_one") {
            c.bleu.smoothing = BleuSmoothing::AddOneHigherOrders;
          } else {
            throw ConfigError("bleu_smoothing must be none or add_one");
          }
        }};
    f["eval_greedy"] = field<bool>([](R& c) -> auto& { return c.eval_greedy; });
    // model
    f["layers"] = field<std::size_t>([](R& c) -> auto& { return c.model.layers; });
    f["width"] = field<std::size_t>([](R& c) -> auto& { return c.model.width; });
    f["heads"] = field<std::size_t>([](R& c) -> auto& { return c.model.heads; });
    f["context_length"] = field<std::size_t>([](R& c) -> auto& { return c.model.context_length; });
    f["prompt_window"] = field<std::size_t>([](R& c) -> auto& { return c.model.prompt_window; });
    // toy language
    f["lexicon_size"] = field<std::size_t>([](R& c) -> auto& { return c.toy.lexicon_size; });
    f["min_sentence_words"] = field<std::size_t>([](R& c) -> auto& { return c.toy.min_sentence_words; });
    f["max_sentence_words"] = field<std::size_t>([](R& c) -> auto& { return c.toy.max_sentence_words; });
    f["dict_coverage"] = field<double>([](R& c) -> auto& { return c.toy.dict_coverage; });
    f["corpus_coverage"] = field<double>([](R& c) -> auto& { return c.toy.corpus_coverage; });
    f["suffix_rule_count"] = field<std::size_t>([](R& c) -> auto& { return c.toy.suffix_rule_count; });
    f["min_word_chars"] = field<std::size_t>([](R& c) -> auto& { return c.toy.min_word_chars; });
    f["max_word_chars"] = field<std::size_t>([](R& c) -> auto& { return c.toy.max_word_chars; });
    f["train_size"] = field<std::size_t>([](R& c) -> auto& { return c.toy.train_size; });
    f["test_size"] = field<std::size_t>([](R& c) -> auto& { return c.toy.test_size; });
    // run
    f["seed"] = field<std::uint64_t>([](R& c) -> auto& { return c.seed; });
    f["workers"] = field<std::size_t>([](R& c) -> auto& { return c.workers; });
    f["corpus"] = field<std::string>([](R& c) -> auto& { return c.corpus; });
    f["test"] = field<std::string>([](R& c) -> auto& { return c.test; });
    f["dict"] = field<std::string>([](R& c) -> auto& { return c.dict; });
    f["ckpt"] = field<std::string>([](R& c) -> auto& { return c.ckpt; });
    f["out"] = field<std::string>([](R& c) -> auto& { return c.out; });
    f["report"] = field<std::string>([](R& c) -> auto& { return c.report; });
    f["transcripts"] = field<std::string>([](R& c) -> auto& { return c.transcripts; });
    f["out_dir"] = field<std::string>([](R& c) -> auto& { return c.out_dir; });
    return f;
  }();
  return fields;
}

}  // namespace detail

inline bool is_config_key(const std::string& key) { return detail::config_fields().count(key) > 0; }

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_fields()) out.push_back(k);
  return out;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, f] : detail::config_fields()) j[k] = f.get(c);
  return j;
}

inline void set_config_value(RunConfig& c, const std::string& key, const nlohmann::json& value) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(c, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + key + "': " + value.dump());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

/// Overlays a flat JSON object onto `c`. Unknown keys are rejected.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  for (const auto& [k, v] : j.items()) set_config_value(c, k, v);
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  apply_config_json(c, j);
}

/// Parses a command-line string into the JSON type the key already holds.
inline void set_config_from_string(RunConfig& c, const std::string& key, const std::string& text) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  const nlohmann::json current = it->second.get(c);
  nlohmann::json value;
  if (current.is_string()) {
    value = text;
  } else {
    value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) throw ConfigError("bad value for '" + key + "': " + text);
    if (current.is_number_unsigned() && value.is_number_integer() && value.get<std::int64_t>() < 0) {
      throw ConfigError("'" + key + "' must be non-negative");
    }
  }
  set_config_value(c, key, value);
}

}  // namespace lexrl
