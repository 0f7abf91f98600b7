#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lexrl/checkpoint.hpp"
#include "lexrl/config.hpp"
#include "lexrl/data.hpp"
#include "lexrl/dictionary.hpp"
#include "lexrl/eval.hpp"
#include "lexrl/grpo.hpp"
#include "lexrl/metrics.hpp"
#include "lexrl/protocol.hpp"
#include "lexrl/sft.hpp"

#ifndef LEXRL_VERSION
#define LEXRL_VERSION "0.0.0"
#endif

namespace lexrl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string version_string() {
  std::ostringstream os;
  os << "lexrl " << LEXRL_VERSION << " (C++" << (__cplusplus / 100 % 100) << ", "
#if defined(__clang__)
     << "clang " << __clang_major__ << "." << __clang_minor__
#elif defined(__GNUC__)
     << "gcc " << __GNUC__ << "." << __GNUC_MINOR__
#else
     << "unknown compiler"
#endif
     << ")";
  return os.str();
}

namespace detail {

inline std::string flag_name(const std::string& key) {
  std::string s = "--";
  for (char c : key) s += c == '_' ? '-' : c;
  return s;
}

/// Collects `--key value` for every config key that applies to a stage;
/// values are applied after the config file so flags win.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::string config_path;

  void attach(CLI::App& app, const std::vector<std::string>& keys) {
    app.add_option("--config", config_path, "flat JSON config file");
    for (const auto& k : keys) app.add_option(flag_name(k), values[k]);
  }

  RunConfig resolve(const CLI::App& app) const {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& [k, v] : values) {
      if (app.count(flag_name(k)) > 0) set_config_from_string(cfg, k, v);
    }
    return cfg;
  }
};

inline std::vector<std::string> keys_except(std::initializer_list<const char*> drop) {
  std::vector<std::string> out;
  for (const auto& k : config_keys()) {
    bool skip = false;
    for (const char* d : drop) skip = skip || k == d;
    if (!skip) out.push_back(k);
  }
  return out;
}

inline void require(const std::string& value, const std::string& key) {
  if (value.empty()) throw UsageError(flag_name(key) + " is required");
}

/// Settings recorded in checkpoint manifests: everything except file paths,
/// so identical runs in different directories give identical bytes.
inline nlohmann::json run_settings(const RunConfig& cfg) {
  auto j = config_to_json(cfg);
  for (const char* k : {"corpus", "test", "dict", "ckpt", "out", "report", "transcripts", "out_dir"}) j.erase(k);
  return j;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

inline std::optional<Dictionary> maybe_dictionary(const RunConfig& cfg, bool no_tool) {
  if (no_tool || cfg.dict.empty()) return std::nullopt;
  return load_dictionary(cfg.dict);
}

}  // namespace detail

inline int run_dict_build(const std::string& in, const std::string& out, std::size_t max_source_words) {
  const auto raw = load_raw(in);
  const auto dict = filter_entries(raw, max_source_words);
  auto os = detail::open_for_write(out);
  write_entries(os, dict.entries());
  std::cout << "kept=" << dict.size() << " dropped=" << raw.size() - dict.size() << '\n';
  return kExitOk;
}

inline int run_toygen(const RunConfig& cfg) {
  detail::require(cfg.out_dir, "out_dir");
  const auto lang = generate_toy_language(cfg.toy_spec());
  const std::filesystem::path dir = cfg.out_dir;
  std::filesystem::create_directories(dir);
  {
    auto os = detail::open_for_write(dir / "train.tsv");
    write_corpus(os, lang.train);
  }
  {
    auto os = detail::open_for_write(dir / "test.tsv");
    write_corpus(os, lang.test);
  }
  {
    auto os = detail::open_for_write(dir / "dict.tsv");
    write_entries(os, lang.dictionary);
  }
  auto os = detail::open_for_write(dir / "manifest.json");
  os << nlohmann::json{{"spec", to_json(lang.spec)}, {"seed", lang.spec.seed}, {"suffixes", lang.suffixes}}.dump(2)
     << '\n';
  std::cerr << "toygen: " << lang.train.size() << " train, " << lang.test.size() << " test, "
            << lang.dictionary.size() << " dictionary entries\n";
  return kExitOk;
}

inline int run_sft(const RunConfig& cfg, bool no_tool) {
  detail::require(cfg.corpus, "corpus");
  detail::require(cfg.out, "out");
  const auto corpus = load_corpus(cfg.corpus);
  const auto dict = detail::maybe_dictionary(cfg, no_tool);

  std::optional<Transformer<float>> model;
  if (!cfg.ckpt.empty()) {
    model.emplace(load_checkpoint(cfg.ckpt).model);
  } else {
    model.emplace(cfg.model);
    Rng init(derive_seed(cfg.seed, 0x1417));
    model->initialize(init);
  }
  const std::filesystem::path out = cfg.out;
  std::filesystem::create_directories(out);
  auto log = detail::open_for_write(out / "loss_log.csv");
  log << "step,loss\n";
  const auto result = sft_train(*model, corpus, dict ? &*dict : nullptr, cfg.sft_config(), [&](const SftLogEntry& e) {
    log << e.step << ',' << e.loss << '\n';
    if (e.step % 50 == 0) std::cerr << "sft step " << e.step << " loss " << e.loss << '\n';
  });
  save_checkpoint(out, *model, result.log.size(), Rng(derive_seed(cfg.seed, 0x5f7)), detail::run_settings(cfg));
  std::cerr << "sft: " << result.log.size() << " steps, " << result.skipped_examples << " examples skipped\n";
  return kExitOk;
}

inline int run_rl(const RunConfig& cfg, bool no_tool) {
  detail::require(cfg.ckpt, "ckpt");
  detail::require(cfg.corpus, "corpus");
  detail::require(cfg.out, "out");
  const auto corpus = load_corpus(cfg.corpus);
  const auto dict = detail::maybe_dictionary(cfg, no_tool);
  auto model = load_checkpoint(cfg.ckpt).model;
  const std::filesystem::path out = cfg.out;
  std::filesystem::create_directories(out);

  auto grpo = cfg.grpo_config();
  if (!dict) grpo.tool_budget = 0;
  grpo.diagnostics_path = out / "nonfinite_batch.json";
  auto train_log = detail::open_for_write(out / "train_log.csv");
  auto eval_log = detail::open_for_write(out / "eval_log.csv");
  train_log << "step,mean_reward,mean_tool_calls,loss\n";
  eval_log << "step,mean_reward,mean_tool_calls\n";
  const auto result = rl_train(
      model, corpus, dict ? &*dict : nullptr, grpo,
      [&](const RlLogEntry& e) {
        train_log << e.step << ',' << e.mean_reward << ',' << e.mean_tool_calls << ',' << e.loss << '\n';
        if (e.step % 10 == 0) std::cerr << "rl step " << e.step << " reward " << e.mean_reward << '\n';
      },
      [&](const RlEvalEntry& e) {
        eval_log << e.step << ',' << e.mean_reward << ',' << e.mean_tool_calls << '\n';
        std::cerr << "rl eval step " << e.step << " reward " << e.mean_reward << " calls " << e.mean_tool_calls
                  << '\n';
      });
  save_checkpoint(out, model, result.log.size(), Rng(derive_seed(cfg.seed, 0x9A1F)), detail::run_settings(cfg));
  std::cerr << "rl: " << result.optimizer_steps << " updates, " << result.skipped_steps << " skipped steps\n";
  return kExitOk;
}

inline int run_eval(const RunConfig& cfg, bool no_tool, const std::string& replay) {
  detail::require(cfg.test, "test");
  detail::require(cfg.report, "report");
  const auto test = load_corpus(cfg.test);
  const auto dict = detail::maybe_dictionary(cfg, no_tool);
  const auto ecfg = cfg.eval();
  const std::size_t budget = dict ? ecfg.tool_budget : 0;

  EvalOutput result;
  if (!replay.empty()) {
    auto in = lexrl::detail::open_for_read(replay);
    result.episodes = read_transcripts(in, Vocabulary{});
    result.report = compute_report(result.episodes, test, dict ? &*dict : nullptr, budget, ecfg.bleu);
  } else {
    detail::require(cfg.ckpt, "ckpt");
    const auto ck = load_checkpoint(cfg.ckpt);
    result = evaluate(ck.model, test, dict ? &*dict : nullptr, ecfg);
  }
  {
    auto os = detail::open_for_write(cfg.report);
    os << report_to_json(result.report).dump(2) << '\n';
  }
  if (!cfg.transcripts.empty()) {
    auto os = detail::open_for_write(cfg.transcripts);
    write_transcripts(os, result.episodes);
  }
  std::cerr << "eval: avg_bleu " << result.report.avg_bleu << " over " << result.report.n_samples << " samples\n";
  return kExitOk;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  auto in = lexrl::detail::open_for_read(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

inline int run_score(const std::string& hyp_path, const std::string& ref_path, const std::string& metric,
                     const RunConfig& cfg) {
  const RewardKind kind = parse_reward_kind(metric);
  const auto hyp = read_lines(hyp_path);
  const auto ref = read_lines(ref_path);
  if (hyp.size() != ref.size()) throw UsageError("hypothesis and reference line counts differ");
  if (hyp.empty()) throw UsageError("nothing to score");
  std::cout << std::setprecision(17) << "line\t" << metric << '\n';
  double sum = 0.0;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    const double s = answer_reward(hyp[i], ref[i], kind, cfg.bleu);
    sum += s;
    std::cout << i + 1 << '\t' << s << '\n';
  }
  std::cout << "mean\t" << sum / static_cast<double>(hyp.size()) << '\n';
  return kExitOk;
}

inline int run_generate(const RunConfig& cfg, const std::string& text, bool no_tool) {
  detail::require(cfg.ckpt, "ckpt");
  if (text.empty()) throw UsageError("--text is required");
  const auto ck = load_checkpoint(cfg.ckpt);
  const auto dict = detail::maybe_dictionary(cfg, no_tool);
  const auto ecfg = cfg.eval();
  Rng rng(derive_seed(cfg.seed, 0x6E4));
  const auto ep = run_tool_loop(ck.model, text, dict ? &*dict : nullptr, dict ? ecfg.tool_budget : 0,
                                ecfg.generation, rng);
  std::cout << transcript_text(ep) << '\n';
  std::cout << "answer: " << (ep.answer ? *ep.answer : std::string("<none>")) << '\n';
  return kExitOk;
}

/// Parses argv and runs one stage. Returns 0 on success, 1 on a usage
/// error, 2 on a runtime failure.
inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Dictionary-tool translation pipeline: SFT, GRPO and evaluation", "lexrl"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);

  detail::ConfigFlags common;
  bool no_tool = false;

  std::string dict_in, dict_out;
  std::size_t max_source_words = Dictionary::kDefaultMaxSourceWords;
  auto* dict_cmd = app.add_subcommand("dict", "dictionary utilities");
  dict_cmd->require_subcommand(1);
  auto* dict_build = dict_cmd->add_subcommand("build", "filter a raw dictionary");
  dict_build->add_option("--in", dict_in)->required();
  dict_build->add_option("--out", dict_out)->required();
  dict_build->add_option("--max-source-words", max_source_words);

  auto* toygen = app.add_subcommand("toygen", "generate a synthetic toy language");
  auto* sft = app.add_subcommand("sft", "supervised fine-tuning");
  auto* rl = app.add_subcommand("rl", "GRPO reinforcement learning");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* score = app.add_subcommand("score", "score hypothesis lines against references");
  auto* generate = app.add_subcommand("generate", "run one tool-augmented translation");

  for (auto* sub : {toygen, sft, rl, eval, score, generate}) common.attach(*sub, config_keys());
  for (auto* sub : {sft, rl, eval, generate}) sub->add_flag("--no-tool", no_tool, "disable the dictionary tool");

  std::string replay;
  eval->add_option("--replay", replay, "recompute the report from a transcript dump");
  std::string hyp, ref, metric = "bleu";
  score->add_option("--hyp", hyp)->required();
  score->add_option("--ref", ref)->required();
  score->add_option("--metric", metric)->check(CLI::IsMember({"bleu", "character"}));
  std::string text;
  generate->add_option("--text", text)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (dict_build->parsed()) return run_dict_build(dict_in, dict_out, max_source_words);
    CLI::App* chosen = app.get_subcommands().front();
    const RunConfig cfg = common.resolve(*chosen);
    if (toygen->parsed()) return run_toygen(cfg);
    if (sft->parsed()) return run_sft(cfg, no_tool);
    if (rl->parsed()) return run_rl(cfg, no_tool);
    if (eval->parsed()) return run_eval(cfg, no_tool, replay);
    if (score->parsed()) return run_score(hyp, ref, metric, cfg);
    if (generate->parsed()) return run_generate(cfg, text, no_tool);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace lexrl::cli
