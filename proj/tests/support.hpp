#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lexrl/policy.hpp"
#include "lexrl/protocol.hpp"
#include "lexrl/vocabulary.hpp"

namespace lexrl::testing {

/// Emits a fixed script chosen from the source sentence, ignoring whatever
/// the tool loop injects, then end-of-sequence forever. The tool loop asks
/// for logits before each model symbol and feeds injections without asking,
/// which is how the session tells the two apart.
class ScriptPolicy final : public Policy {
 public:
  using Script = std::function<std::string(const std::string& source)>;

  explicit ScriptPolicy(Script script, std::size_t context = 1 << 16, std::size_t window = 0)
      : script_(std::move(script)), ctx_(context), window_(window) {}

  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t context_length() const override { return ctx_; }
  std::size_t prompt_window() const override { return window_; }

  std::unique_ptr<DecodeSession> open(std::span<const SymbolId> prompt) const override {
    const std::string text = vocab_.decode(prompt);
    const std::string marker = "Spanish text: ";
    const auto at = text.rfind(marker);
    const std::string source = at == std::string::npos ? std::string() : text.substr(at + marker.size());
    return std::make_unique<Session>(vocab_, vocab_.encode(script_(source)), prompt.size());
  }

 private:
  class Session final : public DecodeSession {
   public:
    Session(const Vocabulary& v, std::vector<SymbolId> script, std::size_t len)
        : script_(std::move(script)), logits_(v.size(), 0.0), eos_(v.eos_id()), length_(len) {
      refresh();
    }
    std::span<const double> logits() const override {
      asked_ = true;
      return logits_;
    }
    void feed(SymbolId) override {
      ++length_;
      if (asked_) {
        asked_ = false;
        ++cursor_;
        refresh();
      }
    }
    std::size_t length() const override { return length_; }

   private:
    void refresh() {
      std::fill(logits_.begin(), logits_.end(), -1e30);
      logits_[static_cast<std::size_t>(cursor_ < script_.size() ? script_[cursor_] : eos_)] = 0.0;
    }
    std::vector<SymbolId> script_;
    std::vector<double> logits_;
    SymbolId eos_;
    std::size_t length_;
    std::size_t cursor_ = 0;
    mutable bool asked_ = false;
  };

  Vocabulary vocab_;
  Script script_;
  std::size_t ctx_;
  std::size_t window_;
};

/// Fixed logits regardless of context: a stateless babbler whose symbol
/// preferences are set by the caller.
class ConstantPolicy final : public Policy {
 public:
  explicit ConstantPolicy(std::vector<double> logits, std::size_t context = 4096)
      : logits_(std::move(logits)), ctx_(context) {}

  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t context_length() const override { return ctx_; }
  std::unique_ptr<DecodeSession> open(std::span<const SymbolId> prompt) const override {
    return std::make_unique<Session>(logits_, prompt.size());
  }

 private:
  class Session final : public DecodeSession {
   public:
    Session(const std::vector<double>& l, std::size_t n) : logits_(l), length_(n) {}
    std::span<const double> logits() const override { return logits_; }
    void feed(SymbolId) override { ++length_; }
    std::size_t length() const override { return length_; }

   private:
    const std::vector<double>& logits_;
    std::size_t length_;
  };

  Vocabulary vocab_;
  std::vector<double> logits_;
  std::size_t ctx_;
};

inline std::string tool_call(const std::string& word) { return "<spa_to_wayuu> " + word + " </spa_to_wayuu>"; }
inline std::string answer_block(const std::string& text) { return "<answer> " + text + " </answer>"; }

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("lexrl-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace lexrl::testing
