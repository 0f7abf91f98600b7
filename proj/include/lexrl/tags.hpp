#pragma once

#include <array>
#include <string>

namespace lexrl {

/// The six protocol markers. Each is a single reserved vocabulary symbol.
struct TagSet {
  std::string tool_open = "<spa_to_wayuu>";
  std::string tool_close = "</spa_to_wayuu>";
  std::string matches_open = "<matches>";
  std::string matches_close = "</matches>";
  std::string answer_open = "<answer>";
  std::string answer_close = "</answer>";

  std::array<const std::string*, 6> all() const {
    return {&tool_open, &tool_close, &matches_open, &matches_close, &answer_open, &answer_close};
  }
};

}  // namespace lexrl
