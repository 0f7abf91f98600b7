#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lexrl/data.hpp"
#include "lexrl/parallel.hpp"
#include "lexrl/protocol.hpp"
#include "lexrl/random.hpp"

namespace lexrl {

/// One tool-loop episode per source; episode i draws from its own stream
/// derive_seed(seed, stream, i).
inline std::vector<Episode> run_episodes(const Policy& policy, const std::vector<std::string>& sources,
                                         const Dictionary* dict, std::size_t budget, const GenerationConfig& gen,
                                         std::uint64_t seed, std::uint64_t stream, std::size_t workers) {
  std::vector<Episode> out(sources.size());
  parallel_for(sources.size(), workers, [&](std::size_t i) {
    Rng rng(derive_seed(seed, stream, i));
    out[i] = run_tool_loop(policy, sources[i], dict, budget, gen, rng);
  });
  return out;
}

inline std::vector<std::string> sources_of(const std::vector<ParallelPair>& pairs) {
  std::vector<std::string> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.source);
  return out;
}

}  // namespace lexrl
