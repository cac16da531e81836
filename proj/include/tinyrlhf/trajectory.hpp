#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tinyrlhf/tinylm.hpp"

namespace tinyrlhf {

// One sampled response and everything the training stages attach to it.
// Per-token arrays are indexed by response position and share one length.
struct Trajectory {
  std::uint64_t request_id = 0;
  std::uint32_t sample_index = 0;
  std::int64_t group_id = 0;
  std::uint64_t generation_version = 0;

  std::vector<Token> prompt;
  std::vector<Token> response;
  std::vector<std::uint8_t> mask;

  std::vector<double> old_logprobs;  // behaviour policy, recorded at sampling time
  std::vector<double> ref_logprobs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<double> entropies;  // of the sampling distribution

  // Filled by the advantage stage.
  std::vector<double> shaped_rewards;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t length() const noexcept { return response.size(); }
  std::size_t unmasked_count() const noexcept;
  double total_reward() const noexcept;

  // prompt followed by response
  std::vector<Token> tokens() const;
};

struct TrajectoryBatch {
  std::vector<Trajectory> sequences;

  bool empty() const noexcept { return sequences.empty(); }
  std::size_t size() const noexcept { return sequences.size(); }
  std::size_t token_count() const noexcept;
  std::size_t unmasked_count() const noexcept;
  void append(TrajectoryBatch&& other);
};

}  // namespace tinyrlhf
