#pragma once

// Rollout engine: paged key/value cache with reference-counted prefix sharing,
// continuous batching across generation sessions, per-token logprob recording
// and versioned weight swaps.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "tinyrlhf/tinylm.hpp"
#include "tinyrlhf/trajectory.hpp"

namespace tinyrlhf::rollout {

inline constexpr Token kNoEos = -1;

struct EngineConfig {
  std::size_t total_blocks = 256;
  std::size_t block_size = 16;
  std::size_t max_batch = 64;
  double temperature = 1.0;
  std::size_t max_new_tokens = 16;
  Token eos_token = kNoEos;  // kNoEos: stop on length only

  void validate() const;
};

using BlockId = std::uint32_t;
using SessionId = std::uint64_t;

struct KvBlockInfo {
  BlockId block_id = 0;
  std::size_t refcount = 0;
  std::size_t fill = 0;
};

// Fixed pool of KV blocks. A block is on the free list iff its refcount is 0.
class BlockAllocator {
 public:
  BlockAllocator(std::size_t total_blocks, std::size_t block_size, std::size_t n_layers,
                 std::size_t d_model);

  // Refcount 1, fill 0; nullopt when the pool is exhausted.
  std::optional<BlockId> allocate();
  void retain(BlockId id);
  // Returns true when the block went back to the free list.
  bool release(BlockId id);

  // Copies the first `count` positions of every layer's keys and values.
  void copy_prefix(BlockId src, BlockId dst, std::size_t count);

  double* key(BlockId id, std::size_t layer, std::size_t offset);
  double* value(BlockId id, std::size_t layer, std::size_t offset);
  const double* key(BlockId id, std::size_t layer, std::size_t offset) const;
  const double* value(BlockId id, std::size_t layer, std::size_t offset) const;

  KvBlockInfo info(BlockId id) const;
  std::size_t refcount(BlockId id) const { return refcounts_.at(id); }
  std::size_t fill(BlockId id) const { return fills_.at(id); }
  void note_fill(BlockId id, std::size_t fill);

  std::size_t total() const noexcept { return refcounts_.size(); }
  std::size_t free_count() const noexcept { return free_list_.size(); }
  std::size_t block_size() const noexcept { return block_size_; }
  const std::vector<BlockId>& free_list() const noexcept { return free_list_; }

 private:
  std::size_t index(BlockId id, std::size_t layer, std::size_t offset) const;

  std::size_t block_size_;
  std::size_t n_layers_;
  std::size_t d_model_;
  std::vector<double> keys_;
  std::vector<double> values_;
  std::vector<std::size_t> refcounts_;
  std::vector<std::size_t> fills_;
  std::vector<BlockId> free_list_;
};

struct BlockTable {
  std::vector<BlockId> blocks;
  std::size_t length = 0;  // logical tokens

  std::size_t capacity(std::size_t block_size) const noexcept { return blocks.size() * block_size; }
};

// KvStore view over one block table.
class PagedKvStore final : public lm::KvStore {
 public:
  PagedKvStore(BlockAllocator& alloc, BlockTable& table) : alloc_(alloc), table_(table) {}

  std::size_t size() const override { return table_.length; }
  double* key_slot(std::size_t layer, std::size_t pos) override;
  double* value_slot(std::size_t layer, std::size_t pos) override;
  const double* key(std::size_t layer, std::size_t pos) const override;
  const double* value(std::size_t layer, std::size_t pos) const override;
  void advance(std::size_t count) override;

 private:
  BlockId block_at(std::size_t pos) const;

  BlockAllocator& alloc_;
  BlockTable& table_;
};

struct RolloutRequest {
  std::uint64_t request_id = 0;
  std::vector<Token> prompt;
  std::uint32_t n_samples = 1;
  std::uint64_t seed = 0;
  std::int64_t group_id = 0;
  std::size_t max_new_tokens = 0;  // 0: engine default
};

struct AdmitResult {
  std::vector<SessionId> sessions;  // empty when queued
  bool queued = false;
};

struct SessionInfo {
  SessionId id = 0;
  std::uint64_t request_id = 0;
  std::uint32_t sample_index = 0;
  std::uint64_t version = 0;
  std::size_t response_length = 0;
  BlockTable table;
};

struct EngineStats {
  std::uint64_t ticks = 0;
  std::uint64_t tokens_generated = 0;
  std::uint64_t preemptions = 0;
  std::uint64_t sessions_finished = 0;
};

struct SampledToken {
  Token token = 0;
  double logprob = 0.0;
  double entropy = 0.0;
};

// Inverse-CDF draw from softmax(logits / temperature) with the uniform `u`.
SampledToken sample_token(std::span<const double> logits, double temperature, double u);

// RNG stream key for one sample of one request.
std::uint64_t sample_stream_key(std::uint64_t request_seed, std::uint32_t sample_index);

class Engine {
 public:
  Engine(lm::ModelConfig model, EngineConfig config);

  // Sessions admitted after this call use `params`; in-flight sessions keep
  // the version they started with. Throws StaleVersionError unless
  // params.version exceeds the current version.
  std::uint64_t set_weights(lm::ModelParams params);
  std::optional<std::uint64_t> version() const;

  // Allocates the prompt blocks once and shares them among the request's
  // samples. Waits in FIFO order when slots or blocks are short.
  AdmitResult admit(RolloutRequest request);

  // One decode step for every active session. Returns sessions that finished.
  std::vector<SessionId> tick();

  // Drops an active session without producing a trajectory.
  std::size_t release(SessionId id);

  // Finished sessions since the previous call, in completion order.
  TrajectoryBatch collect();

  bool idle() const noexcept { return active_.empty() && waiting_.empty(); }
  std::size_t active_count() const noexcept { return active_.size(); }
  std::size_t queued_count() const noexcept;
  std::size_t finished_pending() const noexcept { return finished_.size(); }
  const BlockAllocator& allocator() const noexcept { return alloc_; }
  const EngineConfig& config() const noexcept { return config_; }
  const EngineStats& stats() const noexcept { return stats_; }
  std::vector<SessionInfo> sessions() const;

 private:
  struct Session {
    SessionId id = 0;
    std::uint64_t admission_seq = 0;
    std::shared_ptr<const RolloutRequest> request;
    std::uint32_t sample_index = 0;
    std::shared_ptr<const lm::ModelParams> params;
    BlockTable table;
    std::vector<double> next_logits;
    std::vector<Token> response;
    std::vector<double> logprobs;
    std::vector<double> entropies;
    std::size_t max_new = 0;
  };

  struct WaitingEntry {
    std::shared_ptr<const RolloutRequest> request;
    std::vector<std::uint32_t> sample_indices;
    std::vector<SessionId> session_ids;  // reused on re-admission after preemption
    std::shared_ptr<const lm::ModelParams> params;  // bound version, null for fresh requests
  };

  void admit_waiting();
  bool try_admit(WaitingEntry& entry);
  // Makes the slot at the session's next position writable. Returns false
  // when the pool is exhausted.
  bool reserve_slot(Session& s);
  std::size_t drop_blocks(BlockTable& table);
  // Releases the session's blocks and records its trajectory.
  void retire(Session& s);
  void preempt(std::size_t active_index);

  lm::ModelConfig model_;
  EngineConfig config_;
  BlockAllocator alloc_;
  std::shared_ptr<const lm::ModelParams> params_;
  std::vector<Session> active_;  // admission order
  std::deque<WaitingEntry> waiting_;
  TrajectoryBatch finished_;
  SessionId next_session_ = 1;
  std::uint64_t next_admission_ = 0;
  EngineStats stats_;
};

// Unpaged generation with a contiguous cache and the same sampling stream as
// the engine. Used to check that paging does not change what is generated.
std::vector<Token> reference_generate(const lm::ModelParams& params, std::span<const Token> prompt,
                                      std::uint64_t request_seed, std::uint32_t sample_index,
                                      const EngineConfig& config, std::size_t max_new_tokens = 0);

// Argmax decoding with a contiguous cache; stops at `eos` (unless kNoEos) or
// after max_new_tokens, whichever comes first.
std::vector<Token> greedy_generate(const lm::ModelParams& params, std::span<const Token> prompt,
                                   std::size_t max_new_tokens, Token eos = kNoEos);

}  // namespace tinyrlhf::rollout
