#include "tinyrlhf/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/rng.hpp"

namespace tinyrlhf::rollout {

void EngineConfig::validate() const {
  if (total_blocks < 1) throw ConfigError("engine.total_blocks must be >= 1");
  if (block_size < 1) throw ConfigError("engine.block_size must be >= 1");
  if (max_batch < 1) throw ConfigError("engine.max_batch must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("engine.temperature must be > 0");
  if (max_new_tokens < 1) throw ConfigError("engine.max_new_tokens must be >= 1");
}

// ---------------------------------------------------------------------------

BlockAllocator::BlockAllocator(std::size_t total_blocks, std::size_t block_size, std::size_t n_layers,
                               std::size_t d_model)
    : block_size_(block_size),
      n_layers_(n_layers),
      d_model_(d_model),
      keys_(total_blocks * n_layers * block_size * d_model, 0.0),
      values_(total_blocks * n_layers * block_size * d_model, 0.0),
      refcounts_(total_blocks, 0),
      fills_(total_blocks, 0) {
  if (total_blocks < 1 || block_size < 1) throw ConfigError("block pool must be non-empty");
  // Stack with the lowest id on top.
  free_list_.reserve(total_blocks);
  for (std::size_t i = total_blocks; i-- > 0;) free_list_.push_back(static_cast<BlockId>(i));
}

std::optional<BlockId> BlockAllocator::allocate() {
  if (free_list_.empty()) return std::nullopt;
  const BlockId id = free_list_.back();
  free_list_.pop_back();
  refcounts_[id] = 1;
  fills_[id] = 0;
  return id;
}

void BlockAllocator::retain(BlockId id) {
  if (refcounts_.at(id) == 0) throw InputError("retain on free block " + std::to_string(id));
  ++refcounts_[id];
}

bool BlockAllocator::release(BlockId id) {
  if (refcounts_.at(id) == 0) throw InputError("release on free block " + std::to_string(id));
  if (--refcounts_[id] > 0) return false;
  fills_[id] = 0;
  free_list_.push_back(id);
  return true;
}

std::size_t BlockAllocator::index(BlockId id, std::size_t layer, std::size_t offset) const {
  return ((static_cast<std::size_t>(id) * n_layers_ + layer) * block_size_ + offset) * d_model_;
}

void BlockAllocator::copy_prefix(BlockId src, BlockId dst, std::size_t count) {
  for (std::size_t l = 0; l < n_layers_; ++l) {
    std::copy_n(&keys_[index(src, l, 0)], count * d_model_, &keys_[index(dst, l, 0)]);
    std::copy_n(&values_[index(src, l, 0)], count * d_model_, &values_[index(dst, l, 0)]);
  }
  fills_.at(dst) = count;
}

double* BlockAllocator::key(BlockId id, std::size_t layer, std::size_t offset) {
  return &keys_[index(id, layer, offset)];
}

double* BlockAllocator::value(BlockId id, std::size_t layer, std::size_t offset) {
  return &values_[index(id, layer, offset)];
}

const double* BlockAllocator::key(BlockId id, std::size_t layer, std::size_t offset) const {
  return &keys_[index(id, layer, offset)];
}

const double* BlockAllocator::value(BlockId id, std::size_t layer, std::size_t offset) const {
  return &values_[index(id, layer, offset)];
}

KvBlockInfo BlockAllocator::info(BlockId id) const {
  return KvBlockInfo{id, refcounts_.at(id), fills_.at(id)};
}

void BlockAllocator::note_fill(BlockId id, std::size_t fill) {
  fills_.at(id) = std::max(fills_.at(id), fill);
}

// ---------------------------------------------------------------------------

BlockId PagedKvStore::block_at(std::size_t pos) const {
  const std::size_t b = pos / alloc_.block_size();
  if (b >= table_.blocks.size()) {
    throw CapacityError("position " + std::to_string(pos) + " has no reserved KV block");
  }
  return table_.blocks[b];
}

double* PagedKvStore::key_slot(std::size_t layer, std::size_t pos) {
  return alloc_.key(block_at(pos), layer, pos % alloc_.block_size());
}

double* PagedKvStore::value_slot(std::size_t layer, std::size_t pos) {
  return alloc_.value(block_at(pos), layer, pos % alloc_.block_size());
}

const double* PagedKvStore::key(std::size_t layer, std::size_t pos) const {
  return alloc_.key(block_at(pos), layer, pos % alloc_.block_size());
}

const double* PagedKvStore::value(std::size_t layer, std::size_t pos) const {
  return alloc_.value(block_at(pos), layer, pos % alloc_.block_size());
}

void PagedKvStore::advance(std::size_t count) {
  const std::size_t bs = alloc_.block_size();
  const std::size_t end = table_.length + count;
  if (end > table_.capacity(bs)) throw CapacityError("advance past reserved KV blocks");
  for (std::size_t b = table_.length / bs; b * bs < end; ++b) {
    alloc_.note_fill(table_.blocks[b], std::min(bs, end - b * bs));
  }
  table_.length = end;
}

// ---------------------------------------------------------------------------

SampledToken sample_token(std::span<const double> logits, double temperature, double u) {
  const std::size_t V = logits.size();
  std::vector<double> scaled(V);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < V; ++i) {
    scaled[i] = logits[i] / temperature;
    mx = std::max(mx, scaled[i]);
  }
  double sum = 0.0;
  for (double z : scaled) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);

  SampledToken out;
  out.token = static_cast<Token>(V - 1);
  double cum = 0.0;
  bool picked = false;
  double entropy = 0.0;
  for (std::size_t i = 0; i < V; ++i) {
    const double lp = scaled[i] - lse;
    const double p = std::exp(lp);
    entropy -= p * lp;
    cum += p;
    if (!picked && u < cum) {
      out.token = static_cast<Token>(i);
      picked = true;
    }
  }
  // Rounding can leave u >= cum at the end; fall back to the last token with mass.
  if (!picked) {
    for (std::size_t i = V; i-- > 0;) {
      if (std::exp(scaled[i] - lse) > 0.0) {
        out.token = static_cast<Token>(i);
        break;
      }
    }
  }
  out.logprob = std::min(0.0, scaled[static_cast<std::size_t>(out.token)] - lse);
  out.entropy = V == 1 ? 0.0 : std::max(0.0, entropy);
  return out;
}

std::uint64_t sample_stream_key(std::uint64_t request_seed, std::uint32_t sample_index) {
  return derive_key(derive_key(request_seed, "sampling"), sample_index);
}

namespace {

double stream_uniform(std::uint64_t key, std::size_t step) {
  return static_cast<double>(CounterRng(key).at(step) >> 11) * 0x1.0p-53;
}

std::vector<lm::DecodeRow> prefill_rows(lm::KvStore& store, std::span<const Token> prompt) {
  std::vector<lm::DecodeRow> rows;
  rows.reserve(prompt.size());
  for (Token t : prompt) rows.push_back({&store, t});
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------

Engine::Engine(lm::ModelConfig model, EngineConfig config)
    : model_(model),
      config_(config),
      alloc_((config.validate(), model.validate(), config.total_blocks), config.block_size,
             model.n_layers, model.d_model) {}

std::uint64_t Engine::set_weights(lm::ModelParams params) {
  if (lm::shape_hash(params.config) != lm::shape_hash(model_)) throw InputError("weights were built for a different model config");
  if (params_ && params.version <= params_->version) {
    throw StaleVersionError("weight version " + std::to_string(params.version) +
                            " is not newer than engine version " + std::to_string(params_->version));
  }
  params_ = std::make_shared<const lm::ModelParams>(std::move(params));
  return params_->version;
}

std::optional<std::uint64_t> Engine::version() const {
  if (!params_) return std::nullopt;
  return params_->version;
}

std::size_t Engine::queued_count() const noexcept {
  std::size_t n = 0;
  for (const auto& w : waiting_) n += w.sample_indices.size();
  return n;
}

AdmitResult Engine::admit(RolloutRequest request) {
  if (!params_) throw Error("rollout engine has no weights");
  if (request.prompt.empty()) throw InputError("request " + std::to_string(request.request_id) + ": empty prompt");
  if (request.n_samples < 1) throw InputError("request needs n_samples >= 1");
  if (request.prompt.size() >= model_.context_window) {
    throw InputError("request " + std::to_string(request.request_id) + ": prompt of length " +
                     std::to_string(request.prompt.size()) + " leaves no room in context window " +
                     std::to_string(model_.context_window));
  }
  for (Token t : request.prompt) {
    if (t < 0 || static_cast<std::size_t>(t) >= model_.vocab_size) {
      throw InputError("request " + std::to_string(request.request_id) + ": token " +
                       std::to_string(t) + " outside vocabulary");
    }
  }
  if (request.n_samples > config_.max_batch) {
    throw InputError("request asks for " + std::to_string(request.n_samples) +
                     " samples but max_batch is " + std::to_string(config_.max_batch));
  }
  const std::size_t prompt_blocks = (request.prompt.size() + config_.block_size - 1) / config_.block_size;
  if (prompt_blocks > alloc_.total()) {
    throw InputError("prompt needs " + std::to_string(prompt_blocks) + " blocks, pool has " +
                     std::to_string(alloc_.total()));
  }

  WaitingEntry entry;
  entry.request = std::make_shared<const RolloutRequest>(std::move(request));
  for (std::uint32_t k = 0; k < entry.request->n_samples; ++k) entry.sample_indices.push_back(k);
  const RolloutRequest* key = entry.request.get();
  waiting_.push_back(std::move(entry));
  admit_waiting();

  AdmitResult result;
  for (const auto& s : active_) {
    if (s.request.get() == key) result.sessions.push_back(s.id);
  }
  result.queued = result.sessions.empty();
  return result;
}

void Engine::admit_waiting() {
  while (!waiting_.empty() && try_admit(waiting_.front())) waiting_.pop_front();
}

bool Engine::try_admit(WaitingEntry& entry) {
  const std::size_t n = entry.sample_indices.size();
  if (active_.size() + n > config_.max_batch) return false;
  const auto& prompt = entry.request->prompt;
  const std::size_t bs = config_.block_size;
  const std::size_t needed = (prompt.size() + bs - 1) / bs;
  if (alloc_.free_count() < needed) return false;

  auto params = entry.params ? entry.params : params_;
  BlockTable table;
  for (std::size_t i = 0; i < needed; ++i) table.blocks.push_back(*alloc_.allocate());
  PagedKvStore store(alloc_, table);
  const auto rows = prefill_rows(store, prompt);
  auto logits = lm::decode_rows(*params, rows);

  const std::size_t room = model_.context_window - prompt.size();
  const std::size_t max_new =
      std::min(room, entry.request->max_new_tokens > 0 ? entry.request->max_new_tokens : config_.max_new_tokens);
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0) {
      for (BlockId b : table.blocks) alloc_.retain(b);
    }
    Session s;
    s.id = entry.session_ids.empty() ? next_session_++ : entry.session_ids[k];
    s.admission_seq = next_admission_++;
    s.request = entry.request;
    s.sample_index = entry.sample_indices[k];
    s.params = params;
    s.table = table;
    s.next_logits = logits.back();
    s.max_new = max_new;
    active_.push_back(std::move(s));
  }
  return true;
}

bool Engine::reserve_slot(Session& s) {
  const std::size_t bs = config_.block_size;
  const std::size_t pos = s.table.length;
  if (pos == s.table.capacity(bs)) {
    auto fresh = alloc_.allocate();
    if (!fresh) return false;
    s.table.blocks.push_back(*fresh);
    return true;
  }
  const BlockId last = s.table.blocks.back();
  if (alloc_.refcount(last) == 1) return true;
  // Shared, partially filled: copy before writing.
  auto fresh = alloc_.allocate();
  if (!fresh) return false;
  alloc_.copy_prefix(last, *fresh, pos % bs);
  alloc_.release(last);
  s.table.blocks.back() = *fresh;
  return true;
}

std::size_t Engine::drop_blocks(BlockTable& table) {
  std::size_t freed = 0;
  for (BlockId b : table.blocks) freed += alloc_.release(b) ? 1 : 0;
  table.blocks.clear();
  table.length = 0;
  return freed;
}

void Engine::retire(Session& s) {
  drop_blocks(s.table);
  Trajectory t;
  t.request_id = s.request->request_id;
  t.sample_index = s.sample_index;
  t.group_id = s.request->group_id;
  t.generation_version = s.params->version;
  t.prompt = s.request->prompt;
  t.response = std::move(s.response);
  t.mask.assign(t.response.size(), 1);
  t.old_logprobs = std::move(s.logprobs);
  t.entropies = std::move(s.entropies);
  finished_.sequences.push_back(std::move(t));
  ++stats_.sessions_finished;
}

void Engine::preempt(std::size_t i) {
  Session& s = active_[i];
  drop_blocks(s.table);
  WaitingEntry entry;
  entry.request = s.request;
  entry.sample_indices = {s.sample_index};
  entry.session_ids = {s.id};
  entry.params = s.params;
  waiting_.push_front(std::move(entry));
  ++stats_.preemptions;
  active_.erase(active_.begin() + static_cast<std::ptrdiff_t>(i));
}

std::vector<SessionId> Engine::tick() {
  ++stats_.ticks;
  std::vector<SessionId> done;

  // Sample one token per session from its pending distribution.
  std::vector<bool> finished(active_.size(), false);
  for (std::size_t i = 0; i < active_.size(); ++i) {
    Session& s = active_[i];
    const double u = stream_uniform(sample_stream_key(s.request->seed, s.sample_index), s.response.size());
    const SampledToken st = sample_token(s.next_logits, config_.temperature, u);
    s.response.push_back(st.token);
    s.logprobs.push_back(st.logprob);
    s.entropies.push_back(st.entropy);
    ++stats_.tokens_generated;
    finished[i] = (config_.eos_token != kNoEos && st.token == config_.eos_token) ||
                  s.response.size() >= s.max_new;
  }
  std::vector<Session> still_active;
  still_active.reserve(active_.size());
  for (std::size_t i = 0; i < active_.size(); ++i) {
    if (finished[i]) {
      done.push_back(active_[i].id);
      retire(active_[i]);
    } else {
      still_active.push_back(std::move(active_[i]));
    }
  }
  active_ = std::move(still_active);

  // Reserve the next KV slot, preempting the youngest session on exhaustion.
  for (std::size_t i = 0; i < active_.size();) {
    if (reserve_slot(active_[i])) {
      ++i;
      continue;
    }
    preempt(active_.size() - 1);
  }

  // Feed the sampled tokens, one batched pass per bound weight version.
  std::vector<PagedKvStore> stores;
  stores.reserve(active_.size());
  for (auto& s : active_) stores.emplace_back(alloc_, s.table);
  std::vector<bool> fed(active_.size(), false);
  for (std::size_t i = 0; i < active_.size(); ++i) {
    if (fed[i]) continue;
    const lm::ModelParams* params = active_[i].params.get();
    std::vector<std::size_t> members;
    std::vector<lm::DecodeRow> rows;
    for (std::size_t j = i; j < active_.size(); ++j) {
      if (fed[j] || active_[j].params.get() != params) continue;
      members.push_back(j);
      rows.push_back({&stores[j], active_[j].response.back()});
      fed[j] = true;
    }
    auto logits = lm::decode_rows(*params, rows);
    for (std::size_t k = 0; k < members.size(); ++k) active_[members[k]].next_logits = std::move(logits[k]);
  }

  admit_waiting();
  return done;
}

std::size_t Engine::release(SessionId id) {
  for (std::size_t i = 0; i < active_.size(); ++i) {
    if (active_[i].id != id) continue;
    const std::size_t freed = drop_blocks(active_[i].table);
    active_.erase(active_.begin() + static_cast<std::ptrdiff_t>(i));
    admit_waiting();
    return freed;
  }
  throw InputError("unknown or finished session " + std::to_string(id));
}

TrajectoryBatch Engine::collect() {
  TrajectoryBatch out = std::move(finished_);
  finished_ = TrajectoryBatch{};
  return out;
}

std::vector<SessionInfo> Engine::sessions() const {
  std::vector<SessionInfo> out;
  out.reserve(active_.size());
  for (const auto& s : active_) {
    out.push_back(SessionInfo{s.id, s.request->request_id, s.sample_index, s.params->version,
                              s.response.size(), s.table});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Token> reference_generate(const lm::ModelParams& params, std::span<const Token> prompt,
                                      std::uint64_t request_seed, std::uint32_t sample_index,
                                      const EngineConfig& config, std::size_t max_new_tokens) {
  if (prompt.empty() || prompt.size() >= params.config.context_window) {
    throw InputError("prompt length out of range for reference generation");
  }
  lm::KvCache cache(params.config);
  const auto rows = prefill_rows(cache, prompt);
  std::vector<double> logits = lm::decode_rows(params, rows).back();
  const std::size_t room = params.config.context_window - prompt.size();
  const std::size_t max_new = std::min(room, max_new_tokens > 0 ? max_new_tokens : config.max_new_tokens);
  const std::uint64_t key = sample_stream_key(request_seed, sample_index);
  std::vector<Token> response;
  while (true) {
    const SampledToken st = sample_token(logits, config.temperature, stream_uniform(key, response.size()));
    response.push_back(st.token);
    if ((config.eos_token != kNoEos && st.token == config.eos_token) || response.size() >= max_new) break;
    logits = lm::forward_step(params, cache, st.token);
  }
  return response;
}

std::vector<Token> greedy_generate(const lm::ModelParams& params, std::span<const Token> prompt,
                                   std::size_t max_new_tokens, Token eos) {
  if (prompt.empty() || prompt.size() >= params.config.context_window) {
    throw InputError("prompt length out of range for greedy generation");
  }
  lm::KvCache cache(params.config);
  std::vector<double> logits = lm::decode_rows(params, prefill_rows(cache, prompt)).back();
  const std::size_t max_new = std::min(params.config.context_window - prompt.size(), max_new_tokens);
  std::vector<Token> response;
  while (response.size() < max_new) {
    const auto best = std::max_element(logits.begin(), logits.end());
    const auto token = static_cast<Token>(best - logits.begin());
    response.push_back(token);
    if ((eos != kNoEos && token == eos) || response.size() >= max_new) break;
    logits = lm::forward_step(params, cache, token);
  }
  return response;
}

}  // namespace tinyrlhf::rollout
