#pragma once

#include <set>
#include <string>
#include <vector>

#include "tinyrlhf/rollout.hpp"

namespace testutil {

// Structural checks on a rollout engine's block pool. Returns one message per
// violation; empty means sound.
inline std::vector<std::string> engine_violations(const tinyrlhf::rollout::Engine& engine) {
  using tinyrlhf::rollout::BlockId;
  std::vector<std::string> out;
  const auto& alloc = engine.allocator();
  const std::size_t total = alloc.total();
  const std::size_t bs = alloc.block_size();

  std::vector<std::size_t> refs(total, 0);
  for (const auto& s : engine.sessions()) {
    for (BlockId b : s.table.blocks) ++refs.at(b);
    const std::size_t cap = s.table.capacity(bs);
    if (cap < s.table.length || cap - s.table.length >= bs) {
      out.push_back("session " + std::to_string(s.id) + " holds " + std::to_string(cap) + " slots for " +
                    std::to_string(s.table.length) + " tokens");
    }
  }
  std::size_t live = 0;
  for (BlockId b = 0; b < total; ++b) {
    if (alloc.refcount(b) != refs[b]) {
      out.push_back("block " + std::to_string(b) + " refcount " + std::to_string(alloc.refcount(b)) +
                    " but referenced " + std::to_string(refs[b]) + " times");
    }
    live += alloc.refcount(b) > 0;
  }
  std::set<BlockId> seen;
  for (BlockId b : alloc.free_list()) {
    if (!seen.insert(b).second) out.push_back("block " + std::to_string(b) + " twice on the free list");
    if (alloc.refcount(b) != 0) out.push_back("free block " + std::to_string(b) + " has references");
  }
  if (live + alloc.free_count() != total) {
    out.push_back("conservation: " + std::to_string(live) + " live + " + std::to_string(alloc.free_count()) +
                  " free != " + std::to_string(total));
  }
  return out;
}

}  // namespace testutil
